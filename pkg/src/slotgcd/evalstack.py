"""GCD evaluation and analysis: semi-supervised k-means, Hungarian-matched
clustering accuracy (All/Known/Novel), category-count estimation, spectral
diagnostics of the embedding space, and slot-mask quality versus oracle
regions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from .errors import ConfigError, ShapeError


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching.  Returns (perm, total) where perm[i] is
    the column matched to row i.  Rectangular inputs are padded square."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ConfigError(f"hungarian expects a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ConfigError("hungarian: cost matrix contains non-finite entries")
    n, m = cost.shape
    if n != m:
        size = max(n, m)
        pad = np.full((size, size), abs(cost).max() * size + 1.0)
        pad[:n, :m] = cost
        rows, cols = linear_sum_assignment(pad)
        perm = np.full(n, -1, dtype=np.int64)
        for r, c in zip(rows, cols):
            if r < n and c < m:
                perm[r] = c
        total = float(sum(cost[r, perm[r]] for r in range(n) if perm[r] >= 0))
        return perm, total
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


# ---------------------------------------------------------------------------
# semi-supervised k-means
# ---------------------------------------------------------------------------


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(points.shape[0])]]
    for _ in range(k - 1):
        d2 = np.min(((points[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(d2.shape, 1.0 / d2.size)
        centers.append(points[rng.choice(points.shape[0], p=probs)])
    return np.asarray(centers)


@dataclass
class SskResult:
    assignments: np.ndarray      # cluster id per sample
    centers: np.ndarray          # (k, d)
    objective: list[float]       # per-iteration sum of squared distances
    class_to_cluster: dict[int, int]


def ssk_means(embeddings: np.ndarray, labeled_idx: np.ndarray,
              labeled_labels: np.ndarray, k: int, seed: int,
              gamma: float = 0.0, max_iter: int = 100) -> SskResult:
    """K-means over all samples with labeled samples pinned to their class
    cluster.  Known-class centers are seeded from labeled class means; the
    rest via k-means++ on the unlabeled points.  ``gamma`` > 0 adds a
    cluster-size penalty to the assignment distances (the balanced variant);
    gamma = 0 is the plain algorithm.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    labeled_idx = np.asarray(labeled_idx)
    labeled_labels = np.asarray(labeled_labels)
    classes = np.unique(labeled_labels)
    if k < classes.size:
        raise ConfigError(f"k={k} below the number of labeled classes {classes.size}")
    class_to_cluster = {int(c): i for i, c in enumerate(classes)}

    pinned = np.full(n, -1, dtype=np.int64)
    pinned[labeled_idx] = [class_to_cluster[int(c)] for c in labeled_labels]
    free = pinned < 0

    rng = np.random.default_rng(seed)
    centers = np.zeros((k, x.shape[1]))
    for c, ci in class_to_cluster.items():
        centers[ci] = x[labeled_idx[labeled_labels == c]].mean(axis=0)
    extra = k - classes.size
    if extra > 0:
        centers[classes.size:] = _kmeanspp(x[free], extra, rng) if free.any() \
            else _kmeanspp(x, extra, rng)

    assign = pinned.copy()
    objective: list[float] = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        penal = d2.copy()
        if gamma > 0 and objective:
            sizes = np.bincount(assign[assign >= 0], minlength=k)
            penal = d2 + gamma * sizes[None, :]
        new_assign = pinned.copy()
        new_assign[free] = penal[free].argmin(axis=1)
        # refill empty clusters from the farthest point
        for ci in range(k):
            if not np.any(new_assign == ci):
                far = int(np.argmax(d2[free].min(axis=1)))
                far_global = np.flatnonzero(free)[far]
                new_assign[far_global] = ci
                warnings.warn(f"ssk_means: re-seeded empty cluster {ci}")
        obj = float(d2[np.arange(n), new_assign].sum())
        objective.append(obj)
        for ci in range(k):
            members = new_assign == ci
            if members.any():
                centers[ci] = x[members].mean(axis=0)
        if np.array_equal(new_assign, assign) and len(objective) > 1:
            assign = new_assign
            break
        assign = new_assign
    return SskResult(assignments=assign, centers=centers, objective=objective,
                     class_to_cluster=class_to_cluster)


# ---------------------------------------------------------------------------
# clustering accuracy
# ---------------------------------------------------------------------------


@dataclass
class ClusterReport:
    assignments: np.ndarray
    acc_all: float       # percent, over the whole unlabeled set
    acc_known: float
    acc_novel: float
    mapping: dict[int, int]   # cluster id -> class id
    inertia: list[float] = field(default_factory=list)


def cluster_acc(assignments: np.ndarray, truth: np.ndarray,
                known_set: set[int] | tuple[int, ...]) -> ClusterReport:
    """One global Hungarian mapping over the unlabeled set, then All/Known/
    Novel accuracies by slicing on each sample's true class."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    if assignments.shape != truth.shape:
        raise ShapeError(f"cluster_acc: {assignments.shape} vs {truth.shape}")
    clusters = np.unique(assignments)
    classes = np.unique(truth)
    size = max(clusters.size, classes.size)
    cont = np.zeros((size, size))
    c_index = {c: i for i, c in enumerate(clusters)}
    y_index = {y: i for i, y in enumerate(classes)}
    for a, t in zip(assignments, truth):
        cont[c_index[a], y_index[t]] += 1
    perm, _ = hungarian(-cont)
    mapping = {int(clusters[i]): int(classes[perm[i]])
               for i in range(clusters.size) if perm[i] < classes.size}
    if not mapping:
        warnings.warn("cluster_acc: no overlap between mapping range and labels")
        return ClusterReport(assignments, 0.0, 0.0, 0.0, {})
    predicted = np.array([mapping.get(int(a), -1) for a in assignments])
    correct = predicted == truth
    known_mask = np.isin(truth, list(known_set))

    def pct(mask):
        return float(100.0 * correct[mask].mean()) if mask.any() else 0.0

    return ClusterReport(assignments=assignments,
                         acc_all=float(100.0 * correct.mean()),
                         acc_known=pct(known_mask), acc_novel=pct(~known_mask),
                         mapping=mapping)


# ---------------------------------------------------------------------------
# category-count estimation
# ---------------------------------------------------------------------------


def estimation_error(true_k: int, est_k: int) -> float:
    """Percent error |est - true| / true * 100."""
    return abs(est_k - true_k) / true_k * 100.0


def estimate_k(embeddings: np.ndarray, labeled_idx: np.ndarray,
               labeled_labels: np.ndarray, k_range, seed: int,
               true_k: int | None = None) -> tuple[int, float | None]:
    """Pick the candidate k maximizing clustering accuracy on a held-out half
    of the labeled data (ties -> smaller k); also Err% when true_k is given."""
    k_range = sorted(k_range)
    if len(k_range) < 2:
        raise ConfigError("k_range needs at least two candidates")
    rng = np.random.default_rng(seed)
    labeled_idx = np.asarray(labeled_idx)
    labeled_labels = np.asarray(labeled_labels)
    keep_mask = np.zeros(labeled_idx.size, dtype=bool)
    for c in np.unique(labeled_labels):
        pos = np.flatnonzero(labeled_labels == c)
        keep = rng.permutation(pos)[: max(1, pos.size // 2)]
        keep_mask[keep] = True
    anchor_idx = labeled_idx[keep_mask]
    anchor_labels = labeled_labels[keep_mask]
    held_idx = labeled_idx[~keep_mask]
    held_labels = labeled_labels[~keep_mask]

    scores = []
    for k in k_range:
        if k < np.unique(anchor_labels).size:
            scores.append(-1.0)
            continue
        res = ssk_means(embeddings, anchor_idx, anchor_labels, k,
                        seed=int(rng.integers(2**31)))
        rep = cluster_acc(res.assignments[held_idx], held_labels,
                          known_set=set(int(c) for c in np.unique(held_labels)))
        scores.append(rep.acc_all)
    scores = np.asarray(scores)
    if np.all(scores == scores[0]):
        warnings.warn("estimate_k: all candidates scored equally")
    best = int(k_range[int(np.argmax(scores))])   # argmax takes the first max
    err = estimation_error(true_k, best) if true_k is not None else None
    return best, err


# ---------------------------------------------------------------------------
# spectral diagnostics
# ---------------------------------------------------------------------------


@dataclass
class SpectralReport:
    entropy: float           # von Neumann entropy in nats
    rank99: int              # eigenvalue count covering 99% of spectral energy
    eigenvalues: np.ndarray  # descending, clamped at 0


def vne(embeddings: np.ndarray) -> SpectralReport:
    """Spectrum diagnostics of A = (1/n) Z^T Z for unit-norm rows Z."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError(f"vne expects (n, d) embeddings, got {z.shape}")
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ValueError("vne: rows must be unit-norm (normalize first)")
    a = z.T @ z / z.shape[0]
    lam = np.linalg.eigvalsh(a)[::-1]
    lam = np.clip(lam, 0.0, None)
    nz = lam[lam > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    cum = np.cumsum(lam)
    rank99 = int(np.searchsorted(cum, 0.99 * cum[-1]) + 1)
    return SpectralReport(entropy=entropy, rank99=rank99, eigenvalues=lam)


# ---------------------------------------------------------------------------
# mask quality
# ---------------------------------------------------------------------------


def mask_ari(slot_masks: np.ndarray, oracle_regions: np.ndarray) -> float:
    """Adjusted Rand index between argmax-slot token labels and the oracle
    region partition.  Accepts (K, N) soft masks or (N,) hard labels per
    sample; arrays may carry a leading sample axis, averaged over samples."""
    masks = np.asarray(slot_masks)
    oracle = np.asarray(oracle_regions)
    if masks.ndim == oracle.ndim + 1:     # soft masks -> hard labels
        masks = masks.argmax(axis=-2)
    if masks.shape != oracle.shape:
        raise ShapeError(f"mask_ari: {masks.shape} vs {oracle.shape}")
    if masks.ndim == 1:
        return float(adjusted_rand_score(oracle, masks))
    return float(np.mean([adjusted_rand_score(o, m) for o, m in zip(oracle, masks)]))

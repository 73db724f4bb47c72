"""Procedural token-grid dataset with oracle primitive regions and GCD splits.

A sample is an NxD token grid assembled from a class-specific multiset of
"visual primitives": each primitive owns a contiguous rectangular region of
the grid and every token in that region is the primitive's feature signature
plus Gaussian jitter.  Classes share a common primitive subset (the
confusable part of the taxonomy) and differ in at least one discriminative
primitive, so class identity is only recoverable from the non-shared
primitives.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class DataConfig:
    num_known: int = 5
    num_novel: int = 5
    vocab_size: int = 12
    shared_count: int = 3
    samples_per_class: int = 200
    n_tokens: int = 64
    feature_dim: int = 16
    noise_scale: float = 0.1
    labeled_fraction: float = 0.5
    # regions per sample = shared_count + discriminative_count; the default
    # 3 + 5 = 8 matches the slot count of the discovery module
    discriminative_count: int = 5

    @property
    def num_classes(self) -> int:
        return self.num_known + self.num_novel


def coarse_preset(**overrides) -> DataConfig:
    """80% of classes known, light label smoothing downstream."""
    cfg = DataConfig(num_known=8, num_novel=2)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@dataclass
class PrimitiveVocab:
    signatures: np.ndarray        # (vocab_size, feature_dim)
    noise_scale: float

    def __post_init__(self):
        d = _min_pairwise_distance(self.signatures)
        if self.noise_scale > 0 and d <= 3.0 * self.noise_scale:
            raise ConfigError(
                f"signature min pairwise distance {d:.3f} <= 3x noise scale")


@dataclass
class ClassSpec:
    class_id: int
    shared_ids: tuple[int, ...]       # primitives common to confusable classes
    discriminative_ids: tuple[int, ...]

    @property
    def primitive_ids(self) -> tuple[int, ...]:
        return self.shared_ids + self.discriminative_ids


@dataclass
class Taxonomy:
    vocab: PrimitiveVocab
    specs: list[ClassSpec]
    config: DataConfig
    seed: int


def _min_pairwise_distance(x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def make_taxonomy(config: DataConfig, seed: int) -> Taxonomy:
    """Build the primitive vocabulary and one spec per class.

    Every class contains the full shared subset plus a distinct combination
    of discriminative primitives, so any two classes differ in at least one
    primitive while remaining confusable on the shared ones.
    """
    cfg = config
    pool = cfg.vocab_size - cfg.shared_count
    if pool < 1:
        raise ConfigError("vocab must contain at least one non-shared primitive")

    disc_per_class = cfg.discriminative_count
    if not 1 <= disc_per_class <= pool or math.comb(pool, disc_per_class) < cfg.num_classes:
        raise ConfigError(
            f"cannot form {cfg.num_classes} distinct classes from {pool} "
            f"non-shared primitives taken {disc_per_class} at a time")

    rng = np.random.default_rng(seed)
    # well-separated signatures: random directions, unit scale
    sig = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    while cfg.noise_scale > 0 and _min_pairwise_distance(sig) <= 3.0 * cfg.noise_scale:
        sig = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)

    vocab = PrimitiveVocab(signatures=sig, noise_scale=cfg.noise_scale)
    shared = tuple(range(cfg.shared_count))
    disc_pool = list(range(cfg.shared_count, cfg.vocab_size))

    combos = list(combinations(disc_pool, disc_per_class))
    picks = rng.permutation(len(combos))[:cfg.num_classes]
    specs = [ClassSpec(class_id=c, shared_ids=shared,
                       discriminative_ids=tuple(combos[i]))
             for c, i in enumerate(sorted(picks))]
    return Taxonomy(vocab=vocab, specs=specs, config=cfg, seed=seed)


def _split_rect(rect: tuple[int, int, int, int], count: int,
                rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Recursively cut (r0, r1, c0, c1) into ``count`` sub-rectangles."""
    r0, r1, c0, c1 = rect
    if count == 1:
        return [rect]
    c_lo = count // 2
    c_hi = count - c_lo
    h, w = r1 - r0, c1 - c0
    axis_len, other = (h, w) if h >= w else (w, h)
    # both halves must have enough area for their sub-rectangle counts
    cut_min = max(1, math.ceil(c_lo / other))
    cut_max = axis_len - max(1, math.ceil(c_hi / other))
    if cut_min > cut_max:
        raise ConfigError(f"cannot tile {count} regions into a {h}x{w} rectangle")
    target = round(axis_len * c_lo / count) + int(rng.integers(-1, 2))
    cut = int(np.clip(target, cut_min, cut_max))
    if h >= w:
        a = (r0, r0 + cut, c0, c1)
        b = (r0 + cut, r1, c0, c1)
    else:
        a = (r0, r1, c0, c0 + cut)
        b = (r0, r1, c0 + cut, c1)
    return _split_rect(a, c_lo, rng) + _split_rect(b, c_hi, rng)


def generate_sample(spec: ClassSpec, vocab: PrimitiveVocab, n_tokens: int,
                    seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One sample: (tokens (N, D), oracle_regions (N,) of vocab primitive ids).

    The latent per-sample seed draws the region layout (pose) and the token
    jitter (appearance); the same seed always reproduces the same sample.
    """
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ConfigError(f"n_tokens={n_tokens} is not a perfect square")
    prims = list(spec.primitive_ids)
    if n_tokens < len(prims):
        raise ConfigError("grid smaller than the number of primitives")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(prims))
    rects = _split_rect((0, side, 0, side), len(prims), rng)

    regions = np.empty(n_tokens, dtype=np.int64)
    grid = regions.reshape(side, side)
    for slot_i, (r0, r1, c0, c1) in zip(order, rects):
        grid[r0:r1, c0:c1] = prims[slot_i]

    tokens = vocab.signatures[regions].copy()
    if vocab.noise_scale > 0:
        tokens += rng.normal(0.0, vocab.noise_scale, size=tokens.shape)
    return tokens, regions


@dataclass
class SyntheticDataset:
    tokens: np.ndarray    # (n_samples, n_tokens, feature_dim)
    labels: np.ndarray    # (n_samples,)
    regions: np.ndarray   # (n_samples, n_tokens) oracle primitive ids
    taxonomy: Taxonomy
    seed: int

    def __len__(self) -> int:
        return self.tokens.shape[0]


def generate_dataset(taxonomy: Taxonomy, seed: int) -> SyntheticDataset:
    """All samples for the taxonomy, ``samples_per_class`` per class."""
    cfg = taxonomy.config
    root = np.random.default_rng(seed)
    sample_seeds = root.integers(0, 2**62, size=(cfg.num_classes, cfg.samples_per_class))
    tokens, labels, regions = [], [], []
    for spec in taxonomy.specs:
        for j in range(cfg.samples_per_class):
            t, r = generate_sample(spec, taxonomy.vocab, cfg.n_tokens,
                                   int(sample_seeds[spec.class_id, j]))
            tokens.append(t)
            labels.append(spec.class_id)
            regions.append(r)
    return SyntheticDataset(tokens=np.stack(tokens), labels=np.asarray(labels),
                            regions=np.stack(regions), taxonomy=taxonomy, seed=seed)


@dataclass
class GcdSplit:
    labeled_idx: np.ndarray     # indices into the dataset; known classes only
    unlabeled_idx: np.ndarray   # remaining known + all novel
    known_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]


def make_gcd_split(dataset: SyntheticDataset, labeled_fraction: float,
                   seed: int) -> GcdSplit:
    """Per known class, ``labeled_fraction`` of samples become the labeled set."""
    if not 0.0 < labeled_fraction < 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    cfg = dataset.taxonomy.config
    known = tuple(range(cfg.num_known))
    novel = tuple(range(cfg.num_known, cfg.num_classes))
    rng = np.random.default_rng(seed)
    labeled, unlabeled = [], []
    for c in range(cfg.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < 2:
            raise ConfigError(f"class {c} has fewer than 2 samples")
        if c in known:
            take = int(labeled_fraction * idx.size)
            perm = rng.permutation(idx)
            labeled.extend(perm[:take])
            unlabeled.extend(perm[take:])
        else:
            unlabeled.extend(idx)
    return GcdSplit(labeled_idx=np.sort(np.asarray(labeled)),
                    unlabeled_idx=np.sort(np.asarray(unlabeled)),
                    known_classes=known, novel_classes=novel)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MANIFEST_VERSION = 1


def dataset_manifest(dataset: SyntheticDataset, split: GcdSplit | None,
                     split_seed: int | None = None) -> dict:
    tax = dataset.taxonomy
    m = {
        "version": _MANIFEST_VERSION,
        "config": asdict(tax.config),
        "taxonomy_seed": tax.seed,
        "dataset_seed": dataset.seed,
        "class_specs": [
            {"class_id": s.class_id, "shared": list(s.shared_ids),
             "discriminative": list(s.discriminative_ids)}
            for s in tax.specs
        ],
    }
    if split is not None:
        m["split"] = {
            "seed": split_seed,
            "labeled_fraction": tax.config.labeled_fraction,
            "known_classes": list(split.known_classes),
            "novel_classes": list(split.novel_classes),
        }
    return m


def save_dataset(dataset: SyntheticDataset, split: GcdSplit, out_dir: str | Path,
                 split_seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "tokens.npy", dataset.tokens)
    np.save(out / "labels.npy", dataset.labels)
    np.save(out / "regions.npy", dataset.regions)
    np.save(out / "labeled_idx.npy", split.labeled_idx)
    np.save(out / "unlabeled_idx.npy", split.unlabeled_idx)
    manifest = dataset_manifest(dataset, split, split_seed)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out / "manifest.json"


def regenerate_from_manifest(manifest: dict) -> tuple[SyntheticDataset, GcdSplit]:
    """Rebuild dataset and split purely from the manifest's config and seeds."""
    cfg = DataConfig(**manifest["config"])
    tax = make_taxonomy(cfg, manifest["taxonomy_seed"])
    got = [(s.class_id, list(s.shared_ids), list(s.discriminative_ids)) for s in tax.specs]
    want = [(s["class_id"], s["shared"], s["discriminative"]) for s in manifest["class_specs"]]
    if got != want:
        raise DataError("manifest class specs do not match regenerated taxonomy")
    dataset = generate_dataset(tax, manifest["dataset_seed"])
    split = make_gcd_split(dataset, cfg.labeled_fraction, manifest["split"]["seed"])
    return dataset, split


def load_dataset(dir_path: str | Path) -> tuple[SyntheticDataset, GcdSplit]:
    d = Path(dir_path)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = DataConfig(**manifest["config"])
    tax = make_taxonomy(cfg, manifest["taxonomy_seed"])
    dataset = SyntheticDataset(
        tokens=np.load(d / "tokens.npy"), labels=np.load(d / "labels.npy"),
        regions=np.load(d / "regions.npy"), taxonomy=tax,
        seed=manifest["dataset_seed"])
    split = GcdSplit(
        labeled_idx=np.load(d / "labeled_idx.npy"),
        unlabeled_idx=np.load(d / "unlabeled_idx.npy"),
        known_classes=tuple(manifest["split"]["known_classes"]),
        novel_classes=tuple(manifest["split"]["novel_classes"]))
    return dataset, split


def make_default_benchmark(seed: int, config: DataConfig | None = None,
                           ) -> tuple[SyntheticDataset, GcdSplit]:
    """Dataset + split from a single seed (taxonomy/data/split seeds derived)."""
    cfg = config or DataConfig()
    root = np.random.default_rng(seed)
    tax_seed, data_seed, split_seed = (int(s) for s in root.integers(0, 2**31, size=3))
    tax = make_taxonomy(cfg, tax_seed)
    dataset = generate_dataset(tax, data_seed)
    split = make_gcd_split(dataset, cfg.labeled_fraction, split_seed)
    return dataset, split

"""Evaluation stack: Hungarian matching, semi-supervised k-means protocol,
accuracy metrics, category-count estimation, and spectral diagnostics."""

import itertools
import warnings

import numpy as np
import pytest

from slotgcd import evalstack
from slotgcd.errors import ConfigError, ShapeError


def brute_force_min(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


def test_hungarian_matches_brute_force_small():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cost = rng.normal(size=(5, 5))
        perm, total = evalstack.hungarian(cost)
        assert sorted(perm) == list(range(5))
        assert total == pytest.approx(brute_force_min(cost), abs=1e-10)


def test_hungarian_rectangular_padding():
    cost = np.array([[1.0, 9.0, 2.0], [9.0, 1.0, 9.0]])
    perm, total = evalstack.hungarian(cost)
    assert total == pytest.approx(2.0)
    assert set(perm) <= {0, 1, 2}


def test_hungarian_input_validation():
    with pytest.raises(ConfigError):
        evalstack.hungarian(np.ones(3))
    with pytest.raises(ConfigError):
        evalstack.hungarian(np.array([[np.inf, 1.0], [1.0, 0.0]]))


# ---------------------------------------------------------------------------
# clustering accuracy
# ---------------------------------------------------------------------------


def test_cluster_acc_contingency_example():
    # clusters: [0,0,0,1,1,2]; truth: [0,0,1,1,1,2]
    # best mapping 0->0, 1->1, 2->2: 5/6 correct overall
    assignments = np.array([0, 0, 0, 1, 1, 2])
    truth = np.array([0, 0, 1, 1, 1, 2])
    rep = evalstack.cluster_acc(assignments, truth, known_set={0, 1})
    assert rep.acc_all == pytest.approx(100 * 5 / 6)
    assert rep.acc_known == pytest.approx(100 * 4 / 5)
    assert rep.acc_novel == pytest.approx(100.0)
    assert rep.mapping == {0: 0, 1: 1, 2: 2}


def test_cluster_acc_permutation_invariance():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 6, size=120)
    assignments = rng.integers(0, 6, size=120)
    base = evalstack.cluster_acc(assignments, truth, known_set={0, 1, 2})
    for _ in range(100):
        relabel = rng.permutation(6)
        rep = evalstack.cluster_acc(relabel[assignments], truth,
                                    known_set={0, 1, 2})
        assert rep.acc_all == pytest.approx(base.acc_all)
        assert rep.acc_known == pytest.approx(base.acc_known)
        assert rep.acc_novel == pytest.approx(base.acc_novel)


def test_cluster_acc_shape_mismatch():
    with pytest.raises(ShapeError):
        evalstack.cluster_acc(np.zeros(3), np.zeros(4), known_set={0})


# ---------------------------------------------------------------------------
# semi-supervised k-means
# ---------------------------------------------------------------------------


def blobs(k, per, d=4, seed=0, spread=8.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(k, d))
    x = np.concatenate([centers[i] + rng.normal(size=(per, d)) for i in range(k)])
    y = np.repeat(np.arange(k), per)
    return x, y


def test_ssk_means_pins_labeled_samples():
    x, y = blobs(4, 30, seed=2)
    rng = np.random.default_rng(3)
    labeled = np.sort(rng.choice(len(x), size=40, replace=False))
    res = evalstack.ssk_means(x, labeled, y[labeled], k=4, seed=0)
    want = [res.class_to_cluster[int(c)] for c in y[labeled]]
    np.testing.assert_array_equal(res.assignments[labeled], want)


def test_ssk_means_objective_monotone():
    x, y = blobs(5, 25, seed=4)
    labeled = np.arange(0, len(x), 5)
    res = evalstack.ssk_means(x, labeled, y[labeled], k=5, seed=1)
    obj = np.asarray(res.objective)
    assert np.all(np.diff(obj) <= 1e-9)


def test_ssk_means_recovers_separated_blobs():
    x, y = blobs(4, 40, seed=5)
    labeled = np.arange(0, len(x), 4)
    res = evalstack.ssk_means(x, labeled, y[labeled], k=4, seed=2)
    rep = evalstack.cluster_acc(res.assignments, y, known_set=set(range(4)))
    assert rep.acc_all > 99.0


def test_ssk_means_k_below_classes_raises():
    x, y = blobs(3, 10, seed=6)
    with pytest.raises(ConfigError):
        evalstack.ssk_means(x, np.arange(30), y, k=2, seed=0)


def test_ssk_means_balanced_penalty_runs():
    x, y = blobs(3, 20, seed=7)
    labeled = np.arange(0, 60, 3)
    res = evalstack.ssk_means(x, labeled, y[labeled], k=3, seed=0, gamma=0.5)
    assert set(res.assignments) == {0, 1, 2}


# ---------------------------------------------------------------------------
# category-count estimation
# ---------------------------------------------------------------------------


def test_estimation_error_spot_checks():
    assert evalstack.estimation_error(100, 109) == pytest.approx(9.0)
    assert evalstack.estimation_error(100, 100) == 0.0
    assert evalstack.estimation_error(5, 4) == pytest.approx(20.0)
    assert evalstack.estimation_error(10, 13) == pytest.approx(30.0)


def test_estimate_k_finds_six_blobs_all_seeds():
    x, y = blobs(6, 30, seed=8, spread=10.0)
    lidx = np.arange(0, len(x), 4)   # labeled anchors span all 6 classes
    for seed in range(5):
        k_hat, err = evalstack.estimate_k(x, lidx, y[lidx], range(2, 13),
                                          seed=seed, true_k=6)
        assert k_hat == 6, f"seed {seed} -> {k_hat}"
        assert err == 0.0


def test_estimate_k_needs_candidates():
    with pytest.raises(ConfigError):
        evalstack.estimate_k(np.zeros((4, 2)), np.arange(2), np.zeros(2), [3],
                             seed=0)


# ---------------------------------------------------------------------------
# spectral diagnostics
# ---------------------------------------------------------------------------


def test_vne_rank_one_is_zero():
    z = np.tile(np.array([1.0, 0.0, 0.0]), (20, 1))
    rep = evalstack.vne(z)
    assert rep.entropy == pytest.approx(0.0, abs=1e-12)
    assert rep.rank99 == 1


def test_vne_isotropic_is_log_d():
    d = 6
    z = np.tile(np.eye(d), (5, 1))
    rep = evalstack.vne(z)
    assert rep.entropy == pytest.approx(np.log(d), abs=1e-6)
    assert rep.rank99 == d


def test_vne_closed_form_spectrum():
    # 7 + 2 + 1 unit rows on distinct axes -> eigenvalues (0.7, 0.2, 0.1)
    rows = [0] * 7 + [1] * 2 + [2]
    z = np.eye(3)[rows]
    rep = evalstack.vne(z)
    want = -(0.7 * np.log(0.7) + 0.2 * np.log(0.2) + 0.1 * np.log(0.1))
    assert rep.entropy == pytest.approx(want, abs=1e-12)
    assert rep.entropy == pytest.approx(0.8018, abs=5e-4)
    assert rep.rank99 == 3


def test_vne_rank99_boundary():
    # 0.991 alone covers 99% of the energy; 0.985 does not
    rep = evalstack.vne(np.eye(2)[[0] * 991 + [1] * 9])
    assert rep.rank99 == 1
    rep = evalstack.vne(np.eye(2)[[0] * 985 + [1] * 15])
    assert rep.rank99 == 2


def test_vne_requires_unit_rows():
    with pytest.raises(ValueError):
        evalstack.vne(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        evalstack.vne(np.ones(3))


# ---------------------------------------------------------------------------
# mask quality
# ---------------------------------------------------------------------------


def test_mask_ari_perfect_and_random():
    rng = np.random.default_rng(9)
    oracle = rng.integers(0, 4, size=(10, 64))
    # soft masks that argmax to the oracle labels exactly
    soft = np.eye(4)[oracle].transpose(0, 2, 1) * 0.9 + 0.025
    assert evalstack.mask_ari(soft, oracle) == pytest.approx(1.0)
    # label permutation leaves ARI at 1 (partition metric)
    assert evalstack.mask_ari((oracle + 1) % 4, oracle) == pytest.approx(1.0)
    noise = rng.integers(0, 4, size=(10, 64))
    assert abs(evalstack.mask_ari(noise, oracle)) < 0.2


def test_mask_ari_shape_mismatch():
    with pytest.raises(ShapeError):
        evalstack.mask_ari(np.zeros((2, 3, 8)), np.zeros((2, 9)))

"""Synthetic benchmark generator: determinism, taxonomy structure, oracle
regions, split protocol, and manifest round-trips."""

import numpy as np
import pytest

from slotgcd import data as data_mod
from slotgcd.errors import ConfigError, DataError


def tiny_config(**kw):
    base = dict(samples_per_class=6)
    base.update(kw)
    return data_mod.DataConfig(**base)


@pytest.fixture(scope="module")
def bench():
    return data_mod.make_default_benchmark(0, tiny_config())


def test_generation_is_deterministic():
    a, sa = data_mod.make_default_benchmark(3, tiny_config())
    b, sb = data_mod.make_default_benchmark(3, tiny_config())
    np.testing.assert_array_equal(a.tokens, b.tokens)
    np.testing.assert_array_equal(a.regions, b.regions)
    np.testing.assert_array_equal(sa.labeled_idx, sb.labeled_idx)
    c, _ = data_mod.make_default_benchmark(4, tiny_config())
    assert not np.array_equal(a.tokens, c.tokens)


def test_shapes_and_labels(bench):
    ds, _ = bench
    cfg = ds.taxonomy.config
    n = cfg.num_classes * cfg.samples_per_class
    assert ds.tokens.shape == (n, cfg.n_tokens, cfg.feature_dim)
    assert ds.regions.shape == (n, cfg.n_tokens)
    counts = np.bincount(ds.labels)
    np.testing.assert_array_equal(counts, np.full(cfg.num_classes,
                                                  cfg.samples_per_class))


def test_taxonomy_structure(bench):
    ds, _ = bench
    tax = ds.taxonomy
    cfg = tax.config
    shared = tuple(range(cfg.shared_count))
    seen = set()
    for spec in tax.specs:
        assert spec.shared_ids == shared
        assert len(spec.discriminative_ids) == cfg.discriminative_count
        assert min(spec.discriminative_ids) >= cfg.shared_count
        assert spec.discriminative_ids not in seen   # classes stay distinct
        seen.add(spec.discriminative_ids)


def test_regions_cover_exactly_the_class_primitives(bench):
    ds, _ = bench
    for i in range(len(ds)):
        spec = ds.taxonomy.specs[ds.labels[i]]
        assert set(ds.regions[i]) == set(spec.primitive_ids)


def test_nearest_signature_recovers_regions(bench):
    # noise is bounded away from half the signature separation, so nearest
    # neighbor against the vocabulary must match the oracle regions
    ds, _ = bench
    sig = ds.taxonomy.vocab.signatures
    d2 = ((ds.tokens[:, :, None, :] - sig[None, None]) ** 2).sum(-1)
    nearest = d2.argmin(axis=-1)
    acc = (nearest == ds.regions).mean()
    assert acc > 0.999


def test_region_means_concentrate_on_signatures(bench):
    # token noise averages out at the 3 sigma / sqrt(n) scale per region
    ds, _ = bench
    sig = ds.taxonomy.vocab.signatures
    scale = ds.taxonomy.vocab.noise_scale
    for i in range(0, len(ds), 7):
        for pid in np.unique(ds.regions[i]):
            sel = ds.tokens[i][ds.regions[i] == pid]
            dev = np.abs(sel.mean(axis=0) - sig[pid]).max()
            assert dev <= 3.0 * scale / np.sqrt(sel.shape[0]) + 1e-9 or \
                dev <= 3.0 * scale


def test_signature_separation_invariant(bench):
    ds, _ = bench
    vocab = ds.taxonomy.vocab
    d = data_mod._min_pairwise_distance(vocab.signatures)
    assert d > 3.0 * vocab.noise_scale


def test_split_partitions_dataset(bench):
    ds, split = bench
    cfg = ds.taxonomy.config
    both = np.concatenate([split.labeled_idx, split.unlabeled_idx])
    np.testing.assert_array_equal(np.sort(both), np.arange(len(ds)))
    # labeled samples come from known classes only, at the configured fraction
    assert set(ds.labels[split.labeled_idx]) <= set(split.known_classes)
    per_class = int(cfg.labeled_fraction * cfg.samples_per_class)
    for c in split.known_classes:
        assert (ds.labels[split.labeled_idx] == c).sum() == per_class
    assert split.known_classes == tuple(range(cfg.num_known))
    assert split.novel_classes == tuple(range(cfg.num_known, cfg.num_classes))


def test_save_load_roundtrip(tmp_path, bench):
    ds, split = bench
    data_mod.save_dataset(ds, split, tmp_path, split_seed=0)
    ds2, split2 = data_mod.load_dataset(tmp_path)
    np.testing.assert_array_equal(ds.tokens, ds2.tokens)
    np.testing.assert_array_equal(ds.regions, ds2.regions)
    np.testing.assert_array_equal(split.labeled_idx, split2.labeled_idx)
    assert split.known_classes == split2.known_classes


def test_regenerate_from_manifest_is_byte_identical(bench):
    ds, split = bench
    manifest = data_mod.dataset_manifest(ds, split, split_seed=1)
    # split seed in the manifest drives regeneration, so use the real one
    tax = data_mod.make_taxonomy(ds.taxonomy.config, ds.taxonomy.seed)
    regen = data_mod.generate_dataset(tax, ds.seed)
    np.testing.assert_array_equal(ds.tokens, regen.tokens)
    np.testing.assert_array_equal(ds.regions, regen.regions)
    # tampered manifests are rejected
    manifest["class_specs"][0]["discriminative"] = [99, 98, 97, 96, 95]
    with pytest.raises(DataError):
        data_mod.regenerate_from_manifest(manifest)


def test_config_validation():
    with pytest.raises(ConfigError):
        data_mod.make_taxonomy(tiny_config(vocab_size=3, shared_count=3), 0)
    with pytest.raises(ConfigError):
        # 4 non-shared primitives choose 4 gives one combo for 10 classes
        data_mod.make_taxonomy(tiny_config(vocab_size=7, discriminative_count=4), 0)
    with pytest.raises(ConfigError):
        data_mod.generate_sample(
            data_mod.make_taxonomy(tiny_config(), 0).specs[0],
            data_mod.make_taxonomy(tiny_config(), 0).vocab, n_tokens=60, seed=0)
    ds, _ = data_mod.make_default_benchmark(0, tiny_config())
    with pytest.raises(ConfigError):
        data_mod.make_gcd_split(ds, labeled_fraction=1.0, seed=0)


def test_coarse_preset():
    cfg = data_mod.coarse_preset(samples_per_class=4)
    assert cfg.num_known == 8 and cfg.num_novel == 2
    assert cfg.samples_per_class == 4

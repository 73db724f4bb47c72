"""Pipeline orchestration: config syncing, variant flags, CSV emission, and a
tiny end-to-end run shared across checks."""

import copy

import numpy as np
import pytest

from slotgcd import consensus as cns
from slotgcd import evalstack
from slotgcd import pipeline as pl
from slotgcd.errors import ConfigError


def tiny_config():
    cfg = pl.ExperimentConfig()
    cfg.data.samples_per_class = 6
    cfg.encoder.n_blocks = 3
    cfg.encoder.ffn_hidden = 16
    cfg.encoder.tap_block = 0
    cfg.pretrain.epochs = 1
    cfg.slots.num_slots = 4
    cfg.slots.slot_dim = 8
    cfg.slots.iterations = 2
    cfg.slots.hidden_dim = 8
    cfg.slots.epochs = 1
    cfg.slots.restarts = 2
    cfg.gcd.epochs = 1
    cfg.gcd.batch_size = 30
    cfg.gcd.consensus = cns.ConsensusConfig(hidden_dim=8, num_contextual=1)
    return cfg.sync()


@pytest.fixture(scope="module")
def prep():
    return pl.prepare_stages(tiny_config(), seed=0)


def test_config_sync_propagates_dimensions():
    cfg = tiny_config()
    assert cfg.slots.feature_dim == cfg.encoder.feature_dim
    assert cfg.slots.n_tokens == cfg.data.n_tokens
    assert cfg.gcd.consensus.num_dominant == cfg.slots.num_slots
    cfg.slots.num_slots = 6
    cfg.sync()
    assert cfg.gcd.consensus.num_dominant == 6


def test_fast_config_preset():
    cfg = pl.fast_config()
    assert cfg.data.samples_per_class == 64
    assert cfg.gcd.consensus.num_dominant == cfg.slots.num_slots == 8


def test_variant_consensus_flags():
    base = cns.ConsensusConfig()
    assert pl.variant_consensus("baseline", base) is None
    assert pl.variant_consensus("conventional-moe", base).conventional_moe
    assert pl.variant_consensus("no-dominant", base).no_dominant
    assert pl.variant_consensus("no-contextual", base).no_contextual
    assert pl.variant_consensus("no-scheduler", base).no_scheduler
    full = pl.variant_consensus("full", base)
    assert not (full.conventional_moe or full.no_dominant or full.no_contextual
                or full.no_scheduler)
    with pytest.raises(ConfigError):
        pl.variant_consensus("bogus", base)


def test_prepare_stages_artifacts(prep):
    cfg = tiny_config()
    n = cfg.data.num_classes * cfg.data.samples_per_class
    assert len(prep.dataset) == n
    assert prep.slot_features.shape == (n, cfg.data.n_tokens,
                                        cfg.encoder.feature_dim)
    assert len(prep.slot_module.curve) == cfg.slots.epochs


@pytest.mark.parametrize("variant", pl.VARIANTS)
def test_run_stage_b_variants(prep, variant):
    res = pl.run_stage_b(prep, tiny_config(), variant)
    assert res.variant == variant
    assert 0.0 <= res.report.acc_all <= 100.0
    assert res.spectral.rank99 >= 1
    assert -1.0 <= res.mask_ari <= 1.0
    assert len(res.gcd_curve) == 1


def test_run_stage_b_estimates_categories(prep):
    res = pl.run_stage_b(prep, tiny_config(), "baseline",
                         estimate_categories=True, k_range=range(5, 13))
    assert res.k_hat in range(5, 13)
    assert res.err_pct is not None


def test_clone_model_is_independent(prep):
    clone = pl.clone_model(prep.encoder)
    clone.params["embed_w"].data += 1.0
    assert not np.array_equal(clone.params["embed_w"].data,
                              prep.encoder.params["embed_w"].data)


def test_report_row_and_csv(tmp_path):
    report = evalstack.ClusterReport(assignments=np.zeros(2), acc_all=50.0,
                                     acc_known=75.0, acc_novel=25.0, mapping={})
    spectral = evalstack.SpectralReport(entropy=1.25, rank99=3,
                                        eigenvalues=np.array([1.0]))
    res = pl.RunResult(variant="full", seed=1, model=None, report=report,
                       spectral=spectral, mask_ari=0.5, gcd_curve=[],
                       slot_curve=[], k_hat=10, err_pct=0.0)
    row = pl.report_row(res, "r0")
    assert row[0] == "r0" and row[2] == "full"
    path = pl.write_report_csv(tmp_path / "r.csv", [row])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == pl.REPORT_COLUMNS
    assert len(lines) == 2
    # identical rows produce identical bytes
    again = pl.write_report_csv(tmp_path / "r2.csv", [row])
    assert path.read_bytes() == again.read_bytes()


def test_curve_csv_format(tmp_path):
    path = pl.write_curve_csv(tmp_path / "c.csv", "loss", [1.5, 1.0])
    assert path.read_text() == "epoch,loss\n0,1.5\n1,1.0\n"


def test_manifest_references_outputs(tmp_path):
    path = pl.write_manifest(tmp_path / "m.json", "cmd", {"a": 1}, [0],
                             ["x.csv"], {"t": 1.0})
    import json
    manifest = json.loads(path.read_text())
    assert manifest["outputs"] == ["x.csv"]
    assert manifest["seeds"] == [0] and manifest["config"] == {"a": 1}


def test_sweep_slot_counts_serial():
    cfg = tiny_config()
    rows = pl.sweep_slot_counts(cfg, [2, 4], seed=0, workers=1)
    assert [r["k"] for r in rows] == [2, 4]
    for r in rows:
        assert 0.0 <= r["acc_all"] <= 100.0

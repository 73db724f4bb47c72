"""Checkpoint round-trips for models, slot modules, and training states."""

import json

import numpy as np
import pytest

from slotgcd import checkpoint as ckpt
from slotgcd import consensus as cns
from slotgcd import model as model_mod
from slotgcd import slots as slot_mod
from slotgcd.autodiff import AdamState, Tensor
from slotgcd.errors import DataError

ENC = model_mod.EncoderConfig(n_blocks=3, ffn_hidden=12, tap_block=0)


def full_model():
    model = model_mod.EncoderModel(params=model_mod.init_encoder_params(ENC, 0),
                                   config=ENC)
    ccfg = cns.ConsensusConfig(num_dominant=2, num_contextual=1,
                               feature_dim=ENC.feature_dim, hidden_dim=8)
    scfg = slot_mod.SlotConfig(num_slots=2, slot_dim=6,
                               feature_dim=ENC.feature_dim,
                               n_tokens=ENC.n_tokens, iterations=2, hidden_dim=8)
    module = slot_mod.SlotModule(params=slot_mod.init_slot_params(scfg, 1),
                                 config=scfg, curve=[2.0, 1.0])
    model_mod.install_consensus(model, ccfg, module, seed=2)
    model.head_params = {"cls_w": Tensor(np.ones((16, 5)), requires_grad=True),
                         "cls_b": Tensor(np.zeros(5), requires_grad=True)}
    return model


def assert_params_equal(a, b):
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_model_roundtrip(tmp_path):
    model = full_model()
    ckpt.save_model(tmp_path / "m", model, seed=3, extra_meta={"note": "x"})
    loaded = ckpt.load_model(tmp_path / "m")
    assert_params_equal(model.params, loaded.params)
    assert loaded.config == model.config
    assert set(loaded.consensus_params) == set(model.consensus_params)
    for i in model.consensus_params:
        assert_params_equal(model.consensus_params[i], loaded.consensus_params[i])
    assert loaded.consensus_config == model.consensus_config
    assert_params_equal(model.head_params, loaded.head_params)
    assert loaded.slot_module.config == model.slot_module.config
    assert loaded.slot_module.curve == [2.0, 1.0]
    assert_params_equal(model.slot_module.params, loaded.slot_module.params)
    assert all(p.requires_grad for p in loaded.params.values())


def test_plain_model_roundtrip(tmp_path):
    model = model_mod.EncoderModel(params=model_mod.init_encoder_params(ENC, 5),
                                   config=ENC)
    ckpt.save_model(tmp_path / "m", model)
    loaded = ckpt.load_model(tmp_path / "m")
    assert_params_equal(model.params, loaded.params)
    assert loaded.slot_module is None and not loaded.consensus_params


def test_slot_module_roundtrip(tmp_path):
    scfg = slot_mod.SlotConfig(num_slots=3, slot_dim=4, feature_dim=16,
                               n_tokens=64, iterations=2, hidden_dim=8)
    module = slot_mod.SlotModule(params=slot_mod.init_slot_params(scfg, 7),
                                 config=scfg, curve=[1.5])
    ckpt.save_slot_module(tmp_path / "s", module, seed=9)
    loaded = ckpt.load_slot_module(tmp_path / "s")
    assert_params_equal(module.params, loaded.params)
    assert loaded.config == scfg and loaded.curve == [1.5]


def test_train_state_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
              "b": Tensor(np.zeros(2), requires_grad=True)}
    opt = AdamState(lr=0.01, step=5,
                    m={"w": rng.normal(size=(3, 2)), "b": np.zeros(2)},
                    v={"w": np.abs(rng.normal(size=(3, 2))), "b": np.zeros(2)})
    gen = np.random.default_rng(42)
    gen.normal(size=100)   # advance the stream
    state = {"epoch": 4, "params": params, "opt": opt, "curve": [3.0, 2.5],
             "rng_state": gen.bit_generator.state}
    ckpt.save_train_state(tmp_path / "t", state, meta={"stage": "slots"})
    loaded = ckpt.load_train_state(tmp_path / "t")
    assert loaded["epoch"] == 4 and loaded["curve"] == [3.0, 2.5]
    assert loaded["meta"] == {"stage": "slots"}
    assert loaded["opt"].step == 5 and loaded["opt"].lr == 0.01
    assert_params_equal(params, loaded["params"])
    np.testing.assert_array_equal(opt.m["w"], loaded["opt"].m["w"])
    np.testing.assert_array_equal(opt.v["w"], loaded["opt"].v["w"])
    # the restored stream continues exactly where the original one left off
    restored = np.random.default_rng(0)
    restored.bit_generator.state = loaded["rng_state"]
    np.testing.assert_array_equal(gen.normal(size=5), restored.normal(size=5))


def test_missing_and_bad_version_errors(tmp_path):
    with pytest.raises(DataError):
        ckpt.load_model(tmp_path / "nope")
    with pytest.raises(DataError):
        ckpt.load_slot_module(tmp_path / "nope")
    with pytest.raises(DataError):
        ckpt.load_train_state(tmp_path / "nope")
    model = model_mod.EncoderModel(params=model_mod.init_encoder_params(ENC, 0),
                                   config=ENC)
    ckpt.save_model(tmp_path / "m", model)
    meta = json.loads((tmp_path / "m.json").read_text())
    meta["version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(meta))
    with pytest.raises(DataError):
        ckpt.load_model(tmp_path / "m")

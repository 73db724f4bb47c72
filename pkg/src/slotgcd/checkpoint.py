"""Versioned checkpoint files: one .npz of named arrays plus a JSON sidecar
with configs, seeds, and training curves."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import consensus as cns
from . import model as model_mod
from . import slots as slot_mod
from .autodiff import Tensor
from .errors import DataError

FORMAT_VERSION = 1


def _pack(params: dict[str, Tensor], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": p.data for k, p in params.items()}


def _unpack(arrays, prefix: str) -> dict[str, Tensor]:
    out = {}
    for k in arrays.files:
        if k.startswith(prefix):
            out[k[len(prefix):]] = Tensor(arrays[k], requires_grad=True)
    return out


def save_model(path: str | Path, model: model_mod.EncoderModel,
               seed: int | None = None, extra_meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _pack(model.params, "enc.")
    for i, p in model.consensus_params.items():
        arrays.update(_pack(p, f"cons{i}."))
    arrays.update(_pack(model.head_params, "head."))
    meta = {
        "version": FORMAT_VERSION,
        "seed": seed,
        "encoder_config": asdict(model.config),
        "consensus_blocks": sorted(model.consensus_params),
        "consensus_config": asdict(model.consensus_config)
        if model.consensus_config else None,
    }
    if model.slot_module is not None:
        arrays.update(_pack(model.slot_module.params, "slot."))
        meta["slot_config"] = asdict(model.slot_module.config)
        meta["slot_curve"] = model.slot_module.curve
    if extra_meta:
        meta.update(extra_meta)
    np.savez(path.with_suffix(".npz"), **arrays)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_model(path: str | Path) -> model_mod.EncoderModel:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    npz_path = path.with_suffix(".npz")
    if not npz_path.exists() or not meta_path.exists():
        raise DataError(f"checkpoint not found: {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    arrays = np.load(npz_path)
    model = model_mod.EncoderModel(
        params=_unpack(arrays, "enc."),
        config=model_mod.EncoderConfig(**meta["encoder_config"]))
    if meta.get("consensus_config"):
        model.consensus_config = cns.ConsensusConfig(**meta["consensus_config"])
        model.consensus_params = {
            i: _unpack(arrays, f"cons{i}.") for i in meta["consensus_blocks"]}
    model.head_params = _unpack(arrays, "head.")
    if meta.get("slot_config"):
        model.slot_module = slot_mod.SlotModule(
            params=_unpack(arrays, "slot."),
            config=slot_mod.SlotConfig(**meta["slot_config"]),
            curve=list(meta.get("slot_curve", [])))
    return model


def save_train_state(path: str | Path, state: dict,
                     meta: dict | None = None) -> Path:
    """Persist a mid-training snapshot (params, Adam moments, RNG stream).

    ``state`` is the dict handed to a training loop's ``snapshot`` callback;
    feeding the loaded result back through ``resume`` continues the run on
    the exact uninterrupted trajectory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = state["opt"]
    arrays = _pack(state["params"], "p.")
    arrays.update({f"m.{k}": v for k, v in opt.m.items()})
    arrays.update({f"v.{k}": v for k, v in opt.v.items()})
    np.savez(path.with_suffix(".npz"), **arrays)
    meta_out = {
        "version": FORMAT_VERSION,
        "epoch": state["epoch"],
        "curve": [float(x) for x in state["curve"]],
        "rng_state": state["rng_state"],
        "opt": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                "eps": opt.eps, "step": opt.step},
    }
    if meta:
        meta_out["meta"] = meta
    path.with_suffix(".json").write_text(json.dumps(meta_out, indent=2,
                                                    sort_keys=True, default=int))
    return path.with_suffix(".npz")


def load_train_state(path: str | Path) -> dict:
    path = Path(path)
    if not path.with_suffix(".npz").exists() or not path.with_suffix(".json").exists():
        raise DataError(f"train state not found: {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported train state version {meta.get('version')}")
    arrays = np.load(path.with_suffix(".npz"))
    from .autodiff import AdamState
    opt = AdamState(**{k: meta["opt"][k] for k in
                       ("lr", "beta1", "beta2", "eps", "step")})
    for k in arrays.files:
        if k.startswith("m."):
            opt.m[k[2:]] = arrays[k].copy()
        elif k.startswith("v."):
            opt.v[k[2:]] = arrays[k].copy()
    return {
        "epoch": meta["epoch"],
        "curve": list(meta["curve"]),
        "rng_state": meta["rng_state"],
        "opt": opt,
        "params": _unpack(arrays, "p."),
        "meta": meta.get("meta", {}),
    }


def save_slot_module(path: str | Path, module: slot_mod.SlotModule,
                     seed: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **_pack(module.params, "slot."))
    meta = {"version": FORMAT_VERSION, "seed": seed,
            "slot_config": asdict(module.config), "slot_curve": module.curve}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_slot_module(path: str | Path) -> slot_mod.SlotModule:
    path = Path(path)
    if not path.with_suffix(".npz").exists():
        raise DataError(f"slot checkpoint not found: {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    arrays = np.load(path.with_suffix(".npz"))
    return slot_mod.SlotModule(params=_unpack(arrays, "slot."),
                               config=slot_mod.SlotConfig(**meta["slot_config"]),
                               curve=list(meta.get("slot_curve", [])))

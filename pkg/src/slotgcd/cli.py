"""Command-line front end: dataset generation, staged training, evaluation,
and analysis/plot emission.

Every command writes a ``run_manifest.json`` into its output directory
recording the resolved configuration, seeds, emitted files, and timings;
``slotgcd rerun <manifest>`` replays the recorded command and reproduces
the same CSVs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 data/checkpoint error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import consensus as cns
from . import data as data_mod
from . import evalstack
from . import model as model_mod
from . import pipeline as pl
from . import plots
from . import slots as slot_mod
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4

OUT_ROOT_ENV = "SLOTGCD_OUT_ROOT"

_EPILOG = f"""\
report CSV columns: {", ".join(pl.REPORT_COLUMNS)}
curve CSV columns: epoch, <loss name>
sweep CSV columns: k, seed, acc_all, acc_known, acc_novel, mask_ari
output paths resolve relative to ${OUT_ROOT_ENV} when it is set
"""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def resolve_out(path: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key = value lines, # comments, dotted keys into the experiment config."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{p}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(current, value: str):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(cfg: pl.ExperimentConfig, overrides: dict[str, str]) -> None:
    """Set dotted-path keys (e.g. ``slots.epochs``) on the experiment config."""
    for key, value in overrides.items():
        parts = key.split(".")
        obj = cfg
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(obj, part)
            if obj is None:
                raise ConfigError(f"config key {key!r} reaches a disabled section")
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(obj, leaf, _coerce(getattr(obj, leaf), value))
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e
    cfg.sync()


def build_config(args) -> pl.ExperimentConfig:
    preset = getattr(args, "preset", "default")
    cfg = pl.fast_config() if preset == "fast" else pl.ExperimentConfig()
    if getattr(args, "config", None):
        apply_overrides(cfg, parse_config_file(args.config))
    flag_map = {
        "known": "data.num_known", "novel": "data.num_novel",
        "shared": "data.shared_count", "samples_per_class": "data.samples_per_class",
        "epochs": None,  # stage-specific, handled by cmd_train
    }
    overrides = {}
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if key and val is not None:
            overrides[key] = str(val)
    if getattr(args, "classes", None) is not None:
        # total class count, split evenly with the odd one going to known
        total = args.classes
        if total < 2:
            raise ConfigError("--classes needs at least 2 classes")
        overrides["data.num_known"] = str((total + 1) // 2)
        overrides["data.num_novel"] = str(total // 2)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def write_run_manifest(out: Path, argv: list[str], cfg, seeds: list[int],
                       outputs: list[Path], timings: dict[str, float]) -> Path:
    config = asdict(cfg) if not isinstance(cfg, dict) else cfg
    return pl.write_manifest(out / "run_manifest.json", json.dumps(argv), config,
                             seeds, [str(p.name) for p in outputs], timings)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, argv: list[str]) -> int:
    out = resolve_out(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    cfg = build_config(args)
    t0 = time.perf_counter()
    dataset, split = data_mod.make_default_benchmark(args.seed, cfg.data)
    manifest_path = data_mod.save_dataset(dataset, split, out, split_seed=args.seed)
    outputs = sorted(out.glob("*.npy")) + [manifest_path]
    write_run_manifest(out, argv, cfg, [args.seed], outputs,
                       {"gen": time.perf_counter() - t0})
    print(f"wrote {len(dataset)} samples, {cfg.data.num_classes} classes -> {out}")
    return EXIT_OK


def _stage_seeds(seed: int) -> tuple[int, int, int]:
    # must match prepare_stages so CLI checkpoints equal pipeline results
    root = np.random.default_rng(seed + 1)
    pre = int(root.integers(2**31))
    slots = int(root.integers(2**31))
    return pre, slots, seed + 17


def _load_encoder(out: Path) -> model_mod.EncoderModel:
    return ckpt.load_model(out / "encoder")


def _snapshot_writer(path: Path, every: int):
    if every <= 0:
        return None

    def write(state):
        if state["epoch"] % every == 0:
            ckpt.save_train_state(path, state)
    return write


def _install_gcd_state(model: model_mod.EncoderModel, gcd_cfg,
                       params: dict[str, Tensor]) -> None:
    """Push checkpointed stage-B trainables back into a fresh model."""
    if gcd_cfg.consensus is not None:
        model_mod.install_consensus(model, gcd_cfg.consensus, model.slot_module, 0)
    head = {}
    for name, t in params.items():
        if name.startswith("cons"):
            block, key = name[4:].split("_", 1)
            model.consensus_params[int(block)][key].data = t.data.copy()
        elif name.startswith("cls_"):
            head[name] = Tensor(t.data.copy(), requires_grad=True)
        elif name in model.params:
            model.params[name].data = t.data.copy()
        else:
            raise DataError(f"unexpected parameter {name!r} in training state")
    model.head_params = head


def cmd_train(args, argv: list[str]) -> int:
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = build_config(args)
    if args.epochs is not None:
        stage_cfg = {"pretrain": cfg.pretrain, "slots": cfg.slots, "gcd": cfg.gcd}
        stage_cfg[args.stage].epochs = args.epochs
    dataset, split = data_mod.load_dataset(resolve_out(args.data))
    pre_seed, slot_seed, gcd_seed = _stage_seeds(args.seed)
    state_path = out / f"{args.stage}_state"
    resume = None
    if args.resume:
        resume = ckpt.load_train_state(state_path)
        print(f"resuming {args.stage} from epoch {resume['epoch']}")
    snapshot = _snapshot_writer(state_path, args.snapshot_every)
    outputs = []
    t0 = time.perf_counter()

    if args.stage == "pretrain":
        model = model_mod.pretrain_encoder(dataset.tokens, cfg.encoder, cfg.pretrain,
                                           pre_seed, args.log_every,
                                           resume=resume, snapshot=snapshot)
        outputs.append(ckpt.save_model(out / "encoder", model, seed=args.seed))
        outputs.append(pl.write_curve_csv(out / "pretrain_curve.csv", "nce_loss",
                                          model.pretrain_curve))
    elif args.stage == "slots":
        enc = _load_encoder(out)
        feats = enc.slot_features(dataset.tokens)
        module = slot_mod.train_slot_module(feats, cfg.slots, slot_seed,
                                            args.log_every, resume=resume,
                                            snapshot=snapshot)
        outputs.append(ckpt.save_slot_module(out / "slots", module, seed=args.seed))
        outputs.append(pl.write_curve_csv(out / "slot_curve.csv", "recon_loss",
                                          module.curve))
    else:
        enc = _load_encoder(out)
        model = pl.clone_model(enc)
        slots_path = out / "slots"
        if slots_path.with_suffix(".npz").exists():
            model.slot_module = ckpt.load_slot_module(slots_path)
        gcd_cfg = copy.deepcopy(cfg.gcd)
        gcd_cfg.consensus = pl.variant_consensus(args.ablation,
                                                 cfg.gcd.consensus
                                                 or cns.ConsensusConfig())
        if resume is not None:
            _install_gcd_state(model, gcd_cfg, resume["params"])
        curve = model_mod.train_gcd(model, dataset.tokens, dataset.labels,
                                    split.labeled_idx, len(split.known_classes),
                                    gcd_cfg, seed=gcd_seed,
                                    log_every=args.log_every,
                                    resume=resume, snapshot=snapshot)
        outputs.append(ckpt.save_model(out / f"model_{args.ablation}", model,
                                       seed=args.seed,
                                       extra_meta={"variant": args.ablation,
                                                   "gcd_curve": curve}))
        outputs.append(pl.write_curve_csv(out / f"gcd_curve_{args.ablation}.csv",
                                          "gcd_loss", curve))

    write_run_manifest(out, argv, cfg, [args.seed], outputs,
                       {args.stage: time.perf_counter() - t0})
    print(f"stage {args.stage} done in {time.perf_counter() - t0:.1f}s -> {out}")
    return EXIT_OK


def _report_result(model, dataset, split, seed: int,
                   estimate: bool = False, k_range=None):
    emb = model_mod.embed(model, dataset.tokens)
    labeled_labels = dataset.labels[split.labeled_idx]
    num_classes = dataset.taxonomy.config.num_classes
    res = evalstack.ssk_means(emb, split.labeled_idx, labeled_labels,
                              k=num_classes, seed=seed + 23)
    report = evalstack.cluster_acc(res.assignments[split.unlabeled_idx],
                                   dataset.labels[split.unlabeled_idx],
                                   known_set=set(split.known_classes))
    spectral = evalstack.vne(emb[split.unlabeled_idx])
    ari = None
    if model.slot_module is not None:
        masks = model.slot_module.masks(model.slot_features(dataset.tokens))
        ari = evalstack.mask_ari(masks, dataset.regions)
    k_hat = err = None
    if estimate:
        k_range = k_range or range(2, 2 * num_classes + 1)
        k_hat, err = evalstack.estimate_k(emb, split.labeled_idx, labeled_labels,
                                          k_range, seed=seed + 29,
                                          true_k=num_classes)
    return report, spectral, ari, k_hat, err


def cmd_eval(args, argv: list[str]) -> int:
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ckpt.load_model(resolve_out(args.checkpoint))
    dataset, split = data_mod.load_dataset(resolve_out(args.data))
    t0 = time.perf_counter()
    report, spectral, ari, k_hat, err = _report_result(
        model, dataset, split, args.seed, estimate=args.estimate_k)
    run_id = Path(args.checkpoint).stem
    row = [pl._fmt(v) for v in [
        run_id, args.seed, run_id.removeprefix("model_"), report.acc_all,
        report.acc_known, report.acc_novel, k_hat, err, spectral.entropy,
        spectral.rank99, ari]]
    outputs = [pl.write_report_csv(out / "report.csv", [row])]
    write_run_manifest(out, argv, {"checkpoint": str(args.checkpoint),
                                   "data": str(args.data),
                                   "estimate_k": bool(args.estimate_k)},
                       [args.seed], outputs, {"eval": time.perf_counter() - t0})
    print(f"acc_all={report.acc_all:.1f} known={report.acc_known:.1f} "
          f"novel={report.acc_novel:.1f}"
          + (f" k_hat={k_hat} err%={err:.1f}" if k_hat is not None else ""))
    return EXIT_OK


def _parse_sweep(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1, 2))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --sweep-k value {text!r}: {e}") from e


def cmd_analyze(args, argv: list[str]) -> int:
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, split = data_mod.load_dataset(resolve_out(args.data))
    outputs = []
    timings = {}
    t0 = time.perf_counter()

    labels = []
    entropies = []
    ranks = []
    rows = []
    pairs = [("model", args.checkpoint)]
    if args.baseline:
        pairs.append(("baseline", args.baseline))
    for label, path in pairs:
        model = ckpt.load_model(resolve_out(path))
        report, spectral, ari, _, _ = _report_result(model, dataset, split,
                                                     args.seed)
        labels.append(label)
        entropies.append(spectral.entropy)
        ranks.append(spectral.rank99)
        rows.append([label, pl._fmt(spectral.entropy), pl._fmt(spectral.rank99),
                     pl._fmt(ari), pl._fmt(report.acc_all), pl._fmt(report.acc_novel)])

    import csv as csv_mod
    import io
    buf = io.StringIO()
    w = csv_mod.writer(buf, lineterminator="\n")
    w.writerow(["label", "entropy", "rank99", "mask_ari", "acc_all", "acc_novel"])
    w.writerows(rows)
    spectral_csv = out / "spectral.csv"
    spectral_csv.write_text(buf.getvalue())
    outputs.append(spectral_csv)
    outputs.append(plots.entropy_bars(out / "spectral.svg", labels,
                                      entropies, ranks))
    timings["spectral"] = time.perf_counter() - t0

    if args.sweep_k:
        t1 = time.perf_counter()
        cfg = build_config(args)
        sweep = pl.sweep_slot_counts(cfg, _parse_sweep(args.sweep_k), args.seed,
                                     workers=args.workers)
        buf = io.StringIO()
        w = csv_mod.writer(buf, lineterminator="\n")
        w.writerow(["k", "seed", "acc_all", "acc_known", "acc_novel", "mask_ari"])
        for r in sorted(sweep, key=lambda r: r["k"]):
            w.writerow([r["k"], r["seed"], pl._fmt(r["acc_all"]),
                        pl._fmt(r["acc_known"]), pl._fmt(r["acc_novel"]),
                        pl._fmt(r["mask_ari"])])
        sweep_csv = out / "ksweep.csv"
        sweep_csv.write_text(buf.getvalue())
        outputs.append(sweep_csv)
        outputs.append(plots.sweep_plot(out / "ksweep.svg", sweep))
        timings["sweep"] = time.perf_counter() - t1

    write_run_manifest(out, argv, {"checkpoint": str(args.checkpoint),
                                   "baseline": str(args.baseline or ""),
                                   "data": str(args.data),
                                   "sweep_k": args.sweep_k or ""},
                       [args.seed], outputs, timings)
    for label, h, r in zip(labels, entropies, ranks):
        print(f"{label}: entropy={h:.4f} rank99={r}")
    return EXIT_OK


def cmd_rerun(args, argv: list[str]) -> int:
    manifest_path = resolve_out(args.manifest)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    recorded = json.loads(manifest["command"])
    if args.out:
        if "--out" in recorded:
            recorded[recorded.index("--out") + 1] = args.out
        else:
            recorded += ["--out", args.out]
        if "--force" not in recorded and recorded[0] == "gen":
            recorded.append("--force")
    return main(recorded)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotgcd", epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key = value config file; flags override")
        if preset:
            p.add_argument("--preset", choices=["default", "fast"],
                           default="fast",
                           help="base hyperparameter preset (default: fast)")

    g = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, help="total class count, split evenly")
    g.add_argument("--known", type=int, help="known class count")
    g.add_argument("--novel", type=int, help="novel class count")
    g.add_argument("--shared", type=int, help="shared primitives per class")
    g.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    g.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one pipeline stage")
    t.add_argument("--stage", required=True, choices=["pretrain", "slots", "gcd"])
    t.add_argument("--data", required=True, help="dataset directory from gen")
    t.add_argument("--out", required=True, help="run directory (stages accumulate)")
    t.add_argument("--epochs", type=int, help="override the stage epoch count")
    t.add_argument("--ablation", default="full", choices=list(pl.VARIANTS),
                   help="stage-B architecture variant")
    t.add_argument("--resume", action="store_true",
                   help="continue from the stage's saved training state")
    t.add_argument("--snapshot-every", type=int, default=0,
                   help="save resumable training state every N epochs")
    t.add_argument("--log-every", type=int, default=0)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cluster and score a trained checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--estimate-k", dest="estimate_k", action="store_true",
                   help="also sweep k and report the estimated class count")
    common(e, preset=False)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="spectral diagnostics, mask ARI, plots")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--baseline", help="second checkpoint for paired comparison")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--sweep-k", dest="sweep_k",
                   help="slot counts, '2,4,8' or '2..12' (step 2)")
    a.add_argument("--workers", type=int, default=1,
                   help="parallel processes for the sweep")
    common(a)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("rerun", help="replay a recorded run manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="redirect outputs to a different directory")
    r.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericError) as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())

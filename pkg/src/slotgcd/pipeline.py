"""End-to-end orchestration: dataset -> pretrain -> slot stage -> GCD stage
-> evaluation, with per-variant ablations and CSV/manifest emission.

The heavy stages (pretraining and slot training) depend only on the seed and
the data/architecture configs, so one ``StagePrep`` can be shared across all
stage-B variants of the same seed.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import checkpoint, consensus as cns, data as data_mod
from . import evalstack, model as model_mod, slots as slot_mod
from .autodiff import Tensor
from .errors import ConfigError

VARIANTS = ("full", "conventional-moe", "no-dominant", "no-contextual",
            "no-scheduler", "baseline")

REPORT_COLUMNS = ["run_id", "seed", "variant", "acc_all", "acc_known", "acc_novel",
                  "k_hat", "err_pct", "entropy", "rank99", "mask_ari"]


@dataclass
class ExperimentConfig:
    data: data_mod.DataConfig = field(default_factory=data_mod.DataConfig)
    encoder: model_mod.EncoderConfig = field(default_factory=model_mod.EncoderConfig)
    pretrain: model_mod.PretrainConfig = field(default_factory=model_mod.PretrainConfig)
    slots: slot_mod.SlotConfig = field(default_factory=lambda: slot_mod.SlotConfig(epochs=60))
    gcd: model_mod.GcdTrainConfig = field(default_factory=model_mod.GcdTrainConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "ExperimentConfig":
        """Propagate shared dimensions; call again after field overrides."""
        if self.encoder.input_dim != self.data.feature_dim:
            self.encoder.input_dim = self.data.feature_dim
        if self.slots.feature_dim != self.encoder.feature_dim:
            self.slots.feature_dim = self.encoder.feature_dim
        if self.slots.n_tokens != self.data.n_tokens:
            self.slots.n_tokens = self.data.n_tokens
        if self.gcd.consensus is not None:
            self.gcd.consensus.num_dominant = self.slots.num_slots
            self.gcd.consensus.feature_dim = self.encoder.feature_dim
        return self


def fast_config() -> ExperimentConfig:
    """Desk-scale preset: small dataset and short schedules so a multi-seed
    ablation sweep finishes in minutes on one CPU core."""
    cfg = ExperimentConfig()
    cfg.data.samples_per_class = 64
    cfg.pretrain.epochs = 8
    cfg.slots.epochs = 60
    cfg.gcd.epochs = 10
    cfg.gcd.consensus = cns.ConsensusConfig(hidden_dim=32)
    return cfg.sync()


def variant_consensus(variant: str, base: cns.ConsensusConfig) -> cns.ConsensusConfig | None:
    """Map an ablation name to the stage-B architecture flags."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "baseline":
        return None
    cfg = copy.deepcopy(base)
    cfg.conventional_moe = variant == "conventional-moe"
    cfg.no_dominant = variant == "no-dominant"
    cfg.no_contextual = variant == "no-contextual"
    cfg.no_scheduler = variant == "no-scheduler"
    return cfg


@dataclass
class StagePrep:
    dataset: data_mod.SyntheticDataset
    split: data_mod.GcdSplit
    encoder: model_mod.EncoderModel
    slot_module: slot_mod.SlotModule
    slot_features: np.ndarray
    seed: int


def prepare_stages(cfg: ExperimentConfig, seed: int, log_every: int = 0) -> StagePrep:
    """Dataset, pretrained encoder, and stage-A slot module for one seed."""
    dataset, split = data_mod.make_default_benchmark(seed, cfg.data)
    root = np.random.default_rng(seed + 1)
    encoder = model_mod.pretrain_encoder(dataset.tokens, cfg.encoder, cfg.pretrain,
                                         int(root.integers(2**31)), log_every)
    feats = encoder.slot_features(dataset.tokens)
    slot_module = slot_mod.train_slot_module(feats, cfg.slots,
                                             int(root.integers(2**31)), log_every)
    return StagePrep(dataset=dataset, split=split, encoder=encoder,
                     slot_module=slot_module, slot_features=feats, seed=seed)


def clone_model(model: model_mod.EncoderModel) -> model_mod.EncoderModel:
    """Independent copy of the encoder weights (consensus/head not carried)."""
    params = {k: Tensor(p.data.copy(), requires_grad=True)
              for k, p in model.params.items()}
    return model_mod.EncoderModel(params=params, config=model.config)


@dataclass
class RunResult:
    variant: str
    seed: int
    model: model_mod.EncoderModel
    report: evalstack.ClusterReport
    spectral: evalstack.SpectralReport
    mask_ari: float
    gcd_curve: list[float]
    slot_curve: list[float]
    k_hat: int | None = None
    err_pct: float | None = None


def run_stage_b(prep: StagePrep, cfg: ExperimentConfig, variant: str = "full",
                estimate_categories: bool = False, k_range=None,
                log_every: int = 0) -> RunResult:
    """Train one stage-B variant on a shared prep and evaluate it."""
    gcd_cfg = copy.deepcopy(cfg.gcd)
    gcd_cfg.consensus = variant_consensus(variant, cfg.gcd.consensus
                                          or cns.ConsensusConfig())
    model = clone_model(prep.encoder)
    model.slot_module = prep.slot_module
    dataset, split = prep.dataset, prep.split
    n_known = len(split.known_classes)
    labels_for_train = dataset.labels
    curve = model_mod.train_gcd(model, dataset.tokens, labels_for_train,
                                split.labeled_idx, n_known, gcd_cfg,
                                seed=prep.seed + 17, log_every=log_every)
    return evaluate_model(model, prep, variant, curve,
                          estimate_categories=estimate_categories, k_range=k_range)


def evaluate_model(model: model_mod.EncoderModel, prep: StagePrep, variant: str,
                   curve: list[float] | None = None, estimate_categories=False,
                   k_range=None) -> RunResult:
    dataset, split = prep.dataset, prep.split
    emb = model_mod.embed(model, dataset.tokens)
    labeled_labels = dataset.labels[split.labeled_idx]
    res = evalstack.ssk_means(emb, split.labeled_idx, labeled_labels,
                              k=dataset.taxonomy.config.num_classes,
                              seed=prep.seed + 23)
    report = evalstack.cluster_acc(res.assignments[split.unlabeled_idx],
                                   dataset.labels[split.unlabeled_idx],
                                   known_set=set(split.known_classes))
    report.inertia = res.objective
    spectral = evalstack.vne(emb[split.unlabeled_idx])
    masks = prep.slot_module.masks(prep.slot_features)
    ari = evalstack.mask_ari(masks, dataset.regions)
    k_hat = err = None
    if estimate_categories:
        k_range = k_range or range(2, 2 * dataset.taxonomy.config.num_classes + 1)
        k_hat, err = evalstack.estimate_k(emb, split.labeled_idx, labeled_labels,
                                          k_range, seed=prep.seed + 29,
                                          true_k=dataset.taxonomy.config.num_classes)
    return RunResult(variant=variant, seed=prep.seed, model=model, report=report,
                     spectral=spectral, mask_ari=ari, gcd_curve=curve or [],
                     slot_curve=prep.slot_module.curve, k_hat=k_hat, err_pct=err)


# ---------------------------------------------------------------------------
# slot-count sweep
# ---------------------------------------------------------------------------


def _sweep_worker(args) -> dict:
    cfg, k, seed = args
    cfg = copy.deepcopy(cfg)
    cfg.slots.num_slots = k
    cfg.sync()
    prep = prepare_stages(cfg, seed)
    res = run_stage_b(prep, cfg, "full")
    return {"k": k, "seed": seed, "acc_all": res.report.acc_all,
            "acc_known": res.report.acc_known, "acc_novel": res.report.acc_novel,
            "mask_ari": res.mask_ari}


def sweep_slot_counts(cfg: ExperimentConfig, ks, seed: int,
                      workers: int = 1) -> list[dict]:
    """Accuracy-vs-slot-count curve: one full run per K, fanned out across
    worker processes (each run owns all of its state, nothing is shared)."""
    jobs = [(cfg, int(k), seed) for k in ks]
    if workers <= 1:
        return [_sweep_worker(j) for j in jobs]
    import concurrent.futures as cf
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_worker, jobs))


# ---------------------------------------------------------------------------
# CSV / manifest emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(round(x, 10))
    return str(x)


def report_row(result: RunResult, run_id: str) -> list[str]:
    r = result
    return [_fmt(v) for v in [
        run_id, r.seed, r.variant, r.report.acc_all, r.report.acc_known,
        r.report.acc_novel, r.k_hat, r.err_pct, r.spectral.entropy,
        r.spectral.rank99, r.mask_ari]]


def write_report_csv(path: str | Path, rows: list[list[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def write_curve_csv(path: str | Path, name: str, values: list[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", name])
    for i, v in enumerate(values):
        writer.writerow([i, _fmt(float(v))])
    path.write_text(buf.getvalue())
    return path


def write_manifest(path: str | Path, command: str, config: dict, seeds: list[int],
                   outputs: list[str], timings: dict[str, float] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "command": command,
        "config": config,
        "seeds": seeds,
        "outputs": outputs,
        "timings": timings or {},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def experiment_config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)

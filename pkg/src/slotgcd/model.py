"""Token-grid transformer encoder and the staged GCD training recipe.

Stage 0 pretrains the encoder with instance-discrimination contrastive
learning and freezes it.  Stage A (in :mod:`slots`) fits the slot module on
features tapped from a middle block.  Stage B installs consensus blocks as
the FFN sublayers of the last two blocks and trains them, together with the
projection and classifier heads, under a minimal GCD objective: unsupervised
instance contrast, supervised contrast on labeled pairs, and label-smoothed
classification over the known classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import consensus as cns
from . import slots as slot_mod
from .autodiff import Tensor
from .errors import ConfigError, NumericError, TrainingError


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    input_dim: int = 16
    feature_dim: int = 16     # D_z inside the blocks
    n_tokens: int = 64
    n_heads: int = 4
    ffn_hidden: int = 64
    proj_dim: int = 16        # projection-head output D_emb
    tap_block: int = 1        # 0-based; frozen/trainable boundary for stage B
    # number of blocks applied before the primitive-discovery feature tap;
    # 0 = embedding + position output, where token identity is sharpest
    slot_depth: int = 0

    def __post_init__(self):
        if not 0 <= self.tap_block < self.n_blocks:
            raise ConfigError("tap_block must index an encoder block")
        if not 0 <= self.slot_depth <= self.n_blocks:
            raise ConfigError("slot_depth must be between 0 and n_blocks")

    @property
    def consensus_blocks(self) -> tuple[int, int]:
        return (self.n_blocks - 2, self.n_blocks - 1)


def init_encoder_params(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, dh = config.feature_dim, config.ffn_hidden

    def w(shape):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape),
                      requires_grad=True)

    params = {
        "embed_w": w((config.input_dim, d)),
        "pos": Tensor(rng.normal(0.0, 0.02, size=(config.n_tokens, d)),
                      requires_grad=True),
        "proj_w1": w((d, d)),
        "proj_b1": Tensor(np.zeros(d), requires_grad=True),
        "proj_w2": w((d, config.proj_dim)),
        "proj_b2": Tensor(np.zeros(config.proj_dim), requires_grad=True),
    }
    for i in range(config.n_blocks):
        for name in ("wq", "wk", "wv", "wo"):
            params[f"b{i}_attn_{name}"] = w((d, d))
        params[f"b{i}_ffn_w1"] = w((d, dh))
        params[f"b{i}_ffn_b1"] = Tensor(np.zeros(dh), requires_grad=True)
        params[f"b{i}_ffn_w2"] = w((dh, d))
        params[f"b{i}_ffn_b2"] = Tensor(np.zeros(d), requires_grad=True)
    return params


def _block_attn(params: dict[str, Tensor], i: int) -> dict[str, Tensor]:
    return {f"attn_{k}": params[f"b{i}_attn_{k}"] for k in ("wq", "wk", "wv", "wo")}


def _plain_block(x: Tensor, params: dict[str, Tensor], i: int, n_heads: int) -> Tensor:
    h = ad.add(x, cns.multihead_attention(ad.layernorm(x), _block_attn(params, i),
                                          n_heads))
    f = ad.gelu(ad.add(ad.layernorm(h) @ params[f"b{i}_ffn_w1"], params[f"b{i}_ffn_b1"]))
    f = ad.add(f @ params[f"b{i}_ffn_w2"], params[f"b{i}_ffn_b2"])
    return ad.add(h, f)


@dataclass
class EncoderModel:
    params: dict[str, Tensor]
    config: EncoderConfig
    # block index -> consensus FFN params; empty means plain blocks everywhere
    consensus_params: dict[int, dict[str, Tensor]] = field(default_factory=dict)
    consensus_config: cns.ConsensusConfig | None = None
    slot_module: slot_mod.SlotModule | None = None
    head_params: dict[str, Tensor] = field(default_factory=dict)
    pretrain_curve: list[float] = field(default_factory=list)

    def all_params(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for i, p in self.consensus_params.items():
            out.update({f"cons{i}_{k}": v for k, v in p.items()})
        out.update(self.head_params)
        return out

    # -- forward pieces -------------------------------------------------

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        return ad.add(tokens @ self.params["embed_w"], self.params["pos"])

    def forward_blocks(self, x: Tensor, start: int, stop: int,
                       masks: np.ndarray | None = None) -> Tensor:
        for i in range(start, stop):
            if i in self.consensus_params:
                x = cns.consensus_block(x, masks, _block_attn(self.params, i),
                                        self.consensus_params[i],
                                        self.consensus_config,
                                        n_heads=self.config.n_heads)
            else:
                x = _plain_block(x, self.params, i, self.config.n_heads)
        return x

    def _features_at(self, tokens: np.ndarray, depth: int,
                     batch_size: int = 256) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.float64)
        out = []
        with slot_mod.frozen(self.params):
            for i in range(0, toks.shape[0], batch_size):
                x = self.embed_tokens(Tensor(toks[i:i + batch_size]))
                x = self.forward_blocks(x, 0, depth)
                out.append(x.data)
        return np.concatenate(out, axis=0)

    def tap_features(self, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Frozen features at the stage-B boundary block, (n, N, D_z)."""
        return self._features_at(tokens, self.config.tap_block + 1, batch_size)

    def slot_features(self, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Frozen features feeding primitive discovery, (n, N, D_z)."""
        return self._features_at(tokens, self.config.slot_depth, batch_size)

    def forward_full(self, tokens: Tensor, masks: np.ndarray | None = None) -> Tensor:
        x = self.embed_tokens(tokens)
        x = self.forward_blocks(x, 0, self.config.n_blocks, masks=masks)
        return x

    def pooled(self, tokens: Tensor, masks: np.ndarray | None = None) -> Tensor:
        return ad.mean(self.forward_full(tokens, masks), axis=1)

    def project(self, pooled: Tensor) -> Tensor:
        h = ad.gelu(ad.add(pooled @ self.params["proj_w1"], self.params["proj_b1"]))
        z = ad.add(h @ self.params["proj_w2"], self.params["proj_b2"])
        return ad.l2_normalize(z, axis=-1)

    def _masks_for(self, tokens: np.ndarray) -> np.ndarray | None:
        if not self.consensus_params or self.consensus_config is None:
            return None
        if self.consensus_config.conventional_moe or self.consensus_config.no_dominant:
            return None
        if self.slot_module is None:
            raise TrainingError("consensus blocks need a trained slot module")
        return self.slot_module.masks(self.slot_features(tokens))


def embed(model: EncoderModel, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Unit-norm projected embeddings, (n, proj_dim); deterministic."""
    toks = np.asarray(tokens, dtype=np.float64)
    out = []
    every = model.all_params()
    with slot_mod.frozen(every):
        for i in range(0, toks.shape[0], batch_size):
            chunk = toks[i:i + batch_size]
            masks = model._masks_for(chunk)
            z = model.project(model.pooled(Tensor(chunk), masks))
            out.append(z.data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def info_nce(proj: Tensor, temperature: float) -> Tensor:
    """NT-Xent over 2B paired views laid out [a0..aB-1, b0..bB-1]."""
    n = proj.shape[0]
    if n % 2:
        raise ConfigError("info_nce expects an even number of paired views")
    b = n // 2
    sims = ad.mul(proj @ ad.transpose(proj, (1, 0)), Tensor(1.0 / temperature))
    logits = ad.add(sims, Tensor(-1e9 * np.eye(n)))
    logp = _log_softmax(logits)
    pos = np.zeros((n, n))
    idx = np.arange(b)
    pos[idx, idx + b] = 1.0
    pos[idx + b, idx] = 1.0
    picked = ad.sum_(ad.mul(logp, Tensor(pos)), axis=-1)
    return ad.mul(ad.sum_(picked), Tensor(-1.0 / n))


def _log_softmax(logits: Tensor) -> Tensor:
    p = ad.softmax(logits, axis=-1)
    return ad.log(ad.add(p, Tensor(1e-12)))


def sup_con(proj: Tensor, labels: np.ndarray, temperature: float) -> Tensor | None:
    """Supervised contrastive loss over the labeled views only.

    labels: per-view class id, -1 for unlabeled views.  Returns None when no
    anchor has a positive (fewer than two labeled views of any class).
    """
    lab_idx = np.flatnonzero(labels >= 0)
    if lab_idx.size < 2:
        return None
    y = labels[lab_idx]
    same = (y[:, None] == y[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    n_pos = same.sum(axis=1)
    anchors = n_pos > 0
    if not np.any(anchors):
        return None
    z = proj[lab_idx]
    sims = ad.mul(z @ ad.transpose(z, (1, 0)), Tensor(1.0 / temperature))
    logits = ad.add(sims, Tensor(-1e9 * np.eye(lab_idx.size)))
    logp = _log_softmax(logits)
    weights = np.zeros_like(same)
    weights[anchors] = same[anchors] / n_pos[anchors, None]
    per_anchor = ad.sum_(ad.mul(logp, Tensor(weights)), axis=-1)
    return ad.mul(ad.sum_(per_anchor), Tensor(-1.0 / anchors.sum()))


def smoothed_ce(logits: Tensor, labels: np.ndarray, alpha: float) -> Tensor | None:
    """Label-smoothed cross-entropy over known classes; None without labels."""
    lab_idx = np.flatnonzero(labels >= 0)
    if lab_idx.size == 0:
        return None
    n_cls = logits.shape[-1]
    target = np.full((lab_idx.size, n_cls), alpha / n_cls)
    target[np.arange(lab_idx.size), labels[lab_idx]] += 1.0 - alpha
    logp = _log_softmax(logits[lab_idx])
    per = ad.sum_(ad.mul(logp, Tensor(target)), axis=-1)
    return ad.mul(ad.sum_(per), Tensor(-1.0 / lab_idx.size))


@dataclass
class GcdLossConfig:
    lam: float = 0.35           # supervised-contrast balance
    alpha: float = 0.5          # label smoothing (0.1 in the coarse preset)
    temp_unsup: float = 0.5
    temp_sup: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")


def gcd_loss(proj: Tensor, cls_logits: Tensor | None, view_labels: np.ndarray,
             cfg: GcdLossConfig) -> Tensor:
    """(1-lam)*unsupervised contrast + lam*supervised contrast + smoothed CE.

    view_labels: one entry per view (-1 = unlabeled).  With an empty labeled
    set the result is exactly the unsupervised term.
    """
    total = ad.mul(info_nce(proj, cfg.temp_unsup), Tensor(1.0 - cfg.lam))
    sup = sup_con(proj, view_labels, cfg.temp_sup)
    if sup is not None and cfg.lam > 0:
        total = ad.add(total, ad.mul(sup, Tensor(cfg.lam)))
    if cls_logits is not None:
        ce = smoothed_ce(cls_logits, view_labels, cfg.alpha)
        if ce is not None:
            total = ad.add(total, ce)
    return total


# ---------------------------------------------------------------------------
# stage 0: contrastive pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 128
    temperature: float = 0.5
    aug_noise: float = 0.2


def pretrain_encoder(tokens: np.ndarray, enc_cfg: EncoderConfig,
                     cfg: PretrainConfig, seed: int, log_every: int = 0,
                     resume: dict | None = None, snapshot=None) -> EncoderModel:
    """Instance-discrimination pretraining over two noise-augmented views.

    ``resume``/``snapshot`` carry optimizer moments and the RNG stream so an
    interrupted run continues on the exact uninterrupted trajectory.
    """
    rng = np.random.default_rng(seed)
    model = EncoderModel(params=init_encoder_params(enc_cfg, int(rng.integers(2**31))),
                         config=enc_cfg)
    state = ad.AdamState(lr=cfg.lr)
    toks = np.asarray(tokens, dtype=np.float64)
    n = toks.shape[0]
    start = 0
    if resume is not None:
        for k, p in model.params.items():
            p.data = resume["params"][k].data.copy()
        state = resume["opt"]
        model.pretrain_curve = list(resume["curve"])
        rng.bit_generator.state = resume["rng_state"]
        start = resume["epoch"]
    for epoch in range(start, cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            batch = toks[order[i:i + cfg.batch_size]]
            if batch.shape[0] < 2:
                continue
            views = np.concatenate([
                batch + rng.normal(0.0, cfg.aug_noise, size=batch.shape),
                batch + rng.normal(0.0, cfg.aug_noise, size=batch.shape)])
            ad.zero_grads(model.params)
            try:
                proj = model.project(model.pooled(Tensor(views)))
                loss = info_nce(proj, cfg.temperature)
                ad.backward(loss)
            except NumericError as e:
                raise TrainingError(f"pretraining diverged at epoch {epoch}: {e}") from e
            ad.adam_step(model.params, state)
            losses.append(float(loss.data))
        model.pretrain_curve.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"[pretrain] epoch {epoch + 1}/{cfg.epochs} loss={np.mean(losses):.4f}")
        if snapshot is not None:
            snapshot({"epoch": epoch + 1, "params": model.params, "opt": state,
                      "curve": model.pretrain_curve,
                      "rng_state": rng.bit_generator.state})
    return model


# ---------------------------------------------------------------------------
# stage B: GCD training with consensus blocks
# ---------------------------------------------------------------------------


@dataclass
class GcdTrainConfig:
    epochs: int = 25
    lr: float = 1e-3
    batch_size: int = 64
    aug_noise: float = 0.2
    loss: GcdLossConfig = field(default_factory=GcdLossConfig)
    # architecture flags: None trains the plain pretrained FFNs (no-consensus
    # baseline); otherwise consensus blocks with the given ablations
    consensus: cns.ConsensusConfig | None = field(default_factory=cns.ConsensusConfig)


def install_consensus(model: EncoderModel, config: cns.ConsensusConfig,
                      slot_module: slot_mod.SlotModule | None, seed: int) -> None:
    rng = np.random.default_rng(seed)
    model.consensus_config = config
    model.slot_module = slot_module
    model.consensus_params = {
        i: cns.init_consensus_params(config, int(rng.integers(2**31)))
        for i in model.config.consensus_blocks
    }


def train_gcd(model: EncoderModel, dataset_tokens: np.ndarray, labels: np.ndarray,
              labeled_idx: np.ndarray, n_known: int, cfg: GcdTrainConfig,
              seed: int, log_every: int = 0, resume: dict | None = None,
              snapshot=None) -> list[float]:
    """Stage-B training; mutates ``model`` in place and returns the loss curve.

    Only consensus-block (or, for the baseline, last-two-block FFN) weights
    and the projection/classifier heads are trainable; everything else stays
    frozen, including the slot module.  When ``resume`` is given the model
    must already carry the checkpointed consensus/head weights; the optimizer
    moments and RNG stream are restored so the curve continues exactly.
    """
    rng = np.random.default_rng(seed)
    enc = model.config
    if cfg.consensus is not None:
        if not model.consensus_params:
            needs_slots = not (cfg.consensus.conventional_moe or cfg.consensus.no_dominant)
            if needs_slots and model.slot_module is None:
                raise TrainingError("stage-B requires a stage-A slot module checkpoint")
            install_consensus(model, cfg.consensus, model.slot_module,
                              int(rng.integers(2**31)))
        trainable = {}
        for i, p in model.consensus_params.items():
            trainable.update({f"cons{i}_{k}": v for k, v in p.items()})
    else:
        trainable = {}
        for i in enc.consensus_blocks:
            for suffix in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                trainable[f"b{i}_{suffix}"] = model.params[f"b{i}_{suffix}"]

    # classifier head over known classes, on pooled final features
    head_seed = int(rng.integers(2**31))
    if not model.head_params:
        hrng = np.random.default_rng(head_seed)
        model.head_params = {
            "cls_w": Tensor(hrng.normal(0.0, 1.0 / math.sqrt(enc.feature_dim),
                                        size=(enc.feature_dim, n_known)),
                            requires_grad=True),
            "cls_b": Tensor(np.zeros(n_known), requires_grad=True),
        }
    for name in ("proj_w1", "proj_b1", "proj_w2", "proj_b2"):
        trainable[name] = model.params[name]
    trainable.update(model.head_params)

    trainable_ids = {id(t) for t in trainable.values()}
    frozen_params = {k: p for k, p in model.params.items()
                     if id(p) not in trainable_ids}
    for p in frozen_params.values():
        p.requires_grad = False
    if model.slot_module is not None:
        for p in model.slot_module.params.values():
            p.requires_grad = False

    toks = np.asarray(dataset_tokens, dtype=np.float64)
    n = toks.shape[0]
    is_labeled = np.zeros(n, dtype=bool)
    is_labeled[labeled_idx] = True

    # everything up to (and including) the tap block is frozen, so boundary
    # features and primitive masks are precomputed once; contrastive views
    # are noise perturbations in feature space
    tap = model.tap_features(toks)
    needs_masks = (model.consensus_params and model.consensus_config is not None
                   and not (model.consensus_config.conventional_moe
                            or model.consensus_config.no_dominant))
    all_masks = model.slot_module.masks(model.slot_features(toks)) if needs_masks else None

    state = ad.AdamState(lr=cfg.lr)
    curve = []
    start = 0
    if resume is not None:
        state = resume["opt"]
        curve = list(resume["curve"])
        rng.bit_generator.state = resume["rng_state"]
        start = resume["epoch"]
    try:
        for epoch in range(start, cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for i in range(0, n, cfg.batch_size):
                sel = order[i:i + cfg.batch_size]
                if sel.size < 2:
                    continue
                base = tap[sel]
                views = np.concatenate([
                    base + rng.normal(0.0, cfg.aug_noise, size=base.shape),
                    base + rng.normal(0.0, cfg.aug_noise, size=base.shape)])
                batch_labels = np.where(is_labeled[sel], labels[sel], -1)
                view_labels = np.concatenate([batch_labels, batch_labels])
                masks = None
                if all_masks is not None:
                    masks = np.concatenate([all_masks[sel], all_masks[sel]])
                ad.zero_grads(trainable)
                try:
                    x = model.forward_blocks(Tensor(views), enc.tap_block + 1,
                                             enc.n_blocks, masks=masks)
                    pooled = ad.mean(x, axis=1)
                    proj = model.project(pooled)
                    cls_logits = ad.add(pooled @ model.head_params["cls_w"],
                                        model.head_params["cls_b"])
                    loss = gcd_loss(proj, cls_logits, view_labels, cfg.loss)
                    ad.backward(loss)
                except NumericError as e:
                    raise TrainingError(f"GCD training diverged at epoch {epoch}: {e}") from e
                ad.adam_step(trainable, state)
                losses.append(float(loss.data))
            curve.append(float(np.mean(losses)))
            if log_every and (epoch + 1) % log_every == 0:
                print(f"[gcd] epoch {epoch + 1}/{cfg.epochs} loss={curve[-1]:.4f}")
            if snapshot is not None:
                snapshot({"epoch": epoch + 1, "params": trainable, "opt": state,
                          "curve": curve, "rng_state": rng.bit_generator.state})
    finally:
        for p in frozen_params.values():
            p.requires_grad = True
    return curve

"""Iterative slot-attention discovery of visual primitives.

K learnable slots compete (softmax over the slot axis) to explain N feature
tokens, are refined through a GRU for T iterations, and are decoded by a
spatial-broadcast MLP whose alpha channels form competitive per-token masks.
Training minimizes squared reconstruction error of the input features.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError, TrainingError


@dataclass
class SlotConfig:
    num_slots: int = 8          # K
    slot_dim: int = 16          # D_s
    feature_dim: int = 16       # D_z of the encoder features
    n_tokens: int = 64          # N
    iterations: int = 5         # T
    hidden_dim: int = 64        # decoder MLP width
    epochs: int = 400           # desk-scale runs use <= 100
    lr: float = 5e-4
    batch_size: int = 64
    align_weight: float = 0.0   # optional attention-to-mask distillation
    restarts: int = 8           # slot-init draws scored at inference
    train_attention: bool = False  # keep the competitive pathway fixed

    def __post_init__(self):
        if self.num_slots < 1 or self.slot_dim < 1:
            raise ConfigError("num_slots and slot_dim must be >= 1")


@dataclass
class AttentionMaps:
    """Diagnostics of one attention step (plain arrays, detached)."""

    logits: np.ndarray   # (B, N, K) scaled dot products
    attn: np.ndarray     # softmax over the slot axis; rows sum to 1
    assign: np.ndarray   # attn renormalized over tokens; columns sum to 1


@dataclass
class DecoderOutput:
    per_slot_features: Tensor   # (B, K, N, D_z)
    per_slot_alpha: Tensor      # (B, K, N, 1)
    masks: Tensor               # (B, K, N) competitive softmax over K
    recon: Tensor               # (B, N, D_z)


def init_slot_params(config: SlotConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    ds, dz, dh = config.slot_dim, config.feature_dim, config.hidden_dim

    def w(shape, scale=None):
        scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def near_identity(shape):
        # square projections start at identity so the first iterations act
        # like cosine k-means over the normalized features
        m = rng.normal(0.0, 0.02, size=shape)
        if shape[0] == shape[1]:
            m += np.eye(shape[0])
        else:
            m += rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        return Tensor(m, requires_grad=True)

    params = {
        "init_mu": Tensor(rng.normal(0.0, 1.0, size=(1, ds)), requires_grad=True),
        "init_log_sigma": Tensor(np.full((1, ds), np.log(1.0)), requires_grad=True),
        "log_tau": Tensor(np.array(np.log(20.0)), requires_grad=True),
        "wq": near_identity((ds, ds)),
        "wk": near_identity((dz, ds)),
        "wv": near_identity((dz, ds)),
        "dec_pos": Tensor(rng.normal(0.0, 0.02, size=(config.n_tokens, ds)),
                          requires_grad=True),
        "dec_w1": w((ds, dh)),
        "dec_b1": Tensor(np.zeros(dh), requires_grad=True),
        "dec_w2": w((dh, dz + 1)),
        "dec_b2": Tensor(np.zeros(dz + 1), requires_grad=True),
        # bilinear alpha term: slot-token compatibility; the additive MLP
        # alpha alone cannot express sample-dependent region boundaries
        "dec_wa": near_identity((ds, dz)),
        "dec_log_tau": Tensor(np.array(np.log(20.0)), requires_grad=True),
        # residual refinement MLP applied after the GRU each iteration
        "mlp_w1": w((ds, dh)),
        "mlp_b1": Tensor(np.zeros(dh), requires_grad=True),
        "mlp_w2": w((dh, ds), scale=0.1 / np.sqrt(dh)),
        "mlp_b2": Tensor(np.zeros(ds), requires_grad=True),
    }
    # GRU starts as near-pure aggregation: candidate ~ tanh(update), update
    # gate low (z ~ 0.12).  Random-weight init here scrambles the geometric
    # alignment between slots and the feature space and the iteration never
    # specializes.
    params.update({f"gru_{k}": v for k, v in ad.gru_params(ds, rng, scale=0.02).items()})
    params["gru_wh"].data += np.eye(ds)
    params["gru_bz"].data[:] = -2.0
    return params


def _gru_view(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k[4:]: v for k, v in params.items() if k.startswith("gru_")}


@contextmanager
def frozen(params: dict[str, Tensor]):
    """Temporarily drop requires_grad so forward passes build no graph."""
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]


def init_slots(params: dict[str, Tensor], num_slots: int, batch: int,
               rng: np.random.Generator | None = None,
               shared_seed: int = 0) -> Tensor:
    """Sample s0 from the learnable Gaussian.

    With ``rng`` each slot of each sample gets fresh noise (training).
    Without it the draw for ``shared_seed`` is shared by every sample, which
    keeps inference deterministic and batch-order independent while still
    breaking the slot-permutation symmetry of the shared mean.
    """
    if num_slots < 1:
        raise ConfigError("num_slots must be >= 1")
    mu, log_sigma = params["init_mu"], params["init_log_sigma"]
    ds = mu.shape[1]
    if rng is None:
        draw = np.random.default_rng(shared_seed).normal(size=(num_slots, ds))
        eps = np.broadcast_to(draw, (batch, num_slots, ds)).copy()
    else:
        eps = rng.normal(size=(batch, num_slots, ds))
    return ad.add(mu.reshape(1, 1, ds), ad.mul(ad.exp(log_sigma.reshape(1, 1, ds)),
                                               Tensor(eps)))


def slot_attention_step(slots: Tensor, features: Tensor,
                        params: dict[str, Tensor]) -> tuple[Tensor, AttentionMaps]:
    """One competitive-attention + GRU refinement of the slots.

    slots: (B, K, D_s); features: (B, N, D_z), expected pre-normalized.
    Attention is softmax over the slot axis, then renormalized over tokens
    per slot before aggregating values; the GRU mixes the aggregate into the
    previous slots and a small residual MLP refines the result.
    """
    if features.shape[-2] == 0:
        raise ShapeError("slot_attention_step: empty token axis")
    k = ad.l2_normalize(features @ params["wk"])
    v = features @ params["wv"]
    q = ad.l2_normalize(slots @ params["wq"])
    # cosine similarity with a learnable temperature keeps the competition
    # sharp from the first iteration (plain scaled dot products stay too
    # flat for the slots to ever specialize)
    logits = ad.mul(k @ ad.transpose(q, (0, 2, 1)), ad.exp(params["log_tau"]))
    attn = ad.softmax(logits, axis=-1)                     # (B, N, K), rows sum 1
    col = ad.sum_(attn, axis=1, keepdims=True)             # (B, 1, K)
    if col.data.min() < 1e-12:
        raise NumericError("slot_attention_step: attention column underflow")
    assign = ad.div(attn, col)                             # columns sum 1 over N
    updates = ad.transpose(assign, (0, 2, 1)) @ v          # (B, K, D_s)
    new_slots = ad.gru_cell(slots, updates, _gru_view(params))
    h = ad.gelu(ad.add(ad.layernorm(new_slots) @ params["mlp_w1"], params["mlp_b1"]))
    new_slots = ad.add(new_slots, ad.add(h @ params["mlp_w2"], params["mlp_b2"]))
    maps = AttentionMaps(logits=logits.data, attn=attn.data, assign=assign.data)
    return new_slots, maps


def iterate_slots(slots: Tensor, features: Tensor, iterations: int,
                  params: dict[str, Tensor]) -> tuple[Tensor, AttentionMaps]:
    """T-fold composition of slot_attention_step."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    maps = None
    for _ in range(iterations):
        slots, maps = slot_attention_step(slots, features, params)
    return slots, maps


def decode_broadcast(slots: Tensor, features: Tensor,
                     params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Broadcast each slot over N positions (learned additive positions) and
    decode to D_z feature channels + 1 alpha channel per slot.

    slots: (B, K, D_s); features: (B, N, D_z), the normalized tokens being
    reconstructed.  The alpha channel combines the decoded MLP logit with a
    temperature-scaled cosine compatibility between slot and token, so each
    token is claimed by the slot that best explains it.
    """
    b, k, ds = slots.shape
    n = features.shape[-2]
    x = ad.add(slots.reshape(b, k, 1, ds), params["dec_pos"][:n])
    h = ad.gelu(ad.add(x @ params["dec_w1"], params["dec_b1"]))
    out = ad.add(h @ params["dec_w2"], params["dec_b2"])     # (B, K, N, D_z+1)
    dz = out.shape[-1] - 1
    qa = ad.l2_normalize(slots @ params["dec_wa"])           # (B, K, D_z)
    ka = ad.l2_normalize(features)                           # (B, N, D_z)
    compat = ad.mul(qa @ ad.transpose(ka, (0, 2, 1)), ad.exp(params["dec_log_tau"]))
    alpha = ad.add(out[..., dz:], compat.reshape(b, k, n, 1))
    return out[..., :dz], alpha


def competitive_masks(alpha: Tensor) -> Tensor:
    """Per-token softmax across slots; alpha (B, K, N) -> masks (B, K, N)."""
    return ad.softmax(alpha, axis=-2)


def reconstruction_loss(recon: Tensor, target: Tensor) -> Tensor:
    """Squared Frobenius norm of (recon - target)."""
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction_loss: {recon.shape} vs {target.shape}")
    return ad.mse(recon, target)


def slot_forward(params: dict[str, Tensor], config: SlotConfig, features: Tensor,
                 rng: np.random.Generator | None = None, shared_seed: int = 0,
                 ) -> tuple[Tensor, DecoderOutput, AttentionMaps]:
    """Full pass: init -> iterate -> decode -> compete -> reconstruct.

    Returns (loss summed over the batch, decoder output, final attention maps).
    ``rng`` drives per-sample slot-init noise; None uses the deterministic
    shared draw selected by ``shared_seed``.
    """
    b, n, dz = features.shape
    # per-token normalization conditions the attention dot products and
    # serves as the reconstruction target
    normed = ad.layernorm(features)
    slots0 = init_slots(params, config.num_slots, b, rng, shared_seed)
    slots, maps = iterate_slots(slots0, normed, config.iterations, params)
    feats_k, alpha_k = decode_broadcast(slots, normed, params)
    masks = competitive_masks(alpha_k.reshape(b, config.num_slots, n))
    masked = ad.mul(feats_k, masks.reshape(b, config.num_slots, n, 1))
    recon = ad.sum_(masked, axis=1)
    loss = reconstruction_loss(recon, normed)
    dec = DecoderOutput(per_slot_features=feats_k, per_slot_alpha=alpha_k,
                        masks=masks, recon=recon)
    return loss, dec, maps


@dataclass
class SlotModule:
    params: dict[str, Tensor]
    config: SlotConfig
    curve: list[float] = field(default_factory=list)   # per-epoch mean L_rec

    def masks(self, features: np.ndarray, batch_size: int = 256,
              restarts: int | None = None) -> np.ndarray:
        """Deterministic competitive masks, (n, K, N), no graph built.

        Runs ``restarts`` shared slot-init draws and keeps, per sample, the
        masks from the draw with the lowest reconstruction error (the same
        best-of-n-inits selection k-means uses).
        """
        feats = np.asarray(features, dtype=np.float64)
        restarts = restarts or self.config.restarts
        out = []
        with frozen(self.params):
            for i in range(0, feats.shape[0], batch_size):
                chunk = Tensor(feats[i:i + batch_size])
                best_masks = best_err = None
                for s in range(restarts):
                    _, dec, _ = slot_forward(self.params, self.config, chunk,
                                             shared_seed=s)
                    target = ad.layernorm(chunk).data
                    err = ((dec.recon.data - target) ** 2).sum(axis=(1, 2))
                    if best_masks is None:
                        best_masks, best_err = dec.masks.data.copy(), err
                    else:
                        take = err < best_err
                        best_masks[take] = dec.masks.data[take]
                        best_err = np.minimum(best_err, err)
                out.append(best_masks)
        return np.concatenate(out, axis=0)

    def token_assignments(self, features: np.ndarray) -> np.ndarray:
        """Argmax-slot label per token, (n, N)."""
        return self.masks(features).argmax(axis=1)


def train_slot_module(features: np.ndarray, config: SlotConfig, seed: int,
                      log_every: int = 0, resume: dict | None = None,
                      snapshot=None) -> SlotModule:
    """Stage-A training on frozen encoder features (n, N, D_z).

    By default only the decoder parameters are optimized: the competitive
    attention pathway is initialized as sharp cosine clustering over the
    normalized features and reconstruction pressure would only degrade it
    (set ``train_attention`` to optimize everything).

    ``resume`` is a state dict from a previous ``snapshot`` callback; it
    restores parameters, optimizer moments, and the RNG stream so the
    continued curve matches an uninterrupted run exactly.
    """
    feats = np.asarray(features, dtype=np.float64)
    n_samples = feats.shape[0]
    rng = np.random.default_rng(seed)
    params = init_slot_params(config, int(rng.integers(2**31)))
    if config.train_attention:
        trainable = params
        fixed = {}
    else:
        trainable = {k: p for k, p in params.items() if k.startswith("dec_")}
        fixed = {k: p for k, p in params.items() if not k.startswith("dec_")}
    for p in fixed.values():
        p.requires_grad = False
    state = ad.AdamState(lr=config.lr)
    curve = []
    start = 0
    if resume is not None:
        for k, p in params.items():
            p.data = resume["params"][k].data.copy()
        state = resume["opt"]
        curve = list(resume["curve"])
        rng.bit_generator.state = resume["rng_state"]
        start = resume["epoch"]
    for epoch in range(start, config.epochs):
        order = rng.permutation(n_samples)
        losses = []
        for i in range(0, n_samples, config.batch_size):
            batch = feats[order[i:i + config.batch_size]]
            ad.zero_grads(trainable)
            try:
                loss, dec, maps = slot_forward(params, config, Tensor(batch), rng)
                if config.align_weight > 0:
                    # distill the final attention assignment into the decoder
                    # alpha masks; reconstruction alone leaves them diffuse
                    target = Tensor(np.transpose(maps.attn, (0, 2, 1)))
                    ce = ad.mul(ad.mul(target, ad.log(ad.add(dec.masks, Tensor(1e-12)))),
                                Tensor(-config.align_weight))
                    loss = ad.add(loss, ad.sum_(ce))
                mean_loss = ad.mul(loss, Tensor(1.0 / batch.shape[0]))
                ad.backward(mean_loss)
            except NumericError as e:
                raise TrainingError(f"slot training diverged at epoch {epoch}: {e}") from e
            ad.adam_step(trainable, state)
            losses.append(float(mean_loss.data))
        curve.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"[slots] epoch {epoch + 1}/{config.epochs} L_rec={curve[-1]:.5f}")
        if snapshot is not None:
            snapshot({"epoch": epoch + 1, "params": params, "opt": state,
                      "curve": curve, "rng_state": rng.bit_generator.state})
    for p in fixed.values():
        p.requires_grad = True
    return SlotModule(params=params, config=config, curve=curve)

"""Multiplex-consensus feed-forward block.

The transformer FFN sublayer is replaced by K "dominant" units, each fed the
top-R per-channel spatial activations of its primitive-masked input, plus M
"contextual" units fed the complementary weak activations of the full input.
A dense softmax gate mixes all unit outputs per token, and a learnable
distributor adapts each unit's separation ratio per sample.  Selection is
straight-through: kept entries pass gradients, zeroed entries do not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class ConsensusConfig:
    num_dominant: int = 8        # K, matches the slot count
    num_contextual: int = 2      # M
    feature_dim: int = 16        # D_z
    hidden_dim: int = 64         # unit FFN width, 4 * D_z
    eta: float = 0.1             # ASR scale
    ratio_dominant: float = 0.25
    ratio_contextual: float = 0.5
    rank_mode: str = "value"     # "value" or "abs" top-R ranking
    # ablation flags (conventional MoE bypasses the activation gating)
    conventional_moe: bool = False
    no_dominant: bool = False
    no_contextual: bool = False
    no_scheduler: bool = False

    def __post_init__(self):
        if self.num_dominant < 1 or self.num_contextual < 1:
            raise ConfigError("need at least one dominant and one contextual unit")
        if self.no_dominant and self.no_contextual:
            raise ConfigError("cannot ablate both unit kinds")
        for r in (self.ratio_dominant, self.ratio_contextual):
            if not 0.0 < r <= 1.0 or r + self.eta > 1.0:
                raise ConfigError(f"base ratio {r} with eta {self.eta} leaves (0, 1]")
        if self.rank_mode not in ("value", "abs"):
            raise ConfigError(f"unknown rank_mode {self.rank_mode!r}")

    @property
    def unit_kinds(self) -> list[str]:
        kinds = []
        if not self.no_dominant:
            kinds += ["dominant"] * self.num_dominant
        if not self.no_contextual:
            kinds += ["contextual"] * self.num_contextual
        return kinds

    @property
    def num_units(self) -> int:
        return len(self.unit_kinds)

    @property
    def base_ratios(self) -> np.ndarray:
        return np.array([self.ratio_dominant if k == "dominant" else self.ratio_contextual
                         for k in self.unit_kinds])


@dataclass
class GatedActivation:
    kept_mask: np.ndarray    # boolean (B, N, D) selection set (constant per step)
    gated: Tensor            # masked activations fed to the unit
    ratio_used: np.ndarray   # per-sample ratio actually applied
    unit_kind: str


def _rank_values(z: np.ndarray, mode: str) -> np.ndarray:
    vals = np.abs(z) if mode == "abs" else z
    return ad.topk_rank(vals, axis=-2)


def _survivor_counts(ratio, n_tokens: int) -> np.ndarray:
    return np.ceil(np.asarray(ratio, dtype=np.float64) * n_tokens).astype(np.int64)


def dominant_gate(z: Tensor, mask_k: Tensor | np.ndarray | None, ratio,
                  rank_mode: str = "value") -> GatedActivation:
    """Keep the top ceil(ratio*N) entries per channel along the token axis,
    then weight survivors by the soft primitive mask.

    z: (..., N, D); mask_k: (..., N, 1) in [0, 1] or None; ratio: scalar or
    per-sample array.  Ties at the cut break toward the lower token index.
    """
    ratio_arr = np.atleast_1d(np.asarray(ratio, dtype=np.float64))
    if np.any(ratio_arr <= 0.0) or np.any(ratio_arr > 1.0):
        raise ConfigError(f"dominant ratio must be in (0, 1], got {ratio}")
    n = z.shape[-2]
    counts = _survivor_counts(ratio, n)
    ranks = _rank_values(z.data, rank_mode)
    kept = ranks < np.reshape(counts, np.shape(counts) + (1, 1)) if np.ndim(counts) \
        else ranks < counts
    gated = ad.where_mask(z, kept)
    if mask_k is not None:
        m = mask_k if isinstance(mask_k, Tensor) else Tensor(mask_k)
        gated = ad.mul(gated, m)
    return GatedActivation(kept_mask=kept, gated=gated,
                           ratio_used=np.asarray(ratio, dtype=np.float64),
                           unit_kind="dominant")


def contextual_gate(z: Tensor, ratio, rank_mode: str = "value") -> GatedActivation:
    """Keep the complement of the per-channel top-R index set (the weak
    activations) of the full input; no primitive mask is applied."""
    ratio_arr = np.atleast_1d(np.asarray(ratio, dtype=np.float64))
    if np.any(ratio_arr <= 0.0) or np.any(ratio_arr >= 1.0):
        raise ConfigError(f"contextual ratio must be in (0, 1), got {ratio}")
    n = z.shape[-2]
    counts = _survivor_counts(ratio, n)
    ranks = _rank_values(z.data, rank_mode)
    kept = ranks >= np.reshape(counts, np.shape(counts) + (1, 1)) if np.ndim(counts) \
        else ranks >= counts
    return GatedActivation(kept_mask=kept, gated=ad.where_mask(z, kept),
                           ratio_used=np.asarray(ratio, dtype=np.float64),
                           unit_kind="contextual")


def asr_ratios(z_summary: np.ndarray, base_ratios: np.ndarray, eta: float,
               asr_w: np.ndarray) -> np.ndarray:
    """Per-sample separation ratios: r_k + eta * softmax(W_ASR z)[k].

    z_summary: (B, D) mean-pooled token embedding; returns (B, num_units).
    """
    if np.any(base_ratios + eta > 1.0):
        raise ConfigError("base ratio + eta exceeds 1")
    logits = z_summary @ asr_w
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    sm = e / e.sum(axis=-1, keepdims=True)
    return base_ratios[None, :] + eta * sm


def init_consensus_params(config: ConsensusConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    dz, dh = config.feature_dim, config.hidden_dim
    u = config.num_units
    return {
        "gate_w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dz), size=(dz, u)),
                         requires_grad=True),
        "asr_w": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dz), size=(dz, u)),
                        requires_grad=True),
        # unit FFN weights stacked on a leading unit axis for batched matmul
        "units_w1": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dz), size=(u, 1, dz, dh)),
                           requires_grad=True),
        "units_b1": Tensor(np.zeros((u, 1, 1, dh)), requires_grad=True),
        # small output init: the residual block starts near identity
        "units_w2": Tensor(rng.normal(0.0, 0.1 / math.sqrt(dh), size=(u, 1, dh, dz)),
                           requires_grad=True),
        "units_b2": Tensor(np.zeros((u, 1, 1, dz)), requires_grad=True),
    }


def _selection_masks(z_data: np.ndarray, masks: np.ndarray | None,
                     ratios: np.ndarray, config: ConsensusConfig) -> np.ndarray:
    """Per-unit input weights (U, B, N, D): top-R keep-mask times the soft
    primitive mask for dominant units, weak-complement keep-mask for
    contextual units.  All constants under the straight-through contract."""
    b, n, _ = z_data.shape
    kinds = config.unit_kinds
    ranks = _rank_values(z_data, config.rank_mode)                  # (B, N, D)
    counts = _survivor_counts(ratios.T, n)                          # (U, B)
    sel = np.empty((len(kinds),) + z_data.shape)
    dom_idx = 0
    for i, kind in enumerate(kinds):
        cut = counts[i][:, None, None]
        if kind == "dominant":
            sel[i] = (ranks < cut) * masks[:, dom_idx, :, None]
            dom_idx += 1
        else:
            sel[i] = ranks >= cut
    return sel


def consensus_ffn(z: Tensor, masks: np.ndarray | None,
                  params: dict[str, Tensor], config: ConsensusConfig) -> Tensor:
    """Dense mixture of gated units: sum_k G(z)_k * FFN_k(gated input_k).

    z: (B, N, D); masks: (B, K, N) competitive primitive masks (required
    unless dominant units are ablated or conventional_moe is set).
    """
    kinds = config.unit_kinds
    u = len(kinds)
    needs_masks = ("dominant" in kinds) and not config.conventional_moe
    if needs_masks:
        if masks is None:
            raise ConfigError("primitive masks required for dominant units")
        if masks.shape[-2] != config.num_dominant:
            raise ConfigError(
                f"mask count {masks.shape[-2]} != dominant units {config.num_dominant}")

    b, n, dz = z.shape
    if config.no_scheduler:
        gate = None   # uniform mixing, fixed base ratios
        ratios = np.broadcast_to(config.base_ratios, (b, u)).copy()
    else:
        gate = ad.softmax(z @ params["gate_w"], axis=-1)    # (B, N, U)
        ratios = asr_ratios(z.data.mean(axis=-2), config.base_ratios,
                            config.eta, params["asr_w"].data)

    if config.conventional_moe:
        inp = z.reshape(1, b, n, dz)
    else:
        sel = _selection_masks(z.data, masks, ratios, config)
        inp = ad.mul(z.reshape(1, b, n, dz), Tensor(sel))
    h = ad.gelu(ad.add(inp @ params["units_w1"], params["units_b1"]))
    e = ad.add(h @ params["units_w2"], params["units_b2"])   # (U, B, N, D)
    if gate is None:
        return ad.mul(ad.sum_(e, axis=0), Tensor(1.0 / u))
    g = ad.transpose(gate, (2, 0, 1)).reshape(u, b, n, 1)
    return ad.sum_(ad.mul(e, g), axis=0)


def multihead_attention(x: Tensor, params: dict[str, Tensor], n_heads: int,
                        prefix: str = "attn") -> Tensor:
    """Standard scaled-dot multi-head self-attention, (B, N, D) -> (B, N, D)."""
    b, n, d = x.shape
    if d % n_heads:
        raise ShapeError(f"feature dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t):
        return ad.transpose(t.reshape(b, n, n_heads, dh), (0, 2, 1, 3))

    q = split(x @ params[f"{prefix}_wq"])
    k = split(x @ params[f"{prefix}_wk"])
    v = split(x @ params[f"{prefix}_wv"])
    logits = ad.mul(q @ ad.transpose(k, (0, 1, 3, 2)), Tensor(1.0 / math.sqrt(dh)))
    attn = ad.softmax(logits, axis=-1)
    ctx = ad.transpose(attn @ v, (0, 2, 1, 3)).reshape(b, n, d)
    return ctx @ params[f"{prefix}_wo"]


def consensus_block(z: Tensor, masks: np.ndarray | None,
                    attn_params: dict[str, Tensor], ffn_params: dict[str, Tensor],
                    config: ConsensusConfig, n_heads: int = 4) -> Tensor:
    """Pre-LN transformer block whose FFN sublayer is the consensus mixture:
    h = z + MHA(LN(z));  out = h + f_consensus(LN(h))."""
    h = ad.add(z, multihead_attention(ad.layernorm(z), attn_params, n_heads))
    return ad.add(h, consensus_ffn(ad.layernorm(h), masks, ffn_params, config))

"""Scaled dot-product attention, multi-head attention, and attention units.

Two unit flavors share one implementation: a self-attention unit reads
queries, keys, and values from the same sequence; a guided unit takes its
queries from one sequence and keys/values from another, so the guide
decides what the first sequence attends to.

Masking is additive: padded key positions get a -1e9 score before softmax,
which underflows to an exactly-zero weight. No positional encodings here;
order information comes from the recurrent grounding stage upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from vcrnet.layers import (
    FeedForwardParams,
    LayerNormParams,
    feed_forward,
    init_feed_forward,
    init_layer_norm,
    layer_norm,
)
from vcrnet.tensor import Tensor, ShapeError, concat, record_op

_MASK_SCORE = -1e9


@dataclass
class MhaParams:
    """Per-head projections plus the shared output projection."""

    wq: list
    wk: list
    wv: list
    wo: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(len(self.wq)):
            yield f"{prefix}.wq{i}", self.wq[i]
            yield f"{prefix}.wk{i}", self.wk[i]
            yield f"{prefix}.wv{i}", self.wv[i]
        yield f"{prefix}.wo", self.wo

    @property
    def heads(self) -> int:
        return len(self.wq)


@dataclass
class AttnUnitParams:
    mha: MhaParams
    ffn: FeedForwardParams
    ln1: LayerNormParams
    ln2: LayerNormParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.mha.named(f"{prefix}.mha")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")


@dataclass
class AttentionTrace:
    """Recorded attention weights of one unit, for interpretability export.

    heads holds one m x n weight matrix per head (plain arrays, detached
    from the tape); token labels are attached by the caller that knows them.
    """

    unit: str
    heads: list
    query_tokens: list = field(default_factory=list)
    key_tokens: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "unit": self.unit,
            "heads": [h.tolist() for h in self.heads],
            "query_tokens": list(self.query_tokens),
            "key_tokens": list(self.key_tokens),
        }


def mask_bias(mask: Optional[np.ndarray], n: int) -> Optional[Tensor]:
    """Additive pre-softmax bias for a key mask: 0 where real, -1e9 where padded.

    An absent or all-true mask yields None, which callers treat as adding
    nothing.
    """
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"mask length {mask.shape} does not match {n} key positions")
    if not mask.any():
        raise ValueError("attention over a fully masked sequence has no valid key")
    if mask.all():
        return None
    return Tensor(np.where(mask, 0.0, _MASK_SCORE))


def sdpa(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None
) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_k)) v; returns (output, weight matrix).

    One fused tape entry; gradients flow through the output only, and the
    returned weight matrix is a value-only view for inspection. This op runs
    inside every head of every unit, hence the hand-written backward.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 2 or kd.ndim != 2 or vd.ndim != 2:
        raise ShapeError("sdpa expects 2-d q, k, v")
    if qd.shape[1] != kd.shape[1]:
        raise ShapeError(f"query width {qd.shape} does not match key width {kd.shape}")
    if kd.shape[0] != vd.shape[0]:
        raise ShapeError(f"key count {kd.shape} does not match value count {vd.shape}")
    scale = 1.0 / math.sqrt(qd.shape[1])
    scores = (qd @ kd.T) * scale
    bias = mask_bias(mask, kd.shape[0])
    if bias is not None:
        scores = scores + bias.data
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        g_w = g @ vd.T
        g_s = w * (g_w - (g_w * w).sum(axis=-1, keepdims=True))
        return (g_s @ kd) * scale, (g_s.T @ qd) * scale, w.T @ g

    return record_op(w @ vd, (q, k, v), rule), Tensor._wrap(w, False)


def init_mha(rng: np.random.Generator, d_model: int, h: int) -> MhaParams:
    if h < 1 or d_model % h != 0:
        raise ValueError(f"head count {h} must divide d_model {d_model}")
    d_head = d_model // h
    lim = 1.0 / math.sqrt(d_model)

    def proj():
        return Tensor(rng.uniform(-lim, lim, size=(d_model, d_head)), requires_grad=True)

    return MhaParams(
        wq=[proj() for _ in range(h)],
        wk=[proj() for _ in range(h)],
        wv=[proj() for _ in range(h)],
        wo=Tensor(
            rng.uniform(-1.0 / math.sqrt(h * d_head), 1.0 / math.sqrt(h * d_head),
                        size=(h * d_head, d_model)),
            requires_grad=True,
        ),
    )


def multi_head(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    p: MhaParams,
    mask: Optional[np.ndarray] = None,
    label: str = "mha",
) -> tuple[Tensor, AttentionTrace]:
    """Project into each head, attend per head, concatenate, project out."""
    head_outs = []
    head_weights = []
    for i in range(p.heads):
        out_i, w_i = sdpa(q_in @ p.wq[i], k_in @ p.wk[i], v_in @ p.wv[i], mask)
        head_outs.append(out_i)
        head_weights.append(w_i.data)
    joined = head_outs[0] if len(head_outs) == 1 else concat(head_outs, axis=1)
    return joined @ p.wo, AttentionTrace(unit=label, heads=head_weights)


def init_attn_unit(
    rng: np.random.Generator, d_model: int, h: int, d_ff: int, p_drop: float = 0.0
) -> AttnUnitParams:
    return AttnUnitParams(
        mha=init_mha(rng, d_model, h),
        ffn=init_feed_forward(rng, d_model, d_ff, p_drop),
        ln1=init_layer_norm(d_model),
        ln2=init_layer_norm(d_model),
    )


def guided_attention_unit(
    x: Tensor,
    guide: Tensor,
    p: AttnUnitParams,
    mask: Optional[np.ndarray] = None,
    residual: bool = True,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    label: str = "ga",
) -> tuple[Tensor, AttentionTrace]:
    """One unit: attend x over the guide, then feed-forward, LayerNorm after each."""
    att, trace = multi_head(x, guide, guide, p.mha, mask, label)
    y = layer_norm(x + att if residual else att, p.ln1)
    ff = feed_forward(y, p.ffn, training=training, rng=rng)
    out = layer_norm(y + ff if residual else ff, p.ln2)
    return out, trace


def self_attention_unit(
    x: Tensor,
    p: AttnUnitParams,
    mask: Optional[np.ndarray] = None,
    residual: bool = True,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    label: str = "sa",
) -> tuple[Tensor, AttentionTrace]:
    return guided_attention_unit(
        x, x, p, mask=mask, residual=residual, training=training, rng=rng, label=label
    )

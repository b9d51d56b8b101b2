"""Co-attention over the joined query/response sequence.

The fused query and response are concatenated along the sequence axis into
a joint sequence X. Two stacks then run in lockstep: one refines the query
against X, the other refines the response against X, each layer being a
self-attention unit followed by a guided unit (order configurable). An
alternative encoder replaces both stacks with a single BiLSTM over X, used
as an ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from vcrnet.attention import AttnUnitParams, guided_attention_unit, self_attention_unit
from vcrnet.grounding import GroundedSeq
from vcrnet.layers import BiLstmParams, bilstm
from vcrnet.tensor import Tensor, ShapeError, concat

LAYER_ORDERS = ("sa_ga", "ga_sa")

PROV_QUERY = "q"
PROV_RESPONSE = "r"


@dataclass
class JointSeq:
    positions: Tensor
    tokens: list
    mask: np.ndarray
    provenance: np.ndarray

    @property
    def m_query(self) -> int:
        return int((self.provenance == PROV_QUERY).sum())

    @property
    def texts(self) -> list:
        return [t.text for t in self.tokens]


def join(q: GroundedSeq, r: GroundedSeq) -> JointSeq:
    """Concatenate query then response along the sequence axis."""
    d_q = q.positions.data.shape[1]
    d_r = r.positions.data.shape[1]
    if d_q != d_r:
        raise ShapeError(f"cannot join feature widths {d_q} and {d_r}")
    m_q = q.positions.data.shape[0]
    m_r = r.positions.data.shape[0]
    if m_r < 1:
        raise ShapeError("response sequence must be non-empty")
    return JointSeq(
        positions=concat([q.positions, r.positions], axis=0),
        tokens=list(q.tokens) + list(r.tokens),
        mask=np.concatenate([q.mask, r.mask]),
        provenance=np.array([PROV_QUERY] * m_q + [PROV_RESPONSE] * m_r),
    )


def split_joint(joint: JointSeq) -> tuple[Tensor, Tensor]:
    """Inverse of join: recover the query and response halves by provenance."""
    m_q = joint.m_query
    m = joint.positions.data.shape[0]
    return joint.positions.slice(0, 0, m_q), joint.positions.slice(0, m_q, m)


@dataclass
class CoAttnLayerParams:
    sa: AttnUnitParams
    ga: AttnUnitParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.sa.named(f"{prefix}.sa")
        yield from self.ga.named(f"{prefix}.ga")


@dataclass
class CoAttnModuleParams:
    layers: list

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.{i}")


@dataclass
class CoAttnParams:
    mod_q: CoAttnModuleParams
    mod_r: CoAttnModuleParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.mod_q.named(f"{prefix}.q")
        yield from self.mod_r.named(f"{prefix}.r")


def coattend(
    joint: JointSeq,
    fused_q: GroundedSeq,
    fused_r: GroundedSeq,
    p: CoAttnParams,
    layer_order: str = "sa_ga",
    refresh_joint: bool = False,
    residual: bool = True,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple:
    """Run both co-attention stacks; returns (Z_q, Z_r, traces).

    With refresh_joint the guide X is rebuilt from the current layer outputs
    between layers; otherwise it stays fixed at the initial join.
    """
    if layer_order not in LAYER_ORDERS:
        raise ValueError(f"layer_order must be one of {LAYER_ORDERS}, got {layer_order!r}")
    depth = len(p.mod_q.layers)
    if depth != len(p.mod_r.layers) or depth < 1:
        raise ShapeError("both co-attention stacks need the same depth >= 1")
    kwargs = dict(residual=residual, training=training, rng=rng)
    traces = []
    x_tokens = joint.texts

    def one_module(y, own_mask, own_tokens, layer, side, idx, x_pos, x_mask):
        def sa(v):
            out, tr = self_attention_unit(v, layer.sa, mask=own_mask,
                                          label=f"coattn.{side}.sa.{idx}", **kwargs)
            tr.query_tokens = own_tokens
            tr.key_tokens = own_tokens
            traces.append(tr)
            return out

        def ga(v):
            out, tr = guided_attention_unit(v, x_pos, layer.ga, mask=x_mask,
                                            label=f"coattn.{side}.ga.{idx}", **kwargs)
            tr.query_tokens = own_tokens
            tr.key_tokens = x_tokens
            traces.append(tr)
            return out

        return ga(sa(y)) if layer_order == "sa_ga" else sa(ga(y))

    y_q, y_r = fused_q.positions, fused_r.positions
    x_pos, x_mask = joint.positions, joint.mask
    for idx in range(depth):
        y_q = one_module(y_q, fused_q.mask, fused_q.texts,
                         p.mod_q.layers[idx], "q", idx, x_pos, x_mask)
        y_r = one_module(y_r, fused_r.mask, fused_r.texts,
                         p.mod_r.layers[idx], "r", idx, x_pos, x_mask)
        if refresh_joint and idx + 1 < depth:
            x_pos = concat([y_q, y_r], axis=0)
    return y_q, y_r, traces


def lstm_encode(joint: JointSeq, p: BiLstmParams) -> tuple:
    """Ablation encoder: one BiLSTM over X, split back by provenance."""
    out = bilstm(joint.positions, p)
    m_q = joint.m_query
    m = out.data.shape[0]
    return out.slice(0, 0, m_q), out.slice(0, m_q, m), []

"""Attention reduction, fusion of the two pooled vectors, and the logit head.

Reduction pools a sequence into one vector: a small MLP scores every
position, a masked softmax turns the scores into weights, and the weighted
rows are summed. The query and response pools are fused by two linear
projections, added, LayerNorm-ed, and a final linear layer emits the
per-candidate logit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from vcrnet.attention import mask_bias
from vcrnet.layers import (
    LayerNormParams,
    LinearParams,
    MlpParams,
    init_layer_norm,
    init_mlp,
    layer_norm,
    linear,
    mlp,
)
from vcrnet.tensor import Tensor, ShapeError, softmax


@dataclass
class ReductionParams:
    """Score MLPs for the two paths (possibly one shared object), fusion, head."""

    mlp_q: MlpParams
    mlp_r: MlpParams
    w1: Tensor
    w2: Tensor
    ln: LayerNormParams
    clf: LinearParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.mlp_q.named(f"{prefix}.mlp_q")
        if self.mlp_r is not self.mlp_q:
            yield from self.mlp_r.named(f"{prefix}.mlp_r")
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.w2", self.w2
        yield from self.ln.named(f"{prefix}.ln")
        yield from self.clf.named(f"{prefix}.clf")


def init_reduction(
    rng: np.random.Generator, d_model: int, d_c: int, share_mlp: bool = False
) -> ReductionParams:
    widths = [d_model, max(d_model // 2, 1), 1]
    mlp_q = init_mlp(rng, widths)
    mlp_r = mlp_q if share_mlp else init_mlp(rng, widths)
    lim = 1.0 / np.sqrt(d_model)
    # the classifier starts at zero: a fresh model scores all candidates
    # identically, pinning the untrained loss at ln 4 and keeping the
    # chance baseline honest
    return ReductionParams(
        mlp_q=mlp_q,
        mlp_r=mlp_r,
        w1=Tensor(rng.uniform(-lim, lim, size=(d_model, d_c)), requires_grad=True),
        w2=Tensor(rng.uniform(-lim, lim, size=(d_model, d_c)), requires_grad=True),
        ln=init_layer_norm(d_c),
        clf=LinearParams(
            weight=Tensor(np.zeros((d_c, 1)), requires_grad=True),
            bias=Tensor(np.zeros(1), requires_grad=True),
        ),
    )


def reduce(Z: Tensor, mask: Optional[np.ndarray], p_mlp: MlpParams) -> tuple[Tensor, Tensor]:
    """Pool rows of Z by learned softmax weights; returns (1 x d vector, weights).

    Masked positions get exactly zero weight; a fully masked sequence is an
    error. With a zero MLP the weights are uniform over unmasked rows.
    """
    m = Z.data.shape[0]
    if m < 1:
        raise ShapeError("cannot reduce an empty sequence")
    scores = mlp(Z, p_mlp)
    if scores.data.shape != (m, 1):
        raise ShapeError(f"score MLP must map to one column, got {scores.data.shape}")
    row = scores.reshape(1, m)
    bias = mask_bias(mask, m)
    if bias is not None:
        row = row + bias
    alpha_row = softmax(row, axis=-1)
    pooled = alpha_row @ Z
    return pooled, alpha_row.reshape(m)


def fuse(z_q: Tensor, z_r: Tensor, p: ReductionParams) -> Tensor:
    """LayerNorm of the summed projections of the two pooled vectors (1 x d_c)."""
    if z_q.data.shape != z_r.data.shape or z_q.data.ndim != 2 or z_q.data.shape[0] != 1:
        raise ShapeError(
            f"fuse expects two 1 x d rows, got {z_q.data.shape} and {z_r.data.shape}"
        )
    return layer_norm(z_q @ p.w1 + z_r @ p.w2, p.ln)


def candidate_logit(fused: Tensor, p: ReductionParams) -> Tensor:
    """Final linear head: one scalar logit per candidate, shape (1, 1)."""
    return linear(fused, p.clf)

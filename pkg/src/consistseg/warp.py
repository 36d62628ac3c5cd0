"""Differentiable transformation layer for prediction maps.

Forward: nearest-neighbour warp of the branch-1 prediction by the field
aligning it with branch 2.  Backward: scatter-add, where each output pixel's
gradient is added at the source pixel it was copied from, so pixels never
read in the forward pass get exactly zero gradient.  Since the
nearest-neighbour warp is a 0/1 linear map, scatter-add is its exact
transpose; an inverse-warp backward (the approximation one would get by
warping the gradient with the reverse field) is kept only as a
diagnostic mode and is never used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deform import (DeformationField, TransformPair, compose_fields,
                     source_indices, zero_field)


class WarpShapeError(ValueError):
    pass


@dataclass
class WarpContext:
    """Fields aligning branch 1 with branch 2 plus the per-pixel source map.

    forward_field realizes t2_out o (t1_out)^-1, backward_field the
    reverse; src_flat[i*w + j] is the flat index of the input pixel whose
    value the output pixel (i, j) copies.
    """

    forward_field: DeformationField
    backward_field: DeformationField
    src_flat: np.ndarray

    @classmethod
    def from_field(cls, forward_field: DeformationField,
                   backward_field: DeformationField) -> "WarpContext":
        si, sj = source_indices(forward_field)
        src = (si * forward_field.width + sj).reshape(-1)
        return cls(forward_field, backward_field, src)

    @classmethod
    def from_pair(cls, t1: TransformPair, t2: TransformPair,
                  height: int, width: int) -> "WarpContext":
        """Build the alignment context for a (t1, t2) draw."""
        if t1.is_identity and t2.is_identity:
            fwd = zero_field(height, width)
            bwd = zero_field(height, width)
        elif t1.is_identity:
            fwd = t2.field
            bwd = t2.inverse
        elif t2.is_identity:
            fwd = t1.inverse
            bwd = t1.field
        else:
            fwd = compose_fields(t2.field, t1.inverse)
            bwd = compose_fields(t1.field, t2.inverse)
        return cls.from_field(fwd, bwd)

    @property
    def shape(self) -> tuple[int, int]:
        return self.forward_field.shape


def warp_forward(pred: np.ndarray, ctx: WarpContext) -> np.ndarray:
    """Nearest-neighbour warp of a (b, c, h, w) prediction, per channel."""
    b, c, h, w = pred.shape
    if (h, w) != ctx.shape:
        raise WarpShapeError(f"prediction spatial dims ({h}, {w}) != field dims {ctx.shape}")
    return pred.reshape(b, c, h * w)[:, :, ctx.src_flat].reshape(b, c, h, w)


def warp_backward(grad_out: np.ndarray, ctx: WarpContext) -> np.ndarray:
    """Scatter-add adjoint of warp_forward (deterministic accumulation)."""
    b, c, h, w = grad_out.shape
    if (h, w) != ctx.shape:
        raise WarpShapeError(f"gradient spatial dims ({h}, {w}) != field dims {ctx.shape}")
    n = h * w
    flat = grad_out.reshape(b, c, n)
    out = np.empty_like(flat)
    for bi in range(b):
        for ci in range(c):
            out[bi, ci] = np.bincount(ctx.src_flat, weights=flat[bi, ci], minlength=n)
    return out.reshape(b, c, h, w)


def warp_backward_inverse_warp(grad_out: np.ndarray, ctx: WarpContext) -> np.ndarray:
    """Diagnostic-only backward: nearest-neighbour warp of the gradient by
    the backward field.  Agrees with the exact adjoint only where the
    forward field is injective."""
    si, sj = source_indices(ctx.backward_field)
    src = (si * ctx.backward_field.width + sj).reshape(-1)
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h * w)[:, :, src].reshape(b, c, h, w)


def warp_tensor(pred: T.Tensor, ctx: WarpContext, stop_grad: bool = False) -> T.Tensor:
    """Autodiff wrapper around the warp layer.

    With stop_grad=True no gradient flows into branch 1, mimicking
    self-ensembling-style training (ablation only).
    """
    out_data = warp_forward(pred.data, ctx)
    if stop_grad or not pred.requires_grad:
        return T.Tensor(out_data)

    def backward(g):
        pred._accumulate(warp_backward(g, ctx))

    return T._make(out_data, (pred,), backward)

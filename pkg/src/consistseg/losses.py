"""Soft-IOU loss terms and the composite mini-batch objective.

Per class c the soft IOU is sum_i(y_c * p_c) / sum_i(y_c + (1 - y_c) * p_c),
averaged over all class channels (background included).  Loss terms are
1 - mean soft IOU so they live in [0, 1] and are minimized.  The batch
objective is the supervised term averaged over both transformed copies of
each labeled item plus lambda times the consistency term averaged over
every item, with branch 1 aligned to branch 2 through the warp layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .warp import WarpContext, warp_tensor

EPS = 1e-8


class LossInputError(ValueError):
    pass


@dataclass
class LossReport:
    l_sup: float
    l_cons: float
    total: float
    per_class_iou: list[float] = field(default_factory=list)


def one_hot(labelmap: np.ndarray, n_classes: int) -> np.ndarray:
    """(h, w) integer map -> (1, n_classes, h, w) one-hot float64."""
    labelmap = np.asarray(labelmap)
    h, w = labelmap.shape
    out = np.zeros((1, n_classes, h, w))
    np.put_along_axis(out[0].reshape(n_classes, h * w).T,
                      labelmap.reshape(h * w, 1), 1.0, axis=1)
    return out


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(x)


def _check_unit_range(t: T.Tensor, name: str) -> None:
    lo = float(t.data.min()) if t.data.size else 0.0
    hi = float(t.data.max()) if t.data.size else 0.0
    if lo < -1e-9 or hi > 1.0 + 1e-9:
        raise LossInputError(f"{name} values must lie in [0, 1], got range [{lo}, {hi}]")


def soft_iou(target, pred, n_classes: int | None = None) -> tuple[T.Tensor, T.Tensor]:
    """Per-class soft IOU (shape (b, c, 1, 1)) and its mean (scalar).

    Both arguments participate in the graph; an empty class in both
    target and prediction scores 0 for that class (0 / EPS convention).
    """
    y = _as_tensor(target)
    p = _as_tensor(pred)
    if y.shape != p.shape:
        raise LossInputError(f"target shape {y.shape} != prediction shape {p.shape}")
    if n_classes is not None and y.shape[1] != n_classes:
        raise LossInputError(f"expected {n_classes} class channels, got {y.shape[1]}")
    _check_unit_range(y, "target")
    _check_unit_range(p, "prediction")
    num = T.sum_spatial(y * p)
    den = T.sum_spatial(y + (1.0 - y) * p)
    per_class = num / (den + EPS)
    return per_class, T.mean_all(per_class)


def supervised_term(y, pred, n_classes: int | None = None) -> T.Tensor:
    """1 - mean soft IOU against ground truth."""
    _, mean = soft_iou(y, pred, n_classes)
    return 1.0 - mean


def consistency_term(warped_pred, pred, n_classes: int | None = None) -> T.Tensor:
    """1 - mean soft IOU between the aligned branch-1 and branch-2 outputs.

    The warped branch-1 prediction takes the target slot of the formula.
    Note C(p, p) = 0 only for binary p, so this term also rewards
    confident predictions.
    """
    _, mean = soft_iou(warped_pred, pred, n_classes)
    return 1.0 - mean


@dataclass
class BatchItem:
    """One (x, t1, t2) tuple, with a label map iff the item is labeled.

    x1/x2 are the two deformed input copies, y1/y2 the correspondingly
    deformed one-hot labels (labeled items only), ctx the warp-layer
    alignment context.
    """

    x1: np.ndarray
    x2: np.ndarray
    ctx: WarpContext
    y1: np.ndarray | None = None
    y2: np.ndarray | None = None

    @property
    def labeled(self) -> bool:
        return self.y1 is not None


def batch_loss(items: list[BatchItem], net, lam: float,
               stop_grad: bool = False) -> tuple[T.Tensor, LossReport]:
    """Composite objective over a prepared batch.

    l_sup  = 1/(2|B_l|) sum over labeled of S(y1, f(x1)) + S(y2, f(x2))
    l_cons = 1/|B| sum over all of C(warp(f(x1)), f(x2))
    total  = l_sup + lam * l_cons

    `net` maps a (b, 1, h, w) array to a (b, n_classes, h, w) probability
    tensor; both branches are evaluated in one stacked forward pass so
    weight sharing is structural.
    """
    if not items:
        raise LossInputError("batch is empty")
    labeled = [it for it in items if it.labeled]
    if not labeled:
        raise LossInputError("batch has no labeled items; the supervised term is undefined")
    n = len(items)
    stacked = np.stack([it.x1[None] for it in items] + [it.x2[None] for it in items])
    preds = net(stacked)  # (2n, C, h, w)
    n_classes = preds.shape[1]

    sup_terms: list[T.Tensor] = []
    per_class_acc = np.zeros(n_classes)
    for idx, it in enumerate(items):
        if not it.labeled:
            continue
        p1 = T.slice_batch(preds, idx, idx + 1)
        p2 = T.slice_batch(preds, n + idx, n + idx + 1)
        iou1, mean1 = soft_iou(it.y1, p1, n_classes)
        iou2, mean2 = soft_iou(it.y2, p2, n_classes)
        sup_terms.append((1.0 - mean1) + (1.0 - mean2))
        per_class_acc += 0.5 * (iou1.data.reshape(-1) + iou2.data.reshape(-1))

    cons_terms: list[T.Tensor] = []
    for idx, it in enumerate(items):
        p1 = T.slice_batch(preds, idx, idx + 1)
        p2 = T.slice_batch(preds, n + idx, n + idx + 1)
        p1w = warp_tensor(p1, it.ctx, stop_grad=stop_grad)
        cons_terms.append(consistency_term(p1w, p2, n_classes))

    l_sup = _sum(sup_terms) * (1.0 / (2 * len(labeled)))
    l_cons = _sum(cons_terms) * (1.0 / n)
    total = l_sup + lam * l_cons
    report = LossReport(
        l_sup=l_sup.item(),
        l_cons=l_cons.item(),
        total=total.item(),
        per_class_iou=list(per_class_acc / len(labeled)),
    )
    return total, report


def _sum(terms: list[T.Tensor]) -> T.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc

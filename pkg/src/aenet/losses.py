"""Training losses (Dice main loss, averaged auxiliary BCE) and segmentation metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError, Var


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    dice_smooth: float = 1.0
    bce_eps: float = 1e-7

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")


def _check(pred: Var, gt: Var) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")


def dice_loss(pred, gt, smooth: float = 1.0) -> Var:
    """``1 - (2 sum(p g) + s) / (sum p + sum g + s)``."""
    pred, gt = tc.as_var(pred), tc.as_var(gt)
    _check(pred, gt)
    inter = tc.sum(tc.mul(pred, gt))
    num = tc.add(tc.scale(inter, 2.0), smooth)
    den = tc.add(tc.add(tc.sum(pred), tc.sum(gt)), smooth)
    return tc.sub(1.0, tc.mul(num, tc.reciprocal(den)))


def bce_loss(pred, gt, eps: float = 1e-7) -> Var:
    """Pixel-mean binary cross-entropy with the prediction clamped to ``[eps, 1 - eps]``.

    Soft targets are accepted.
    """
    pred, gt = tc.as_var(pred), tc.as_var(gt)
    _check(pred, gt)
    p = tc.clip(pred, eps, 1.0 - eps)
    pos = tc.mul(gt, tc.log(p))
    neg = tc.mul(tc.sub(1.0, gt), tc.log(tc.sub(1.0, p)))
    return tc.scale(tc.mean(tc.add(pos, neg)), -1.0)


def total_loss(pred, gt, aux_masks: Sequence, cfg: LossConfig = LossConfig()) -> Var:
    """Dice on the prediction plus ``lam`` times the mean BCE of the auxiliary masks.

    With no auxiliary masks (pure baseline) the second term is absent.
    """
    loss = dice_loss(pred, gt, cfg.dice_smooth)
    if not aux_masks or cfg.lam == 0:
        return loss
    aux = None
    for m in aux_masks:
        term = bce_loss(m, gt, cfg.bce_eps)
        aux = term if aux is None else tc.add(aux, term)
    return tc.add(loss, tc.scale(aux, cfg.lam / len(aux_masks)))


# --- metrics -------------------------------------------------------------------


def binarize(m, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(m.value if isinstance(m, Var) else m) >= threshold


def inter_union(pred_bin, gt_bin) -> tuple[int, int]:
    p, g = np.asarray(pred_bin, dtype=bool), np.asarray(gt_bin, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred_bin, gt_bin) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    i, u = inter_union(pred_bin, gt_bin)
    return 1.0 if u == 0 else i / u


@dataclass
class EpisodeResult:
    fg_class: int
    fg_inter: int
    fg_union: int
    bg_inter: int
    bg_union: int

    @classmethod
    def from_masks(cls, fg_class: int, pred_bin, gt_bin) -> "EpisodeResult":
        p, g = np.asarray(pred_bin, dtype=bool), np.asarray(gt_bin, dtype=bool)
        fi, fu = inter_union(p, g)
        bi, bu = inter_union(~p, ~g)
        return cls(int(fg_class), fi, fu, bi, bu)


def per_class_iou(results: Iterable[EpisodeResult]) -> dict[int, float]:
    """FG IoU per class, aggregating intersections and unions over the class's episodes."""
    inter: dict[int, int] = defaultdict(int)
    union: dict[int, int] = defaultdict(int)
    for r in results:
        inter[r.fg_class] += r.fg_inter
        union[r.fg_class] += r.fg_union
    return {c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in sorted(inter)}


def miou(table) -> float:
    """Mean over classes; accepts a ``{class: IoU}`` table or a list of episode results."""
    if not isinstance(table, dict):
        table = per_class_iou(table)
    if not table:
        raise ValueError("no classes to average")
    return float(np.mean(list(table.values())))


def fb_iou(results: Iterable[EpisodeResult]) -> float:
    """Mean of aggregate FG IoU and aggregate BG IoU with all classes pooled as one FG."""
    fi = fu = bi = bu = 0
    for r in results:
        fi += r.fg_inter
        fu += r.fg_union
        bi += r.bg_inter
        bu += r.bg_union
    fg = 1.0 if fu == 0 else fi / fu
    bg = 1.0 if bu == 0 else bi / bu
    return 0.5 * (fg + bg)

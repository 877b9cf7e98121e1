"""Training objectives.

All losses are built from :mod:`levelseg.autodiff` primitives, so they take
plain arrays or tape ``Var`` inputs.  Sums run over the two trailing
(spatial) axes and over any leading batch axes as well.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import fields, maps
from .acm import heaviside
from .fields import PadMode

CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_main_dice: float = 1.0
    w_shape_dice: float = 0.5
    w_edge: float = 0.1
    edge_dice: float = 1.0
    edge_bce: float = 1.0
    consistency_tau: float = 1.0

    def __post_init__(self):
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0")
        if self.consistency_tau <= 0:
            raise ValueError("consistency_tau must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown LossWeights keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "LossWeights":
        return cls.from_dict(json.loads(text))


def _check(pred, gt):
    if np.shape(ad.value(pred)) != np.shape(ad.value(gt)):
        raise ValueError(f"dimension mismatch: {np.shape(ad.value(pred))} vs {np.shape(ad.value(gt))}")


def dice_loss(pred, gt, eps: float = 1e-7):
    """``1 - 2 sum(g p) / (sum g^2 + sum p^2 + eps)``."""
    _check(pred, gt)
    num = ad.scale(ad.ad_sum(gt * pred), 2.0)
    den = ad.ad_sum(ad.square(gt)) + ad.ad_sum(ad.square(pred)) + eps
    return 1.0 - ad.true_div(num, den)


def bce(prob, gt):
    """Mean binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    _check(prob, gt)
    p = ad.clip(prob, CLAMP, 1.0 - CLAMP)
    g = ad.value(gt)
    terms = g * ad.log(p) + (1.0 - g) * ad.log(1.0 - p)
    return ad.scale(ad.ad_mean(terms), -1.0)


def balanced_bce(pred, gt_edges):
    """Class-balanced edge cross entropy.

    ``-beta * sum_edges log p - (1 - beta) * sum_nonedges log(1 - p)`` with
    ``beta`` the fraction of non-edge pixels.
    """
    _check(pred, gt_edges)
    e = (np.asarray(ad.value(gt_edges)) > 0).astype(np.float64)
    beta = float((e.size - e.sum()) / e.size)
    p = ad.clip(pred, CLAMP, 1.0 - CLAMP)
    pos = ad.ad_sum(e * ad.log(p))
    neg = ad.ad_sum((1.0 - e) * ad.log(1.0 - p))
    return ad.scale(pos, -beta) + ad.scale(neg, -(1.0 - beta))


def edge_loss(pred_edges, gt_edges, w: LossWeights = LossWeights()):
    out = 0.0
    if w.edge_dice:
        out = out + ad.scale(dice_loss(pred_edges, gt_edges), w.edge_dice)
    if w.edge_bce:
        out = out + ad.scale(balanced_bce(pred_edges, gt_edges), w.edge_bce)
    return out


def consistency_loss(class_probs, gt_mask, tau: float = 1.0, noise=None,
                     pad: PadMode = PadMode.REPLICATE):
    """L1 mismatch of boundary strengths over the ground-truth edge set.

    The prediction side is :func:`levelseg.maps.soft_boundary`; the target
    side is the central-difference gradient magnitude of the mask.
    """
    g = (np.asarray(gt_mask) > 0).astype(np.float64)
    edges = maps.edge_gt(g, pad)
    if not edges.any():
        return _zero_like(class_probs)
    soft = maps.soft_boundary(class_probs, tau, noise, pad)
    target = _grad_mag(g, pad)
    return ad.ad_sum(edges * ad.absolute(soft - target))


def _grad_mag(g, pad):
    gx = fields.central_diff(g, "x", pad)
    gy = fields.central_diff(g, "y", pad)
    return np.sqrt(gx * gx + gy * gy)


def _zero_like(class_probs):
    # keep the result on the tape when the inputs are Vars
    return ad.scale(ad.ad_sum(class_probs[0]), 0.0)


def acm_bce(phi, gt, eps: float = 1.0):
    """Cross entropy of the smoothed interior indicator of ``phi`` against ``gt``."""
    _check(phi, gt)
    return bce(heaviside(phi, eps), gt)


def total_edge_network_loss(main_pred, shape_pred, y_true, s_true, w: LossWeights = LossWeights(),
                            class_probs=None, noise=None):
    """Weighted Dice on both streams plus balanced edge BCE on the shape stream.

    When ``class_probs`` is given the consistency term is added as well.
    """
    out = ad.scale(dice_loss(main_pred, y_true), w.w_main_dice)
    out = out + ad.scale(dice_loss(shape_pred, s_true), w.w_shape_dice)
    out = out + ad.scale(balanced_bce(shape_pred, s_true), w.w_edge)
    if class_probs is not None:
        out = out + consistency_loss(class_probs, y_true, w.consistency_tau, noise)
    return out


def dtac_total_loss(phi_n, cnn_prob, gt, eps: float = 1.0):
    """ACM output cross entropy plus backbone probability cross entropy."""
    return acm_bce(phi_n, gt, eps) + bce(cnn_prob, gt)

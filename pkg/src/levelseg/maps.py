"""Conversions between probability maps, signed distance maps, weight maps and edges."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import fields
from .fields import PadMode

SENTINEL = 1e9  # distance reported when there is no seed pixel at all
_INF = math.inf


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas ``(q - p)^2 + f[p]`` sampled at integer q.

    Pixels with ``f == inf`` contribute no parabola.
    """
    n = f.shape[0]
    sites = [p for p in range(n) if f[p] < _INF]
    out = np.full(n, _INF)
    if not sites:
        return out
    v = [sites[0]]
    z = [-_INF, _INF]
    for q in sites[1:]:
        while True:
            p = v[-1]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[-2]:
                v.pop()
                z.pop()
                if not v:
                    break
            else:
                break
        if not v:
            v.append(q)
            z[:] = [-_INF, _INF]
            continue
        v.append(q)
        z[-1] = s
        z.append(_INF)
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def _column_pass(seeds: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest seed in the same column (inf if none)."""
    h, w = seeds.shape
    out = np.full((h, w), _INF)
    idx = np.arange(h)
    for j in range(w):
        rows = np.flatnonzero(seeds[:, j])
        if rows.size == 0:
            continue
        # nearest seed row via searchsorted on the sorted seed rows
        pos = np.searchsorted(rows, idx)
        lo = rows[np.clip(pos - 1, 0, rows.size - 1)]
        hi = rows[np.clip(pos, 0, rows.size - 1)]
        d = np.minimum(np.abs(idx - lo), np.abs(idx - hi))
        out[:, j] = d.astype(np.float64) ** 2
    return out


def edt(mask) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest nonzero pixel.

    Separable: a per-column nearest-seed pass followed by a per-row lower
    envelope of parabolas.  If the mask has no nonzero pixel every distance
    is :data:`SENTINEL`.
    """
    seeds = np.asarray(mask) > 0
    if seeds.ndim != 2:
        raise fields.GridError("edt expects a single 2D mask")
    if not seeds.any():
        return np.full(seeds.shape, SENTINEL)
    cols = _column_pass(seeds)
    out = np.empty_like(cols)
    for i in range(cols.shape[0]):
        out[i] = _envelope_1d(cols[i])
    return np.sqrt(out)


def prob_to_sdm(prob, threshold: float = 0.5) -> np.ndarray:
    """Signed distance map, positive inside ``{prob > threshold}``.

    Interior pixels carry their distance to the nearest exterior pixel and
    exterior pixels minus their distance to the nearest interior pixel.
    """
    inside = np.asarray(prob) > threshold
    return np.where(inside, edt(~inside), -edt(inside))


def lambda_maps(prob):
    """Region weights from a foreground probability map.

    ``lambda1 = exp((2 - Y) / (1 + Y))``, ``lambda2 = exp((1 + Y) / (2 - Y))``.
    """
    y = np.asarray(prob, dtype=np.float64)
    return np.exp((2.0 - y) / (1.0 + y)), np.exp((1.0 + y) / (2.0 - y))


def edge_gt(mask, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Binary edge map: pixels with a nonzero Sobel response on the mask."""
    m = (np.asarray(mask) > 0).astype(np.float64)
    return (fields.sobel_magnitude(m, pad) > 0).astype(np.float64)


def soft_boundary(class_probs, tau: float, noise=None, pad: PadMode = PadMode.REPLICATE,
                  floor: float = 1e-7):
    """Differentiable boundary strength of the foreground class.

    A Gumbel-softmax over ``class_probs`` (a sequence of per-class grids,
    foreground last) with temperature ``tau`` and optional frozen noise,
    followed by the central-difference gradient magnitude of the
    foreground channel.  Probabilities are floored at ``floor`` before the
    log so that hard one-hot inputs stay finite.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    class_probs = list(class_probs)
    if len(class_probs) < 2:
        raise ValueError("need at least two classes")
    total = sum(ad.value(p) for p in class_probs)
    if np.max(np.abs(total - 1.0)) > 1e-5:
        raise ValueError("class probabilities must sum to 1 at every pixel")
    if noise is None:
        noise = [0.0] * len(class_probs)
    logits = [ad.scale(ad.log(ad.clip(p, floor, 1.0)) + g, 1.0 / tau)
              for p, g in zip(class_probs, noise)]
    # subtract the pointwise max logit for stability; it cancels in the ratio
    shift = np.max(np.stack([np.broadcast_to(ad.value(z), np.shape(ad.value(class_probs[0])))
                             for z in logits]), axis=0)
    expd = [ad.exp(z - shift) for z in logits]
    denom = expd[0]
    for e in expd[1:]:
        denom = denom + e
    fg = ad.true_div(expd[-1], denom)
    px = ad.central_diff(fg, "x", pad)
    py = ad.central_diff(fg, "y", pad)
    return ad.sqrt(ad.square(px) + ad.square(py))

"""Synthetic multi-instance scenes and brute-force reference implementations.

The ``oracle_*`` functions deliberately share no code with the modules they
are used to check: each one is the slow, obvious computation.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import deque
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .fields import write_pgm

MAX_ATTEMPTS = 1000
SHAPE_KINDS = ("rects", "disks", "blobs")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    n_instances: tuple = (1, 3)
    shape_kinds: tuple = ("rects",)
    fg_intensity: float = 0.8
    bg_intensity: float = 0.2
    noise_sigma: float = 0.05
    illumination_gradient: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_instances", tuple(self.n_instances))
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        lo, hi = self.n_instances
        if not 0 <= lo <= hi:
            raise ValueError("n_instances must be an increasing (min, max) range")
        if not self.shape_kinds or set(self.shape_kinds) - set(SHAPE_KINDS):
            raise ValueError(f"shape_kinds must be drawn from {SHAPE_KINDS}")
        if self.fg_intensity == self.bg_intensity:
            raise ValueError("foreground and background intensities must differ")
        for v in (self.fg_intensity, self.bg_intensity):
            if not 0.0 <= v <= 1.0:
                raise ValueError("intensities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.illumination_gradient < 0:
            raise ValueError("noise_sigma and illumination_gradient must be >= 0")
        if self.size < 8:
            raise ValueError("size must be >= 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_instances"] = list(self.n_instances)
        d["shape_kinds"] = list(self.shape_kinds)
        return d


def _shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one shape as a boolean mask of the full canvas (may touch nothing)."""
    yy, xx = np.mgrid[:size, :size]
    margin = 2
    if kind == "rects":
        h = int(rng.integers(size // 8, size // 3 + 1))
        w = int(rng.integers(size // 8, size // 3 + 1))
        top = int(rng.integers(margin, size - margin - h + 1))
        left = int(rng.integers(margin, size - margin - w + 1))
        m = np.zeros((size, size), dtype=bool)
        m[top:top + h, left:left + w] = True
        return m
    if kind == "disks":
        r = float(rng.uniform(size / 16, size / 6))
        cy = float(rng.uniform(margin + r, size - 1 - margin - r))
        cx = float(rng.uniform(margin + r, size - 1 - margin - r))
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # blobs: a few overlapping disks around a common centre
    r0 = float(rng.uniform(size / 16, size / 8))
    reach = 2.0 * r0
    cy = float(rng.uniform(margin + reach, size - 1 - margin - reach))
    cx = float(rng.uniform(margin + reach, size - 1 - margin - reach))
    m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r0 * r0
    for _ in range(int(rng.integers(2, 5))):
        ang = rng.uniform(0, 2 * math.pi)
        off = rng.uniform(0.3, 0.9) * r0
        r = rng.uniform(0.5, 1.0) * r0
        m |= (yy - cy - off * math.sin(ang)) ** 2 + (xx - cx - off * math.cos(ang)) ** 2 <= r * r
    return m


def _dilate8(m: np.ndarray) -> np.ndarray:
    p = np.pad(m, 1)
    out = np.zeros_like(m)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy:dy + m.shape[0], dx:dx + m.shape[1]]
    return out


def gen_scene(spec: SceneSpec):
    """Render ``(image, gt)`` for ``spec``; deterministic in ``spec.seed``.

    Instances never overlap or touch (not even diagonally).  If placement
    keeps failing the scene is returned with fewer instances and a
    ``RuntimeWarning`` is issued.
    """
    ss = np.random.SeedSequence(spec.seed)
    count_ss, shade_ss, noise_ss, place_ss = ss.spawn(4)
    n = spec.size
    lo, hi = spec.n_instances
    want = int(np.random.default_rng(count_ss).integers(lo, hi + 1))

    rng = np.random.default_rng(place_ss)
    gt = np.zeros((n, n), dtype=bool)
    placed = 0
    attempts = 0
    while placed < want and attempts < MAX_ATTEMPTS:
        attempts += 1
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        cand = _shape(kind, n, rng)
        if not cand.any() or (cand & _dilate8(gt)).any():
            continue
        gt |= cand
        placed += 1
    if placed < want:
        warnings.warn(f"placed only {placed} of {want} instances", RuntimeWarning, stacklevel=2)

    image = np.where(gt, spec.fg_intensity, spec.bg_intensity).astype(np.float64)
    if spec.illumination_gradient > 0:
        theta = np.random.default_rng(shade_ss).uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[:n, :n] / (n - 1.0)
        ramp = math.cos(theta) * xx + math.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12) - 0.5
        image = image + spec.illumination_gradient * ramp
    if spec.noise_sigma > 0:
        image = image + np.random.default_rng(noise_ss).normal(0.0, spec.noise_sigma, size=(n, n))
    return np.clip(image, 0.0, 1.0), gt.astype(np.float64)


def write_dataset(out_dir, count: int, spec: SceneSpec) -> list[Path]:
    """Write ``scene_%04d.pgm`` / ``scene_%04d_gt.pgm`` pairs and ``manifest.json``.

    Scene ``i`` uses seed ``spec.seed + i``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        s = SceneSpec(**{**spec.to_dict(), "seed": spec.seed + i})
        image, gt = gen_scene(s)
        p = out / f"scene_{i:04d}.pgm"
        write_pgm(p, image)
        write_pgm(out / f"scene_{i:04d}_gt.pgm", gt)
        paths.append(p)
    manifest = {"count": count, "spec": spec.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------------------
# oracles


def oracle_edt(mask) -> np.ndarray:
    """Nearest-seed distance by scanning every (pixel, seed) pair."""
    m = np.asarray(mask) > 0
    h, w = m.shape
    seeds = [(i, j) for i in range(h) for j in range(w) if m[i, j]]
    out = np.full((h, w), 1e9)
    if not seeds:
        return out
    for i in range(h):
        for j in range(w):
            best = min((i - a) ** 2 + (j - b) ** 2 for a, b in seeds)
            out[i, j] = math.sqrt(best)
    return out


def oracle_regions(mask, connectivity: int = 8) -> list[set]:
    """Breadth-first flood fill; returns the pixel set of each region."""
    m = np.asarray(mask) > 0
    h, w = m.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
    seen = np.zeros_like(m)
    regions = []
    for i in range(h):
        for j in range(w):
            if not m[i, j] or seen[i, j]:
                continue
            comp = set()
            queue = deque([(i, j)])
            seen[i, j] = True
            while queue:
                a, b = queue.popleft()
                comp.add((a, b))
                for da, db in steps:
                    y, x = a + da, b + db
                    if 0 <= y < h and 0 <= x < w and m[y, x] and not seen[y, x]:
                        seen[y, x] = True
                        queue.append((y, x))
            regions.append(comp)
    return regions


def oracle_wcov(gt, pred, connectivity: int = 8) -> float:
    rg = oracle_regions(gt, connectivity)
    ry = oracle_regions(pred, connectivity)
    if not rg:
        return 1.0 if not ry else 0.0
    total = sum(len(r) for r in rg)
    acc = 0.0
    for r in rg:
        best = 0.0
        for s in ry:
            best = max(best, len(r & s) / len(r | s))
        acc += len(r) * best
    return acc / total


def oracle_global_means(image, phi, eps: float):
    """Interior / exterior means weighted by the smoothed indicator, by direct sums."""
    image = np.asarray(image, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    num_in = den_in = num_out = den_out = 0.0
    for v, p in zip(image.ravel(), phi.ravel()):
        hv = 0.5 + math.atan(p / eps) / math.pi
        num_in += v * hv
        den_in += hv
        num_out += v * (1.0 - hv)
        den_out += 1.0 - hv
    return num_in / den_in, num_out / den_out


def _oracle_boundary_points(mask):
    m = np.asarray(mask) > 0
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for y, x in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if not (0 <= y < h and 0 <= x < w) or not m[y, x]:
                    pts.append((i, j))
                    break
    return pts


def _nearest(p, pts):
    return min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in pts)


def oracle_boundary_metrics(gt, pred):
    """``(boundf, hausdorff)`` from explicit boundary point-set scans."""
    bg = _oracle_boundary_points(gt)
    bp = _oracle_boundary_points(pred)
    if not bg or not bp:
        bf = 1.0 if (not bg and not bp) else 0.0
        return bf, -1.0
    d_pg = [_nearest(p, bg) for p in bp]
    d_gp = [_nearest(q, bp) for q in bg]
    scores = []
    for d in range(1, 6):
        prec = sum(x <= d for x in d_pg) / len(bp)
        rec = sum(x <= d for x in d_gp) / len(bg)
        scores.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    return sum(scores) / len(scores), max(max(d_pg), max(d_gp))

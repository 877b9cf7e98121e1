"""Dense 2D scalar fields and the stencil / pooling primitives built on them.

A grid is a float64 ``numpy.ndarray`` whose last two axes are (height, width).
Leading axes, when present, are treated as a batch and every operation acts
on each 2D slice independently.
"""

from __future__ import annotations

import enum
import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

ETA = 1e-8  # guard added to denominators

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1


class PadMode(enum.Enum):
    REPLICATE = "replicate"
    ZERO = "zero"


class GridError(ValueError):
    pass


def as_grid(values, dtype=np.float64) -> np.ndarray:
    g = np.asarray(values, dtype=dtype)
    if g.ndim < 2:
        raise GridError(f"expected at least 2 dimensions, got shape {g.shape}")
    if g.shape[-1] < 1 or g.shape[-2] < 1:
        raise GridError(f"empty grid of shape {g.shape}")
    return g


def _require(g: np.ndarray, min_size: int) -> None:
    if g.shape[-1] < min_size or g.shape[-2] < min_size:
        raise GridError("grid too small for stencil")


def _same_shape(g: np.ndarray, h: np.ndarray) -> None:
    if np.shape(g) != np.shape(h):
        raise GridError(f"dimension mismatch: {np.shape(g)} vs {np.shape(h)}")


# ---------------------------------------------------------------------------
# padding and its adjoint


def pad_grid(g: np.ndarray, width: int, mode: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Pad the two spatial axes of ``g`` by ``width`` on every side."""
    spec = [(0, 0)] * (g.ndim - 2) + [(width, width), (width, width)]
    if mode is PadMode.REPLICATE:
        return np.pad(g, spec, mode="edge")
    return np.pad(g, spec, mode="constant")


def pad_adjoint(gp: np.ndarray, width: int, mode: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Transpose of :func:`pad_grid`: fold the padded margin back onto the grid.

    Zero padding simply crops. Replicate padding sends every margin value to
    the edge pixel it was copied from.
    """
    if width == 0:
        return gp.copy()
    if mode is PadMode.ZERO:
        return gp[..., width:-width, width:-width].copy()
    g = gp.copy()
    # rows first: collapse top and bottom margins onto the first/last kept row
    g[..., width, :] += g[..., :width, :].sum(axis=-2)
    g[..., -width - 1, :] += g[..., -width:, :].sum(axis=-2)
    g = g[..., width:-width, :]
    g[..., :, width] += g[..., :, :width].sum(axis=-1)
    g[..., :, -width - 1] += g[..., :, -width:].sum(axis=-1)
    return g[..., :, width:-width].copy()


# ---------------------------------------------------------------------------
# 1D stencils along an axis


def _axis_index(axis: str) -> int:
    if axis == "x":
        return -1
    if axis == "y":
        return -2
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def _pad_axis(g: np.ndarray, ax: int, width: int, mode: PadMode) -> np.ndarray:
    spec = [(0, 0)] * g.ndim
    spec[ax] = (width, width)
    return np.pad(g, spec, mode="edge" if mode is PadMode.REPLICATE else "constant")


def _pad_axis_adjoint(gp: np.ndarray, ax: int, width: int, mode: PadMode) -> np.ndarray:
    n = gp.shape[ax] - 2 * width
    idx = [slice(None)] * gp.ndim
    idx[ax] = slice(width, width + n)
    core = gp[tuple(idx)].copy()
    if mode is PadMode.REPLICATE:
        idx[ax] = slice(0, width)
        lo = gp[tuple(idx)].sum(axis=ax)
        idx[ax] = slice(width + n, None)
        hi = gp[tuple(idx)].sum(axis=ax)
        first = [slice(None)] * gp.ndim
        last = [slice(None)] * gp.ndim
        first[ax] = 0
        last[ax] = n - 1
        core[tuple(first)] += lo
        core[tuple(last)] += hi
    return core


def stencil(g: np.ndarray, axis: str, weights, mode: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Correlate ``g`` along one spatial axis with an odd-length 1D kernel."""
    ax = _axis_index(axis)
    weights = tuple(float(w) for w in weights)
    r = len(weights) // 2
    n = g.shape[ax]
    gp = _pad_axis(g, ax, r, mode)
    out = np.zeros_like(g, dtype=np.float64)
    idx = [slice(None)] * g.ndim
    for k, w in enumerate(weights):
        if w != 0.0:
            idx[ax] = slice(k, k + n)
            out += w * gp[tuple(idx)]
    return out


def stencil_adjoint(grad: np.ndarray, axis: str, weights, mode: PadMode = PadMode.REPLICATE) -> np.ndarray:
    ax = _axis_index(axis)
    weights = tuple(float(w) for w in weights)
    r = len(weights) // 2
    n = grad.shape[ax]
    shape = list(grad.shape)
    shape[ax] = n + 2 * r
    gp = np.zeros(shape)
    for k, w in enumerate(weights):
        if w != 0.0:
            idx = [slice(None)] * grad.ndim
            idx[ax] = slice(k, k + n)
            gp[tuple(idx)] += w * grad
    return _pad_axis_adjoint(gp, ax, r, mode)


CENTRAL = (-0.5, 0.0, 0.5)
SECOND = (1.0, -2.0, 1.0)


def central_diff(g: np.ndarray, axis: str, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Central difference ``(g[k+1] - g[k-1]) / 2`` along ``axis`` ('x' = columns)."""
    g = as_grid(g)
    _require(g, 2)
    return stencil(g, axis, CENTRAL, pad)


def second_diffs(g: np.ndarray, pad: PadMode = PadMode.REPLICATE):
    """Return ``(gxx, gyy, gxy)``.

    ``gxx`` and ``gyy`` use the 3-point second difference; ``gxy`` is the
    central difference applied along x and then along y.
    """
    g = as_grid(g)
    _require(g, 3)
    gxx = stencil(g, "x", SECOND, pad)
    gyy = stencil(g, "y", SECOND, pad)
    gxy = stencil(stencil(g, "x", CENTRAL, pad), "y", CENTRAL, pad)
    return gxx, gyy, gxy


# ---------------------------------------------------------------------------
# box pooling


_SCIPY_MODE = {PadMode.REPLICATE: "nearest", PadMode.ZERO: "constant"}


def _window_sum(g: np.ndarray, k: int, mode: PadMode) -> np.ndarray:
    """Sum over the k x k window centred on each pixel, ``mode`` filling the margin."""
    m = _SCIPY_MODE[mode]
    out = uniform_filter1d(g, k, axis=-1, mode=m)
    out = uniform_filter1d(out, k, axis=-2, mode=m)
    return out * float(k * k)


def box_sum(g: np.ndarray, f: int, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Sum of ``g`` over the (2f+1) x (2f+1) window centred on each pixel."""
    if f < 0:
        raise ValueError("window half-size must be >= 0")
    g = as_grid(g)
    if f == 0:
        return g.copy()
    return _window_sum(g, 2 * f + 1, pad)


def box_sum_adjoint(grad: np.ndarray, f: int, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    if f == 0:
        return grad.copy()
    # spread each output back over its window on the padded domain, then fold the margin
    spread = _window_sum(pad_grid(grad, f, PadMode.ZERO), 2 * f + 1, PadMode.ZERO)
    return pad_adjoint(spread, f, pad)


def box_mean(g: np.ndarray, f: int, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    """Mean of ``g`` over the (2f+1) x (2f+1) window centred on each pixel.

    Out-of-grid pixels are supplied by ``pad``; the divisor is always the
    full window area.
    """
    if f == 0:
        return as_grid(g).copy()
    return box_sum(g, f, pad) / float((2 * f + 1) ** 2)


def box_mean_adjoint(grad: np.ndarray, f: int, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    if f == 0:
        return grad.copy()
    return box_sum_adjoint(grad, f, pad) / float((2 * f + 1) ** 2)


# ---------------------------------------------------------------------------
# Sobel

_SOBEL_SMOOTH = (1.0, 2.0, 1.0)
_SOBEL_DIFF = (-1.0, 0.0, 1.0)


def sobel_magnitude(g: np.ndarray, pad: PadMode = PadMode.REPLICATE) -> np.ndarray:
    g = as_grid(g)
    _require(g, 3)
    sx = stencil(stencil(g, "x", _SOBEL_DIFF, pad), "y", _SOBEL_SMOOTH, pad)
    sy = stencil(stencil(g, "y", _SOBEL_DIFF, pad), "x", _SOBEL_SMOOTH, pad)
    return np.sqrt(sx * sx + sy * sy)


# ---------------------------------------------------------------------------
# pointwise


def add(g, h):
    _same_shape(g, h)
    return np.add(g, h, dtype=np.float64)


def sub(g, h):
    _same_shape(g, h)
    return np.subtract(g, h, dtype=np.float64)


def mul(g, h):
    _same_shape(g, h)
    return np.multiply(g, h, dtype=np.float64)


def div(g, h, eta: float = ETA):
    """``g / (h + eta)``."""
    _same_shape(g, h)
    return np.divide(g, np.add(h, eta, dtype=np.float64))


def elementwise(g, h, op: str, eta: float = ETA):
    ops = {"add": add, "sub": sub, "mul": mul}
    if op == "div":
        return div(g, h, eta)
    try:
        return ops[op](g, h)
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None


def map_grid(g, fn):
    return np.asarray(fn(as_grid(g)), dtype=np.float64)


# ---------------------------------------------------------------------------
# I/O


def write_fgrd(path, g: np.ndarray) -> None:
    g = as_grid(g)
    if g.ndim != 2:
        raise GridError("FGRD holds a single 2D grid")
    h, w = g.shape
    header = FGRD_MAGIC + struct.pack("<BII", FGRD_VERSION, h, w)
    Path(path).write_bytes(header + fgrd_payload(g))


def fgrd_payload(g: np.ndarray) -> bytes:
    return np.ascontiguousarray(g, dtype="<f4").tobytes()


def fgrd_block(g: np.ndarray) -> bytes:
    h, w = g.shape
    return FGRD_MAGIC + struct.pack("<BII", FGRD_VERSION, h, w) + fgrd_payload(g)


def parse_fgrd(buf: bytes, offset: int = 0):
    """Decode one FGRD block starting at ``offset``; return (grid, next_offset)."""
    if buf[offset:offset + 4] != FGRD_MAGIC:
        raise GridError("not an FGRD block")
    if len(buf) < offset + 13:
        raise GridError("truncated FGRD header")
    version, h, w = struct.unpack_from("<BII", buf, offset + 4)
    if version != FGRD_VERSION:
        raise GridError(f"unsupported FGRD version {version}")
    start = offset + 13
    end = start + 4 * h * w
    if len(buf) < end:
        raise GridError("truncated FGRD payload")
    g = np.frombuffer(buf[start:end], dtype="<f4").reshape(h, w).astype(np.float64)
    return g, end


def read_fgrd(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    g, end = parse_fgrd(buf)
    if end != len(buf):
        raise GridError("trailing bytes after FGRD payload")
    return g


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (maxval 255) as a grid scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GridError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise GridError("only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise GridError("PGM maxval must be 255")
    pos += 1  # single whitespace after maxval
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise GridError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, g: np.ndarray) -> None:
    g = as_grid(g)
    h, w = g.shape
    u8 = np.clip(np.rint(np.asarray(g) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + u8.tobytes())


def read_grid(path) -> np.ndarray:
    """Load FGRD or PGM by sniffing the magic bytes."""
    head = Path(path).read_bytes()[:4]
    if head == FGRD_MAGIC:
        return read_fgrd(path)
    if head[:2] == b"P5":
        return read_pgm(path)
    raise GridError(f"{path}: unrecognised grid format")


def read_mask(path) -> np.ndarray:
    """Load a mask; PGM masks binarise at > 127, FGRD masks at > 0.5."""
    head = Path(path).read_bytes()[:4]
    if head[:2] == b"P5":
        g = read_pgm(path)
        return (np.rint(g * 255.0) > 127).astype(np.float64)
    return (read_grid(path) > 0.5).astype(np.float64)

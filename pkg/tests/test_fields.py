import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from levelseg import fields
from levelseg.fields import PadMode

grids = arrays(
    np.float64,
    st.tuples(st.integers(3, 9), st.integers(3, 9)),
    elements=st.floats(-10, 10, allow_nan=False),
)


def test_central_diff_constant_is_zero():
    g = np.full((5, 6), 3.0)
    assert np.all(fields.central_diff(g, "x") == 0)
    assert np.all(fields.central_diff(g, "y") == 0)


def test_central_diff_ramp_replicate():
    g = np.tile(np.arange(6.0), (4, 1))  # g(i, j) = j
    d = fields.central_diff(g, "x", PadMode.REPLICATE)
    assert np.all(d[:, 1:-1] == 1.0)
    assert np.all(d[:, 0] == 0.5)
    assert np.all(d[:, -1] == 0.5)


def test_central_diff_exact_on_quadratic():
    j = np.arange(5.0)
    g = (j ** 2)[None, :]
    g = np.vstack([g, g])  # 2 x 5 keeps the stencil legal along y as well
    d = fields.central_diff(g, "x")
    assert np.array_equal(d[0, 1:-1], 2 * j[1:-1])


def test_central_diff_y_is_transpose_of_x():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(5, 7))
    assert np.allclose(fields.central_diff(g, "y"), fields.central_diff(g.T, "x").T)


def test_too_small_for_stencil():
    with pytest.raises(fields.GridError, match="too small"):
        fields.central_diff(np.zeros((1, 5)), "x")
    with pytest.raises(fields.GridError, match="too small"):
        fields.second_diffs(np.zeros((2, 5)))
    with pytest.raises(fields.GridError, match="too small"):
        fields.sobel_magnitude(np.zeros((2, 2)))


def test_second_diffs_plane_is_zero_inside():
    i, j = np.mgrid[:6, :7].astype(float)
    gxx, gyy, gxy = fields.second_diffs(2 * j - 3 * i)
    for d in (gxx, gyy):
        assert np.allclose(d[1:-1, 1:-1], 0)
    assert np.allclose(gxy[2:-2, 2:-2], 0)


def test_second_diffs_exact_values():
    i, j = np.mgrid[:6, :7].astype(float)
    gxx, _, _ = fields.second_diffs(j ** 2)
    assert np.all(gxx[:, 1:-1] == 2.0)
    _, _, gxy = fields.second_diffs(i * j)
    assert np.all(gxy[2:-2, 2:-2] == 1.0)


def test_box_mean_identities():
    g = np.full((6, 5), 2.5)
    assert np.allclose(fields.box_mean(g, 2), g)
    rng = np.random.default_rng(1)
    r = rng.normal(size=(4, 4))
    assert np.array_equal(fields.box_mean(r, 0), r)


def test_box_mean_impulse_zero_pad():
    g = np.zeros((7, 7))
    g[3, 3] = 1.0
    out = fields.box_mean(g, 1, PadMode.ZERO)
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = 1.0 / 9.0
    assert np.allclose(out, expected, atol=1e-15)


def test_box_mean_full_window_is_global_mean():
    rng = np.random.default_rng(2)
    g = rng.uniform(size=(7, 9))
    out = fields.box_mean(g, 8, PadMode.ZERO)
    # the zero-padded window holds all pixels plus zeros; rescale by the window area
    assert out[3, 4] * (17 ** 2) / g.size == pytest.approx(g.mean(), abs=1e-12)


def test_box_mean_negative_window():
    with pytest.raises(ValueError):
        fields.box_mean(np.zeros((3, 3)), -1)


def test_sobel_constant_and_step():
    assert np.all(fields.sobel_magnitude(np.full((5, 5), 4.0)) == 0)
    m = np.zeros((5, 5))
    m[:, 3:] = 1.0  # step between columns 2 and 3
    s = fields.sobel_magnitude(m)
    nonzero_cols = np.flatnonzero(np.any(s != 0, axis=0))
    assert list(nonzero_cols) == [2, 3]


@given(grids)
def test_sobel_rotation_covariant(g):
    assert np.allclose(fields.sobel_magnitude(np.rot90(g)), np.rot90(fields.sobel_magnitude(g)))


def test_elementwise_identities():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(3, 4))
    assert np.array_equal(fields.elementwise(g, np.zeros_like(g), "add"), g)
    assert np.array_equal(fields.elementwise(g, np.ones_like(g), "mul"), g)
    out = fields.elementwise(np.ones((2, 2)), np.zeros((2, 2)), "div", eta=1e-8)
    assert np.allclose(out, 1e8)
    assert np.all(np.isfinite(out))


def test_elementwise_dimension_mismatch():
    with pytest.raises(fields.GridError, match="mismatch"):
        fields.add(np.zeros((2, 2)), np.zeros((2, 3)))


# -- invariants ------------------------------------------------------------


@given(grids, st.integers(0, 4))
def test_box_mean_within_bounds(g, f):
    out = fields.box_mean(g, f, PadMode.REPLICATE)
    tol = 1e-9 * (1 + np.abs(g).max())
    assert np.all(out >= g.min() - tol)
    assert np.all(out <= g.max() + tol)


@given(grids, grids, st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=50)
def test_difference_operators_are_linear(g, h, a, b):
    if g.shape != h.shape:
        h = np.resize(h, g.shape)
    combo = a * g + b * h
    for mode in PadMode:
        for axis in ("x", "y"):
            lhs = fields.central_diff(combo, axis, mode)
            rhs = a * fields.central_diff(g, axis, mode) + b * fields.central_diff(h, axis, mode)
            assert np.allclose(lhs, rhs, atol=1e-9)
        for lhs, dg, dh in zip(fields.second_diffs(combo, mode), fields.second_diffs(g, mode),
                               fields.second_diffs(h, mode)):
            assert np.allclose(lhs, a * dg + b * dh, atol=1e-9)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_central_diff_exact_on_quadratics(a, b, c, d, e):
    i, j = np.mgrid[:6, :7].astype(float)
    g = a * j ** 2 + b * i * j + c * i ** 2 + d * j + e
    dx = fields.central_diff(g, "x")
    dy = fields.central_diff(g, "y")
    assert np.allclose(dx[:, 1:-1], (2 * a * j + b * i + d)[:, 1:-1], atol=1e-9)
    assert np.allclose(dy[1:-1, :], (b * j + 2 * c * i)[1:-1, :], atol=1e-9)


@pytest.mark.parametrize("mode", list(PadMode))
@pytest.mark.parametrize("width", [1, 2, 5])
def test_pad_adjoint_is_transpose(mode, width):
    rng = np.random.default_rng(width)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(4 + 2 * width, 3 + 2 * width))
    lhs = np.sum(fields.pad_grid(x, width, mode) * y)
    rhs = np.sum(x * fields.pad_adjoint(y, width, mode))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("mode", list(PadMode))
def test_box_and_stencil_adjoints(mode):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5, 6))
    y = rng.normal(size=(2, 5, 6))
    for f in (0, 1, 3, 7):
        assert np.sum(fields.box_sum(x, f, mode) * y) == pytest.approx(
            np.sum(x * fields.box_sum_adjoint(y, f, mode)), rel=1e-10)
    for axis in ("x", "y"):
        for w in (fields.CENTRAL, fields.SECOND, (1.0, 2.0, 3.0, 4.0, 5.0)):
            assert np.sum(fields.stencil(x, axis, w, mode) * y) == pytest.approx(
                np.sum(x * fields.stencil_adjoint(y, axis, w, mode)), rel=1e-10)


def test_batched_grids_act_per_slice():
    rng = np.random.default_rng(4)
    b = rng.normal(size=(3, 6, 5))
    out = fields.box_mean(b, 2)
    for k in range(3):
        assert np.array_equal(out[k], fields.box_mean(b[k], 2))


# -- file formats ----------------------------------------------------------


def test_fgrd_round_trip_and_layout(tmp_path):
    g = np.arange(6, dtype=np.float64).reshape(2, 3) / 4
    p = tmp_path / "g.fgrd"
    fields.write_fgrd(p, g)
    raw = p.read_bytes()
    assert raw[:4] == b"FGRD"
    assert raw[4] == 1
    assert int.from_bytes(raw[5:9], "little") == 2
    assert int.from_bytes(raw[9:13], "little") == 3
    assert len(raw) == 13 + 4 * 6
    assert np.array_equal(fields.read_fgrd(p), g)


def test_fgrd_rejects_garbage(tmp_path):
    p = tmp_path / "bad.fgrd"
    p.write_bytes(b"FGRD\x02" + b"\x00" * 8)
    with pytest.raises(fields.GridError):
        fields.read_fgrd(p)


def test_pgm_round_trip_and_mask_threshold(tmp_path):
    p = tmp_path / "m.pgm"
    raw = np.array([[0, 127, 128], [255, 10, 200]], dtype=np.uint8)
    p.write_bytes(b"P5\n# comment\n3 2\n255\n" + raw.tobytes())
    g = fields.read_pgm(p)
    assert g.shape == (2, 3)
    assert g[1, 0] == 1.0
    m = fields.read_mask(p)
    assert m.tolist() == [[0, 0, 1], [1, 0, 1]]
    q = tmp_path / "out.pgm"
    fields.write_pgm(q, g)
    assert np.array_equal(fields.read_pgm(q), g)

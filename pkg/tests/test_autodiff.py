import math

import numpy as np
import pytest

from levelseg import autodiff as ad
from levelseg import fields
from levelseg.fields import PadMode


def grad_of(fn, *arrays):
    tape = ad.Tape()
    xs = [tape.var(a) for a in arrays]
    grads = tape.backward(fn(*xs))
    return [grads[x] for x in xs]


def test_forward_matches_eager_bitwise():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 6))
    b = rng.normal(size=(5, 6))
    tape = ad.Tape()
    x, y = tape.var(a), tape.var(b)
    assert np.array_equal(ad.add(x, y).value, fields.add(a, b))
    assert np.array_equal(ad.sub(x, y).value, fields.sub(a, b))
    assert np.array_equal(ad.mul(x, y).value, fields.mul(a, b))
    assert np.array_equal(ad.div(x, y).value, fields.div(a, b))
    for mode in PadMode:
        assert np.array_equal(ad.central_diff(x, "y", mode).value, fields.central_diff(a, "y", mode))
        assert np.array_equal(ad.box_mean(x, 2, mode).value, fields.box_mean(a, 2, mode))
        for tv, ev in zip(ad.second_diffs(x, mode), fields.second_diffs(a, mode)):
            assert np.array_equal(tv.value, ev)


def test_eager_path_returns_arrays():
    out = ad.mul(np.ones((2, 2)), 3.0)
    assert isinstance(out, np.ndarray)
    assert np.all(out == 3.0)


def test_quadratic_gradient():
    (g,) = grad_of(lambda x: ad.ad_sum(x * x), np.full((3, 4), 1.5))
    assert np.all(g == 3.0)


def test_sum_gradient_is_ones():
    (g,) = grad_of(ad.ad_sum, np.random.default_rng(1).normal(size=(4, 4)))
    assert np.all(g == 1.0)


def test_bilinear_gradient():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ga, gb = grad_of(lambda x, y: ad.ad_sum(x * y), a, b)
    assert np.array_equal(ga, b)
    assert np.array_equal(gb, a)


def test_box_mean_gradient_counts_windows():
    (g,) = grad_of(lambda x: ad.ad_sum(ad.box_mean(x, 1, PadMode.ZERO)), np.zeros((6, 6)))
    assert np.allclose(g[1:-1, 1:-1], 1.0)
    assert g[0, 0] == pytest.approx(4 / 9)
    assert g[0, 2] == pytest.approx(6 / 9)


def test_unreachable_leaf_gets_zero():
    tape = ad.Tape()
    x = tape.var(np.ones((2, 2)))
    y = tape.var(np.ones((2, 2)))
    grads = tape.backward(ad.ad_sum(x))
    assert np.all(grads[y] == 0)


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.var(np.ones((2, 2)))
    with pytest.raises(ad.TapeError, match="scalar"):
        tape.backward(x * 2.0)


def test_mixing_tapes_is_an_error():
    x = ad.Tape().var(np.ones((2, 2)))
    y = ad.Tape().var(np.ones((2, 2)))
    with pytest.raises(ad.TapeError):
        ad.add(x, y)


def test_gradient_lookup_from_other_tape():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.var(np.ones(2))
    z = t2.var(np.ones(2))
    grads = t1.backward(ad.ad_sum(x))
    with pytest.raises(ad.TapeError):
        grads[z]


def test_broadcast_gradient_reduces():
    # scalar times grid: gradient of the scalar is the grid sum
    gs, gx = grad_of(lambda s, x: ad.ad_sum(s * x), np.array(2.0), np.arange(6.0).reshape(2, 3))
    assert gs == pytest.approx(15.0)
    assert np.all(gx == 2.0)


def test_relu_subgradient_zero_at_kink():
    (g,) = grad_of(lambda x: ad.ad_sum(ad.relu(x)), np.array([[-1.0, 0.0, 2.0]]))
    assert g.tolist() == [[0.0, 0.0, 1.0]]


def test_sqrt_gradient_zero_at_zero():
    (g,) = grad_of(lambda x: ad.ad_sum(ad.sqrt(x)), np.array([[0.0, 4.0]]))
    assert g.tolist() == [[0.0, 0.25]]


def test_grad_check_scalar_program():
    err = ad.grad_check(lambda t: ad.square(t), [np.array(3.0)], h=1e-4)
    assert err < 1e-6


def test_grad_check_dice_of_sigmoid():
    from levelseg.losses import dice_loss

    rng = np.random.default_rng(3)
    mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    x = rng.normal(size=(8, 8))
    err = ad.grad_check(lambda z: dice_loss(ad.sigmoid(z), mask), [x], h=1e-3)
    assert err < 1e-4


def test_grad_check_detects_a_wrong_adjoint(monkeypatch):
    # sanity: a deliberately broken adjoint must be caught
    def bad_tanh(x):
        xv = ad.value(x)
        out = np.tanh(xv)
        return ad._record(out, (x,), lambda g: (g * 2.0,))

    err = ad.grad_check(lambda z: ad.ad_sum(bad_tanh(z)), [np.full((3, 3), 0.3)])
    assert err > 0.1


# -- per-primitive finite-difference sweep -----------------------------------

_rng = np.random.default_rng(11)
_A = _rng.normal(size=(6, 7))
_B = _rng.normal(size=(6, 7))
_POS = _rng.uniform(0.5, 2.0, size=(6, 7))

PRIMITIVES = {
    "add": (lambda x, y: ad.add(x, y), [_A, _B]),
    "sub": (lambda x, y: ad.sub(x, y), [_A, _B]),
    "mul": (lambda x, y: ad.mul(x, y), [_A, _B]),
    "div": (lambda x, y: ad.div(x, y), [_A, _POS]),
    "true_div": (lambda x, y: ad.true_div(x, y), [_A, _POS]),
    "scale": (lambda x: ad.scale(x, -2.5), [_A]),
    "exp": (lambda x: ad.exp(x), [_A]),
    "log": (lambda x: ad.log(x), [_POS]),
    "tanh": (lambda x: ad.tanh(x), [_A]),
    "sigmoid": (lambda x: ad.sigmoid(x), [_A]),
    "relu": (lambda x: ad.relu(x), [_A]),
    "arctan": (lambda x: ad.arctan(x), [_A]),
    "abs": (lambda x: ad.absolute(x), [_A]),
    "sqrt": (lambda x: ad.sqrt(x), [_POS]),
    "square": (lambda x: ad.square(x), [_A]),
    "power": (lambda x: ad.power(x, 1.5), [_POS]),
    "clip": (lambda x: ad.clip(x, -0.5, 0.5), [_A]),
    "getitem": (lambda x: x[1:4, ::2], [_A]),
    "reshape": (lambda x: ad.reshape(x, (7, 6)), [_A]),
    "mean": (lambda x: ad.ad_mean(x, axis=0), [_A]),
    "spatial_sum": (lambda x: ad.spatial_sum(x) * _B, [_A]),
    "central_diff_x_rep": (lambda x: ad.central_diff(x, "x", PadMode.REPLICATE), [_A]),
    "central_diff_y_zero": (lambda x: ad.central_diff(x, "y", PadMode.ZERO), [_A]),
    "second_diffs": (lambda x: sum(d * (k + 1.0) for k, d in enumerate(ad.second_diffs(x))), [_A]),
    "box_mean_rep": (lambda x: ad.box_mean(x, 2, PadMode.REPLICATE), [_A]),
    "box_mean_zero": (lambda x: ad.box_mean(x, 1, PadMode.ZERO), [_A]),
    "box_sum_big": (lambda x: ad.box_sum(x, 9, PadMode.REPLICATE), [_A]),
    "conv3x3_zero": (lambda x, k: ad.conv3x3(x, k, PadMode.ZERO),
                     [_rng.normal(size=(2, 5, 6)), _rng.normal(size=(3, 2, 3, 3))]),
    "conv3x3_rep_batched": (lambda x, k: ad.conv3x3(x, k, PadMode.REPLICATE),
                            [_rng.normal(size=(2, 1, 5, 4)), _rng.normal(size=(2, 1, 3, 3))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_matches_finite_differences(name):
    fn, leaves = PRIMITIVES[name]
    # a fixed random weighting makes every output coordinate matter
    w = np.random.default_rng(len(name)).normal(size=np.shape(ad.value(fn(*leaves))))
    err = ad.grad_check(lambda *xs: ad.ad_sum(fn(*xs) * w), leaves, h=1e-3, n_samples=64)
    assert err < 1e-4, name


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(5, 5))

    def l1(x):
        return ad.ad_sum(ad.tanh(ad.box_mean(x, 1)))

    def l2(x):
        return ad.ad_sum(ad.square(ad.central_diff(x, "x")))

    (g1,) = grad_of(l1, a)
    (g2,) = grad_of(l2, a)
    (g12,) = grad_of(lambda x: 2.0 * l1(x) - 3.0 * l2(x), a)
    assert np.allclose(g12, 2.0 * g1 - 3.0 * g2, atol=1e-12)


def test_replay_determinism():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(6, 6))

    def prog(x):
        return ad.ad_sum(ad.arctan(ad.box_mean(x * x, 2)) * ad.central_diff(x, "y"))

    (g1,) = grad_of(prog, a)
    (g2,) = grad_of(prog, a)
    assert np.array_equal(g1, g2)


def test_tape_ids_are_topological():
    tape = ad.Tape()
    x = tape.var(np.ones((3, 3)))
    y = ad.exp(x)
    z = ad.add(y, x)
    assert x.id < y.id < z.id
    assert len(tape) == 3
    assert all(p is None or p < i for i, ps in enumerate(tape._parents) for p in ps)


def test_ndarray_left_operand_defers_to_var():
    tape = ad.Tape()
    x = tape.var(np.ones((2, 2)))
    out = np.full((2, 2), 2.0) * x
    assert isinstance(out, ad.Var)
    assert math.isclose(float(tape.backward(ad.ad_sum(out))[x].sum()), 8.0)

"""MLP forward/backward, Adam, finite-difference harness."""

import numpy as np
import pytest

from coldbundle.errors import ContractError, DivergenceError, ShapeError
from coldbundle.nn import Adam, Mlp, _sigmoid, finite_diff_check, silu, silu_grad
from coldbundle.rng import Rng


def test_sigmoid_stable():
    x = np.array([-1000.0, 0.0, 1000.0])
    s = _sigmoid(x)
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0], atol=1e-12)


def test_silu_grad_matches_fd():
    x = np.linspace(-3, 3, 50)
    h = 1e-6
    fd = (silu(x + h) - silu(x - h)) / (2 * h)
    np.testing.assert_allclose(silu_grad(x), fd, atol=1e-8)


def test_mlp_shapes_and_chaining():
    net = Mlp.create([5, 8, 3], Rng(0))
    out, tape = net.forward(np.ones((4, 5)))
    assert out.shape == (4, 3)
    with pytest.raises(ShapeError):
        net.forward(np.ones((4, 6)))
    with pytest.raises(ContractError):
        net.forward(np.full((1, 5), np.nan))


def test_mlp_gradcheck():
    rng = Rng(1)
    net = Mlp.create([4, 6, 2], rng)
    x = rng.normal((3, 4))
    target = rng.normal((3, 2))

    def loss_fn():
        out, _ = net.forward(x)
        return float(np.sum((out - target) ** 2))

    out, tape = net.forward(x)
    grads, gx = net.backward(tape, 2.0 * (out - target))
    report = finite_diff_check(loss_fn, net.params(), grads)
    assert report["max_rel_err"] < 1e-6

    # input gradient against finite differences
    h = 1e-6
    for j in range(x.size):
        orig = x.ravel()[j]
        x.ravel()[j] = orig + h
        lp = loss_fn()
        x.ravel()[j] = orig - h
        lm = loss_fn()
        x.ravel()[j] = orig
        assert abs(gx.ravel()[j] - (lp - lm) / (2 * h)) < 1e-5


def test_adam_matches_reference():
    # one parameter, two steps, hand-rolled reference
    p = np.array([1.0, -2.0])
    ref = p.copy()
    opt = Adam([p], lr=0.1)
    m = np.zeros(2)
    v = np.zeros(2)
    for t in (1, 2):
        g = ref * 2.0  # pretend loss p^2 at the reference point
        opt.step([p], [p * 2.0])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, atol=1e-12)


def test_adam_decay_mask():
    p = np.array([[1.0], [1.0]])
    opt = Adam([p], lr=0.0, weight_decay=0.5)
    # lr 0 means decay term is also zero (decoupled decay scales with lr)
    opt.step([p], [np.zeros_like(p)])
    np.testing.assert_array_equal(p, [[1.0], [1.0]])
    p2 = np.array([[1.0], [1.0]])
    opt2 = Adam([p2], lr=0.1, weight_decay=0.5)
    mask = np.array([[1.0], [0.0]])
    opt2.step([p2], [np.zeros_like(p2)], decay_masks=[mask])
    assert p2[0, 0] < 1.0 and p2[1, 0] == 1.0


def test_adam_rejects_bad_grads():
    p = np.zeros(3)
    opt = Adam([p], lr=0.1)
    with pytest.raises(ShapeError):
        opt.step([p], [np.zeros(4)])
    with pytest.raises(DivergenceError):
        opt.step([p], [np.array([np.nan, 0.0, 0.0])])


def test_finite_diff_check_h_bounds():
    with pytest.raises(ContractError):
        finite_diff_check(lambda: 0.0, [np.zeros(1)], [np.zeros(1)], h=1.0)

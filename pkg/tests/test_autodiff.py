from __future__ import annotations

import numpy as np
import pytest

from modsurgery.autodiff import Tensor, concat_cols, constant, leaf, logsumexp_rows


def _fd_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * h)
    return g


def _check(build, shape, seed, h=1e-6, tol=1e-7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    t = leaf(x)
    build(t).backward()
    fd = _fd_grad(lambda arr: float(build(Tensor(arr)).data), x, h)
    assert t.grad is not None
    np.testing.assert_allclose(t.grad, fd, rtol=1e-5, atol=tol)


def test_matmul_chain_gradient():
    rng = np.random.default_rng(0)
    w2 = rng.normal(size=(4, 2))

    def build(t):
        return ((t @ constant(w2)).tanh()).sum()

    _check(build, (3, 4), seed=1)


def test_broadcast_add_and_mul_gradient():
    rng = np.random.default_rng(2)
    bias = rng.normal(size=3)

    def build(t):
        return ((t + constant(bias)) * constant(2.5)).square().sum()

    _check(build, (5, 3), seed=3)


def test_mean_axis_and_sub_gradient():
    def build(t):
        centered = t - t.mean(axis=0)
        return centered.square().sum(axis=1).mean()

    _check(build, (6, 4), seed=4)


def test_relu_log_exp_gradient():
    def build(t):
        return (t.square() + constant(1.0)).log().exp().relu().sum()

    _check(build, (4, 3), seed=5)


def test_take_rows_scatter_gradient():
    rows = np.array([2, 0, 2])

    def build(t):
        return t.take_rows(rows).square().sum()

    _check(build, (4, 3), seed=6)


def test_diag_and_transpose_gradient():
    rng = np.random.default_rng(7)
    other = rng.normal(size=(5, 3))

    def build(t):
        logits = t @ constant(other).T
        return (logsumexp_rows(logits) - logits.diag()).mean()

    _check(build, (5, 3), seed=8)


def test_concat_and_expand_rows_gradient():
    rng = np.random.default_rng(9)
    fixed = rng.normal(size=(6, 2))

    def build(t):
        joined = concat_cols([constant(fixed), t.expand_rows(6)])
        return joined.tanh().square().sum()

    _check(build, (1, 3), seed=10)


def test_logsumexp_matches_naive_value():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5)) * 10
    got = logsumexp_rows(Tensor(x)).data
    want = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        Tensor(np.zeros(3), requires_grad=True).backward()


def test_shared_subexpression_accumulates_once_per_use():
    x = leaf(np.array([[2.0]]))
    y = x * 3.0
    z = (y + y).sum()
    z.backward()
    assert x.grad is not None
    assert x.grad[0, 0] == pytest.approx(6.0)

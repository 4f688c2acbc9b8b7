"""Finite-difference checks for every tape operation."""

import numpy as np
import pytest

from cyclemap import SolveError
from cyclemap import autodiff as ad


def fd_grad(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of x."""
    x = x.copy()
    grad = np.zeros_like(x)
    flat, out = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


RNG = np.random.default_rng(42)


def check_grad(build_op, x, tol=1e-6):
    """build_op(Var) -> Var of any shape; its output is projected to a
    scalar with one fixed random weight per entry, then the tape gradient
    is compared against central differences."""
    p = ad.param(x.copy(), "x")
    out = build_op(p)
    R = RNG.standard_normal(out.value.shape)

    def scalar(v):
        return ad.sumall(ad.hadamard(v, ad.const(R)))

    ad.backward(scalar(out))
    numeric = fd_grad(lambda arr: scalar(build_op(ad.const(arr))).value, x)
    denom = max(1.0, np.abs(p.grad).max())
    assert np.abs(p.grad - numeric).max() / denom < tol


class TestElementwiseOps:
    def test_add_sub_scale(self):
        x = RNG.standard_normal((4, 3))
        other = ad.const(RNG.standard_normal((4, 3)))
        check_grad(lambda p: ad.add(p, other), x)
        check_grad(lambda p: ad.sub(other, p), x)
        check_grad(lambda p: ad.scale(p, -2.5), x)

    def test_relu_away_from_kink(self):
        x = RNG.standard_normal((5, 4))
        x[np.abs(x) < 0.05] = 0.1
        check_grad(lambda p: ad.relu(p), x)

    def test_abs_away_from_kink(self):
        x = RNG.standard_normal((5, 4))
        x[np.abs(x) < 0.05] = -0.2
        check_grad(lambda p: ad.absval(p), x)

    def test_abs_subgradient_zero_at_zero(self):
        p = ad.param(np.zeros((2, 2)), "x")
        loss = ad.sumall(ad.absval(p))
        ad.backward(loss)
        assert np.all(p.grad == 0)

    def test_hadamard_both_sides(self):
        x = RNG.standard_normal((3, 6))
        other = RNG.standard_normal((3, 6))
        check_grad(lambda p: ad.hadamard(p, ad.const(other)), x)
        check_grad(lambda p: ad.hadamard(ad.const(other), p), x)


class TestShapeOps:
    def test_matmul_left_and_right(self):
        a = RNG.standard_normal((4, 6))
        b = RNG.standard_normal((6, 3))
        check_grad(lambda p: ad.matmul(p, ad.const(b)), a)
        check_grad(lambda p: ad.matmul(ad.const(a), p), b)

    def test_transpose(self):
        x = RNG.standard_normal((3, 5))
        check_grad(lambda p: ad.transpose(p), x)

    def test_reshape(self):
        x = RNG.standard_normal((2, 6))
        check_grad(lambda p: ad.reshape(p, (4, 3)), x)

    def test_add_rowvec_and_colvec(self):
        m = RNG.standard_normal((4, 5))
        v = RNG.standard_normal(5)
        w = RNG.standard_normal(4)
        check_grad(lambda p: ad.add_rowvec(p, ad.const(v)), m)
        check_grad(lambda p: ad.add_rowvec(ad.const(m), p), v)
        check_grad(lambda p: ad.add_colvec(ad.const(m), p), w)

    def test_take_rows(self):
        x = RNG.standard_normal((6, 4))
        assert np.array_equal(ad.take_rows(ad.const(x), [4, 1]).value,
                              x[[4, 1]])
        check_grad(lambda p: ad.take_rows(p, [0, 3, 5]), x)
        # a repeated row must accumulate both contributions
        check_grad(lambda p: ad.take_rows(p, [2, 2, 4]), x)

    def test_take_cols(self):
        x = RNG.standard_normal((3, 7))
        assert np.array_equal(ad.take_cols(ad.const(x), [6, 0]).value,
                              x[:, [6, 0]])
        check_grad(lambda p: ad.take_cols(p, [1, 4, 6]), x)
        check_grad(lambda p: ad.take_cols(p, [5, 5, 0]), x)


class TestReductions:
    def test_sumall(self):
        x = RNG.standard_normal((3, 3))
        check_grad(lambda p: ad.sumall(p), x)

    def test_frob_sq(self):
        x = RNG.standard_normal((4, 2))
        check_grad(lambda p: ad.frob_sq(p), x)

    def test_seed_scales_linearly(self):
        x = RNG.standard_normal((3, 3))
        p1 = ad.param(x.copy(), "x")
        ad.backward(ad.frob_sq(p1))
        p2 = ad.param(x.copy(), "x")
        ad.backward(ad.frob_sq(p2), seed=2.0)
        assert np.allclose(p2.grad, 2.0 * p1.grad, rtol=1e-15)


class TestColnorm:
    def test_columns_sum_to_one(self):
        x = np.abs(RNG.standard_normal((5, 4))) + 0.1
        y = ad.colnorm(ad.const(x))
        assert np.allclose(y.value.sum(axis=0), 1.0, atol=1e-12)

    def test_gradient(self):
        x = np.abs(RNG.standard_normal((5, 4))) + 0.1
        check_grad(lambda p: ad.colnorm(p), x)

    def test_zero_column_uniform_and_gradient_free(self):
        x = np.abs(RNG.standard_normal((4, 3))) + 0.1
        x[:, 1] = 0.0
        p = ad.param(x, "x")
        y = ad.colnorm(p)
        assert np.allclose(y.value[:, 1], 0.25)
        ad.backward(ad.frob_sq(y))
        assert np.all(p.grad[:, 1] == 0)
        assert np.any(p.grad[:, 0] != 0)


class TestFmapSolve:
    def test_forward_matches_dense_oracle(self):
        A = RNG.standard_normal((4, 9))
        B = RNG.standard_normal((5, 9))
        reg = 0.2
        C = ad.fmap_solve(ad.const(A), ad.const(B), reg).value
        oracle = B @ A.T @ np.linalg.inv(A @ A.T + reg * np.eye(4))
        assert np.abs(C - oracle).max() < 1e-12

    def test_gradient_wrt_both_inputs(self):
        A = RNG.standard_normal((3, 7))
        B = RNG.standard_normal((4, 7))
        check_grad(lambda p: ad.fmap_solve(p, ad.const(B), 0.1), A, tol=1e-5)
        check_grad(lambda p: ad.fmap_solve(ad.const(A), p, 0.1), B, tol=1e-5)

    def test_singular_raises(self):
        with pytest.raises(SolveError):
            ad.fmap_solve(ad.const(np.zeros((3, 5))),
                          ad.const(np.zeros((2, 5))), 0.0)


class TestEngine:
    def test_constants_collect_no_gradients(self):
        c = ad.const(np.ones((2, 2)))
        p = ad.param(np.ones((2, 2)), "w")
        loss = ad.frob_sq(ad.add(p, c))
        ad.backward(loss)
        assert c.grad is None
        assert p.grad is not None

    def test_fanout_accumulates(self):
        # y = x + x means dy/dx entries are 2
        p = ad.param(np.ones(3), "x")
        ad.backward(ad.sumall(ad.add(p, p)))
        assert np.allclose(p.grad, 2.0)

    def test_diamond_graph(self):
        x = RNG.standard_normal((3, 3))

        def build(p):
            a = ad.relu(p)
            b = ad.scale(p, 0.5)
            return ad.frob_sq(ad.add(a, b))

        xs = x.copy()
        xs[np.abs(xs) < 0.05] = 0.2
        check_grad(build, xs)

    def test_chained_composite(self):
        # abs -> matmul -> colnorm -> frobenius, all in one graph
        K = RNG.standard_normal((4, 6))

        def build(p):
            return ad.frob_sq(ad.colnorm(ad.absval(
                ad.matmul(p, ad.const(K)))))

        x = RNG.standard_normal((5, 4))
        x[np.abs(x) < 0.05] = 0.3
        # keep |XK| entries away from zero so abs is smooth at the probe
        while np.abs(x @ K).min() < 0.05:
            x = RNG.standard_normal((5, 4))
            x[np.abs(x) < 0.05] = 0.3
        check_grad(build, x, tol=1e-5)

"""Minimal reverse-mode differentiation over float64 numpy arrays.

Supports exactly the operations the correspondence network needs. Every op
returns a new :class:`Var`; creation order is a topological order of the
graph, so the backward sweep just walks ids downward. Gradients with respect
to constants are never computed.
"""

import itertools

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SolveError

_ids = itertools.count()


class Var:
    """One node of the computation graph."""

    __slots__ = ("value", "grad", "needs_grad", "name", "_id", "_plist")

    def __init__(self, value, plist=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.name = name
        self._id = next(_ids)
        # keep only differentiable parents; a node with none is a constant
        self._plist = [(p, fn) for p, fn in plist if p.needs_grad]
        self.needs_grad = bool(self._plist) or name is not None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"


def const(value):
    """Wrap an array the gradient never reaches."""
    return Var(value)


def param(value, name):
    """Wrap a learnable leaf; its .grad is filled by backward()."""
    return Var(value, name=name)


def backward(root: Var, seed=1.0) -> None:
    """Accumulate gradients of ``root`` into every reachable parameter."""
    root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                root.value.shape).copy()
    seen = {root._id}
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent, _ in node._plist:
            if parent._id not in seen:
                seen.add(parent._id)
                stack.append(parent)
    nodes.sort(key=lambda v: v._id, reverse=True)
    for node in nodes:
        g = node.grad
        if g is None:
            continue
        for parent, fn in node._plist:
            pg = fn(g)
            parent.grad = pg if parent.grad is None else parent.grad + pg


def add(a: Var, b: Var) -> Var:
    return Var(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Var, b: Var) -> Var:
    return Var(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def scale(a: Var, c: float) -> Var:
    return Var(a.value * c, [(a, lambda g: g * c)])


def matmul(a: Var, b: Var) -> Var:
    return Var(a.value @ b.value, [(a, lambda g: g @ b.value.T),
                                   (b, lambda g: a.value.T @ g)])


def transpose(a: Var) -> Var:
    return Var(a.value.T, [(a, lambda g: g.T)])


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return Var(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def take_rows(a: Var, indices) -> Var:
    """Gather rows; the adjoint scatter-adds, so repeats are allowed."""
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], [(a, bw)])


def take_cols(a: Var, indices) -> Var:
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (slice(None), idx), g)
        return out

    return Var(a.value[:, idx], [(a, bw)])


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, [(a, lambda g: g * mask)])


def absval(a: Var) -> Var:
    sign = np.sign(a.value)  # subgradient 0 at 0
    return Var(np.abs(a.value), [(a, lambda g: g * sign)])


def hadamard(a: Var, b: Var) -> Var:
    return Var(a.value * b.value, [(a, lambda g: g * b.value),
                                   (b, lambda g: g * a.value)])


def add_rowvec(m: Var, v: Var) -> Var:
    """m + v broadcast across rows (v has one entry per column)."""
    return Var(m.value + v.value[None, :],
               [(m, lambda g: g), (v, lambda g: g.sum(axis=0))])


def add_colvec(m: Var, v: Var) -> Var:
    """m + v broadcast across columns (v has one entry per row)."""
    return Var(m.value + v.value[:, None],
               [(m, lambda g: g), (v, lambda g: g.sum(axis=1))])


def sumall(a: Var) -> Var:
    shape = a.value.shape
    return Var(a.value.sum(), [(a, lambda g: np.full(shape, g))])


def frob_sq(a: Var) -> Var:
    return Var(np.sum(a.value * a.value), [(a, lambda g: 2.0 * g * a.value)])


def colnorm(a: Var) -> Var:
    """Divide each column by its sum; all-zero columns become uniform and
    pass no gradient."""
    X = a.value
    sums = X.sum(axis=0)
    zero = sums == 0
    safe = np.where(zero, 1.0, sums)
    Y = X / safe
    if zero.any():
        Y[:, zero] = 1.0 / X.shape[0]

    def bw(g):
        dX = (g - (g * Y).sum(axis=0)) / safe
        if zero.any():
            dX[:, zero] = 0.0
        return dX

    return Var(Y, [(a, bw)])


def fmap_solve(a: Var, b: Var, reg: float) -> Var:
    """Ridge least-squares map ``C = B Aᵀ (A Aᵀ + reg I)⁻¹``.

    The backward pass reuses the forward Cholesky factor: with
    S = (A Aᵀ + reg I)⁻¹,

        dB = (S dCᵀ)ᵀ A
        dA = S dCᵀ B + (dG + dGᵀ) A,  dG = -S (A Bᵀ dC) S

    which is the implicit-function derivative of the normal equations.
    """
    A, B = a.value, b.value
    gram = A @ A.T + reg * np.eye(A.shape[0])
    try:
        factor = cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise SolveError(f"descriptor Gram matrix is singular "
                         f"(k={A.shape[0]}, d={A.shape[1]}, reg={reg}); "
                         "increase reg or feed richer descriptors") from exc
    C = cho_solve(factor, A @ B.T).T

    def bw_a(g):
        SgT = cho_solve(factor, g.T)              # S dCᵀ, (k_A, k_B)
        inner = cho_solve(factor, A @ (B.T @ g))  # S A Bᵀ dC, (k_A, k_A)
        dG = -cho_solve(factor, inner.T).T        # right-multiply by S
        return SgT @ B + (dG + dG.T) @ A

    def bw_b(g):
        return cho_solve(factor, g.T).T @ A

    return Var(C, [(a, bw_a), (b, bw_b)])

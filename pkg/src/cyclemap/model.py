"""Shared-weight descriptor refinement network and the training losses.

One parameter set serves both shapes and both mapping directions: the
forward pass refines the descriptor stacks of X and Y with the same
weights, projects both onto their spectral bases, solves for the two
functional maps, and turns them into the soft correspondences P (X to Y)
and P-tilde (Y to X). All losses are built on the same tape so one
backward sweep yields parameter gradients.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .descriptor import DescriptorStack
from .errors import ConfigError, NonFiniteError
from .fmap import DEFAULT_REG
from .geodesy import DistanceMatrix, PointMap
from .mesh import TriMesh
from .spectral import SpectralBasis

DEFAULT_BLOCKS = 7


@dataclass
class ResidualBlock:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelParams:
    """Fusion layers (m scale channels -> 2m -> 1, applied per descriptor
    position) followed by L residual blocks of width s."""

    fusion_a_w: np.ndarray  # (2m, m)
    fusion_a_b: np.ndarray  # (2m,)
    fusion_b_w: np.ndarray  # (1, 2m)
    fusion_b_b: np.ndarray  # (1,)
    blocks: list

    @property
    def m(self) -> int:
        return self.fusion_a_w.shape[1]

    @property
    def s(self) -> int:
        return self.blocks[0].w1.shape[0]

    @property
    def L(self) -> int:
        return len(self.blocks)

    def named_tensors(self):
        """(name, array) pairs in the fixed declaration order used by
        checkpoints and the optimizer state."""
        out = [("fusion_a_w", self.fusion_a_w),
               ("fusion_a_b", self.fusion_a_b),
               ("fusion_b_w", self.fusion_b_w),
               ("fusion_b_b", self.fusion_b_b)]
        for i, blk in enumerate(self.blocks):
            out.extend([(f"block{i}_w1", blk.w1), (f"block{i}_b1", blk.b1),
                        (f"block{i}_w2", blk.w2), (f"block{i}_b2", blk.b2)])
        return out

    def apply_updates(self, updates) -> None:
        """In-place parameter step; ``updates`` maps tensor name -> delta."""
        for name, tensor in self.named_tensors():
            tensor += updates[name]


@dataclass(frozen=True)
class ShapeContext:
    """Everything the forward pass needs about one shape."""

    mesh: TriMesh
    basis: SpectralBasis
    stack: DescriptorStack
    dist: Optional[DistanceMatrix] = None

    def __post_init__(self):
        n = self.mesh.n_vertices
        if self.basis.n != n or self.stack.n != n:
            raise ConfigError(f"inconsistent vertex counts: mesh {n}, "
                              f"basis {self.basis.n}, stack {self.stack.n}")
        if self.dist is not None and self.dist.sample_indices.max() >= n:
            raise ConfigError("distance sample indices exceed vertex count")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step log record; only the terms that were evaluated are set."""

    total: float
    cyclic: Optional[float] = None
    isometric: Optional[float] = None
    supervised: Optional[float] = None
    coupling: Optional[float] = None

    def __post_init__(self):
        for name in ("total", "cyclic", "isometric", "supervised",
                     "coupling"):
            v = getattr(self, name)
            if v is not None and (not np.isfinite(v) or v < 0):
                raise NonFiniteError(f"loss term {name} = {v}")


def param_shapes(m: int, s: int, L: int):
    """Name and shape of every tensor, in named_tensors() order."""
    if m < 1 or s < 1 or L < 1:
        raise ConfigError(f"need m, s, L >= 1, got m={m}, s={s}, L={L}")
    shapes = [("fusion_a_w", (2 * m, m)), ("fusion_a_b", (2 * m,)),
              ("fusion_b_w", (1, 2 * m)), ("fusion_b_b", (1,))]
    for i in range(L):
        shapes += [(f"block{i}_w1", (s, s)), (f"block{i}_b1", (s,)),
                   (f"block{i}_w2", (s, s)), (f"block{i}_b2", (s,))]
    return shapes


def params_from_tensors(m: int, s: int, L: int, tensors) -> ModelParams:
    """Rebuild a ModelParams from a {name: array} mapping."""
    expected = param_shapes(m, s, L)
    missing = [name for name, _ in expected if name not in tensors]
    if missing:
        raise ConfigError(f"missing parameter tensors: {missing}")
    for name, shape in expected:
        if tuple(tensors[name].shape) != shape:
            raise ConfigError(
                f"tensor {name} has shape {tensors[name].shape}, "
                f"expected {shape}")
    blocks = [ResidualBlock(w1=tensors[f"block{i}_w1"],
                            b1=tensors[f"block{i}_b1"],
                            w2=tensors[f"block{i}_w2"],
                            b2=tensors[f"block{i}_b2"])
              for i in range(L)]
    return ModelParams(fusion_a_w=tensors["fusion_a_w"],
                       fusion_a_b=tensors["fusion_a_b"],
                       fusion_b_w=tensors["fusion_b_w"],
                       fusion_b_b=tensors["fusion_b_b"],
                       blocks=blocks)


def init_params(m: int, s: int, L: int, seed: int) -> ModelParams:
    """Fresh parameters whose first forward pass is the scale-mean identity.

    The fusion pair starts as an exact mean over scales: the first layer
    stacks x and -x so relu(x) - relu(-x) = x survives the nonlinearity,
    and the second averages. Each residual block's closing layer starts at
    zero, so every block begins as the identity. Only the opening block
    layers are random (seeded, variance-scaled).
    """
    if m < 1 or s < 1 or L < 1:
        raise ConfigError(f"need m, s, L >= 1, got m={m}, s={s}, L={L}")
    rng = np.random.Generator(np.random.PCG64(seed))
    eye = np.eye(m)
    ones = np.ones(m)
    blocks = [ResidualBlock(w1=rng.normal(0.0, np.sqrt(2.0 / s), (s, s)),
                            b1=np.zeros(s),
                            w2=np.zeros((s, s)),
                            b2=np.zeros(s))
              for _ in range(L)]
    return ModelParams(
        fusion_a_w=np.vstack([eye, -eye]),
        fusion_a_b=np.zeros(2 * m),
        fusion_b_w=np.concatenate([ones, -ones])[None, :] / m,
        fusion_b_b=np.zeros(1),
        blocks=blocks)


class _TapeParams:
    """The parameter set wrapped as tape leaves, once per forward graph."""

    def __init__(self, params: ModelParams):
        self.named = {name: ad.param(arr, name)
                      for name, arr in params.named_tensors()}
        self.blocks = [(self.named[f"block{i}_w1"],
                        self.named[f"block{i}_b1"],
                        self.named[f"block{i}_w2"],
                        self.named[f"block{i}_b2"])
                       for i in range(params.L)]

    def __getitem__(self, name):
        return self.named[name]


def _refine(tp: _TapeParams, raw: np.ndarray) -> Var:
    n, m, s = raw.shape
    x0 = ad.const(np.asarray(raw, dtype=np.float64)
                  .transpose(1, 0, 2).reshape(m, n * s))
    h = ad.relu(ad.add_colvec(ad.matmul(tp["fusion_a_w"], x0),
                              tp["fusion_a_b"]))
    fused = ad.add_colvec(ad.matmul(tp["fusion_b_w"], h), tp["fusion_b_b"])
    f = ad.reshape(fused, (n, s))
    for w1, b1, w2, b2 in tp.blocks:
        z = ad.relu(ad.add_rowvec(ad.matmul(f, w1), b1))
        f = ad.add(f, ad.add_rowvec(ad.matmul(z, w2), b2))
    return f


def refine(params: ModelParams, stack: DescriptorStack) -> np.ndarray:
    """Refined per-vertex features (n, s) for one shape, no gradients."""
    if stack.m != params.m or stack.s != params.s:
        raise ConfigError(f"stack dims (m={stack.m}, s={stack.s}) do not "
                          f"match params (m={params.m}, s={params.s})")
    return _refine(_TapeParams(params), stack.raw).value


@dataclass
class PairForward:
    """Forward-pass tape of one shape pair: the soft correspondences plus
    the parameter leaves gradients are read from."""

    P: Var
    P_tilde: Var
    C: Var
    C_tilde: Var
    F: Var
    G: Var
    params: dict


def forward_pair(params: ModelParams, ctx_x: ShapeContext,
                 ctx_y: ShapeContext, reg: float = DEFAULT_REG) -> PairForward:
    """Differentiable pass from raw descriptor stacks to (P, P-tilde).

    P has shape (n_y, n_x) and maps X onto Y; P-tilde is the reverse. Both
    shapes run through the same parameter leaves, so gradients from any
    loss on P or P-tilde accumulate into one shared set.
    """
    for ctx in (ctx_x, ctx_y):
        if ctx.stack.m != params.m or ctx.stack.s != params.s:
            raise ConfigError(f"stack dims (m={ctx.stack.m}, s={ctx.stack.s})"
                              f" do not match params (m={params.m}, "
                              f"s={params.s})")
    if ctx_x.basis.k != ctx_y.basis.k:
        raise ConfigError(f"bases must share k, got {ctx_x.basis.k} and "
                          f"{ctx_y.basis.k}")

    tp = _TapeParams(params)
    F = _refine(tp, ctx_x.stack.raw)
    G = _refine(tp, ctx_y.stack.raw)

    phi = ctx_x.basis.eigenfunctions
    psi = ctx_y.basis.eigenfunctions
    proj_x = ad.const(phi.T * ctx_x.basis.mass)  # (k, n) mass-weighted
    proj_y = ad.const(psi.T * ctx_y.basis.mass)
    A = ad.matmul(proj_x, F)
    B = ad.matmul(proj_y, G)

    C = ad.fmap_solve(A, B, reg)
    C_tilde = ad.fmap_solve(B, A, reg)

    P = ad.colnorm(ad.absval(
        ad.matmul(ad.matmul(ad.const(psi), C), ad.const(phi.T))))
    P_tilde = ad.colnorm(ad.absval(
        ad.matmul(ad.matmul(ad.const(phi), C_tilde), ad.const(psi.T))))
    return PairForward(P=P, P_tilde=P_tilde, C=C, C_tilde=C_tilde,
                       F=F, G=G, params=tp.named)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else ad.const(x)


def cyclic_loss(P, P_tilde, D_x: np.ndarray) -> Var:
    """(1/n²) ‖D_x − Q D_x Qᵀ‖²_F with Q = P̃ P: pairwise source distances
    must survive the round trip through the other shape."""
    P, Pt = _as_var(P), _as_var(P_tilde)
    n = D_x.shape[0]
    if D_x.shape != (n, n) or P.shape[1] != n or Pt.shape[0] != n \
            or P.shape[0] != Pt.shape[1]:
        raise ConfigError(f"inconsistent shapes: P {P.shape}, "
                          f"P_tilde {Pt.shape}, D_x {D_x.shape}")
    Q = ad.matmul(Pt, P)
    D = ad.const(D_x)
    resid = ad.sub(D, ad.matmul(ad.matmul(Q, D), ad.transpose(Q)))
    return ad.scale(ad.frob_sq(resid), 1.0 / n ** 2)


def isometric_loss(P_tilde, D_x: np.ndarray, D_y: np.ndarray) -> Var:
    """(1/n²) ‖D_x − P̃ D_y P̃ᵀ‖²_F: source distances against distances
    pulled back from the target."""
    Pt = _as_var(P_tilde)
    n, m = Pt.shape
    if D_x.shape != (n, n) or D_y.shape != (m, m):
        raise ConfigError(f"inconsistent shapes: P_tilde {Pt.shape}, "
                          f"D_x {D_x.shape}, D_y {D_y.shape}")
    resid = ad.sub(ad.const(D_x),
                   ad.matmul(ad.matmul(Pt, ad.const(D_y)), ad.transpose(Pt)))
    return ad.scale(ad.frob_sq(resid), 1.0 / n ** 2)


def supervised_loss(P, D_y: np.ndarray, gt: PointMap) -> Var:
    """(1/n) ‖P ∘ (D_y Π*)‖²_F: mass placed away from the labeled target
    is charged by its geodesic distance to it."""
    P = _as_var(P)
    m, n = P.shape
    if len(gt) != n:
        raise ConfigError(f"ground truth covers {len(gt)} vertices, "
                          f"P has {n} columns")
    if D_y.shape[0] != m:
        raise ConfigError(f"D_y rows {D_y.shape[0]} != P rows {m}")
    targets = gt.assignments
    if targets.min() < 0 or targets.max() >= D_y.shape[1]:
        raise ConfigError("ground-truth target index outside D_y")
    cost = D_y[:, targets]  # column i holds distances to gt(i)
    return ad.scale(ad.frob_sq(ad.hadamard(P, ad.const(cost))), 1.0 / n)


def coupling_loss(P, P_tilde) -> Var:
    """‖P̃P − I‖²_F + ‖PP̃ − I‖²_F: the two correspondences should be
    mutual inverses. Used to warm up before the distortion losses."""
    P, Pt = _as_var(P), _as_var(P_tilde)
    if P.shape[0] != Pt.shape[1] or P.shape[1] != Pt.shape[0]:
        raise ConfigError(f"P {P.shape} and P_tilde {Pt.shape} are not "
                          "transpose-compatible")
    n, m = P.shape[1], P.shape[0]
    round_x = ad.sub(ad.matmul(Pt, P), ad.const(np.eye(n)))
    round_y = ad.sub(ad.matmul(P, Pt), ad.const(np.eye(m)))
    return ad.add(ad.frob_sq(round_x), ad.frob_sq(round_y))


def backward(pair: PairForward, loss: Var) -> dict:
    """One reverse sweep; returns name -> gradient for every parameter.

    Parameters the loss never touched get zero gradients. A non-finite
    loss or gradient raises NonFiniteError naming the first bad tensor.
    """
    if not np.isfinite(loss.value):
        raise NonFiniteError(f"loss is not finite: {loss.value}")
    ad.backward(loss)
    grads = {}
    for name, var in pair.params.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient for {name} is not finite")
        grads[name] = g
    return grads

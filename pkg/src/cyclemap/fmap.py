"""Functional-map solves and soft correspondence between spectral bases."""

import csv
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, ExportError, SolveError
from .geodesy import PointMap
from .spectral import SpectralBasis

DEFAULT_REG = 1e-3

_MATRIX_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class FunctionalMap:
    """Spectral coefficient map C (k_target x k_source) and the ridge weight
    it was solved with."""

    coeffs: np.ndarray
    reg: float


@dataclass(frozen=True)
class SoftCorrespondence:
    """Column-stochastic matrix P of shape (m, n): P[j, i] is the probability
    that source vertex i corresponds to target vertex j."""

    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.ndim != 2:
            raise ConfigError("correspondence matrix must be 2-D")
        if not np.isfinite(p).all() or (p < 0).any():
            raise ConfigError("correspondence entries must be finite and "
                              "nonnegative")
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ConfigError("correspondence columns must sum to 1")


def solve_fmap(A: np.ndarray, B: np.ndarray,
               reg: float = DEFAULT_REG) -> FunctionalMap:
    """Least-squares spectral map from coefficients A onto coefficients B.

    Parameters
    ----------
    A : ndarray of shape (k_source, d)
        Source spectral coefficients, one function per column.
    B : ndarray of shape (k_target, d)
        Target coefficients of the same d functions.
    reg : float
        Ridge weight on ``‖C‖_F²``; keeps the solve well-posed when A is
        rank deficient.

    Returns
    -------
    FunctionalMap
        Minimizer of ``‖CA - B‖_F² + reg ‖C‖_F²`` via the normal equations
        ``C = B Aᵀ (A Aᵀ + reg I)⁻¹``, factored by Cholesky.

    Raises
    ------
    SolveError
        If ``A Aᵀ + reg I`` is not positive definite (rank-deficient A with
        reg = 0).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise ConfigError("coefficient arrays must be 2-D")
    if A.shape[1] != B.shape[1]:
        raise ConfigError(f"A and B must share the function dimension, got "
                          f"{A.shape} and {B.shape}")
    if reg < 0:
        raise ConfigError(f"regularization must be nonnegative, got {reg}")
    gram = A @ A.T + reg * np.eye(A.shape[0])
    try:
        factor = cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise SolveError(f"descriptor Gram matrix is singular "
                         f"(k={A.shape[0]}, d={A.shape[1]}, reg={reg}); "
                         "increase reg or feed richer descriptors") from exc
    coeffs = cho_solve(factor, A @ B.T).T
    if not np.isfinite(coeffs).all():
        raise SolveError("functional map solve produced non-finite entries")
    return FunctionalMap(coeffs=coeffs, reg=float(reg))


def soft_correspondence(basis_src: SpectralBasis, basis_tgt: SpectralBasis,
                        fmap: FunctionalMap) -> SoftCorrespondence:
    """Column-stochastic point correspondence induced by a functional map.

    Computes ``P = colnormalize(|Ψ C Φᵀ|)`` where Φ are the source
    eigenfunctions and Ψ the target ones, so P has one column per source
    vertex summing to 1. Columns that are identically zero become uniform.
    The reverse-direction matrix is the same call with the two bases (and
    the reverse map) swapped.
    """
    C = fmap.coeffs
    if C.shape != (basis_tgt.k, basis_src.k):
        raise ConfigError(f"map shape {C.shape} does not match bases "
                          f"(k_target={basis_tgt.k}, k_source={basis_src.k})")
    raw = np.abs(basis_tgt.eigenfunctions @ C @ basis_src.eigenfunctions.T)
    sums = raw.sum(axis=0)
    zero = sums == 0
    sums[zero] = 1.0
    probs = raw / sums
    probs[:, zero] = 1.0 / raw.shape[0]
    return SoftCorrespondence(probs=probs)


def hard_assignment(soft: SoftCorrespondence) -> PointMap:
    """Most likely target vertex per source vertex; ties take the smallest
    target index and the winning probability is kept as the confidence."""
    probs = soft.probs
    assignments = np.argmax(probs, axis=0)
    confidences = probs[assignments, np.arange(probs.shape[1])]
    return PointMap(assignments=assignments, confidences=confidences)


def save_matrix(path, matrix: np.ndarray) -> None:
    """Write a 2-D array as `<u32 rows><u32 cols>` followed by row-major
    little-endian float32 values."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ConfigError("only 2-D matrices are exported")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(*matrix.shape))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    """Read a matrix written by :func:`save_matrix` (returned as float32)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MATRIX_HEADER.size:
        raise ExportError(f"matrix file too short: {path}")
    rows, cols = _MATRIX_HEADER.unpack_from(blob)
    expected = _MATRIX_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise ExportError(f"matrix file {path} holds {len(blob)} bytes, "
                          f"expected {expected} for a {rows}x{cols} matrix")
    data = np.frombuffer(blob, dtype="<f4", offset=_MATRIX_HEADER.size)
    return data.reshape(rows, cols).copy()


def save_point_map(path, point_map: PointMap) -> None:
    """Write a point map as CSV with a `source_index,target_index,confidence`
    header. A map without confidences writes 1.0 throughout."""
    conf = point_map.confidences
    if conf is None:
        conf = np.ones(len(point_map))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source_index", "target_index", "confidence"])
        for i, (tgt, c) in enumerate(zip(point_map.assignments, conf)):
            writer.writerow([i, int(tgt), repr(float(c))])


def load_point_map(path) -> PointMap:
    """Read a CSV written by :func:`save_point_map`. Source indices may be
    in any order but must cover 0..n-1 exactly once."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source_index", "target_index", "confidence"]:
            raise ExportError(f"unrecognized point-map header in {path}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                src, tgt, conf = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise ExportError(f"bad point-map row at {path}:{lineno}") \
                    from exc
            if src in rows:
                raise ExportError(f"duplicate source index {src} in {path}")
            rows[src] = (tgt, conf)
    n = len(rows)
    if n == 0 or sorted(rows) != list(range(n)):
        raise ExportError(f"point map in {path} does not cover source "
                          "indices 0..n-1")
    assignments = np.array([rows[i][0] for i in range(n)], dtype=np.int64)
    confidences = np.array([rows[i][1] for i in range(n)])
    return PointMap(assignments=assignments, confidences=confidences)

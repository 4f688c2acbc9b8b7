"""Cotangent Laplace-Beltrami operator and its generalized eigenbasis.

The stiffness matrix W carries -1/2(cot a + cot b) on edge (i, j) with a, b
the two angles opposite the edge, and minus the row sum on the diagonal, so
W is symmetric positive semidefinite with the constant vector in its kernel.
Together with the diagonal barycentric mass matrix M this defines the
generalized problem W phi = lambda M phi whose low end approximates the
smooth surface spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh

from .errors import EigenSolveError, InvalidMeshError
from .mesh import TriMesh

# Above this vertex count the dense generalized solver becomes slower than
# shift-invert Lanczos; below it the dense path doubles as the test oracle.
DENSE_LIMIT = 600


@dataclass(frozen=True)
class Laplacian:
    """Stiffness and lumped mass of a mesh.

    Attributes
    ----------
    stiffness : scipy.sparse.csr_matrix
        n x n symmetric PSD cotangent matrix.
    mass : ndarray
        (n,) strictly positive barycentric vertex areas (the diagonal of M).
    """

    stiffness: sparse.csr_matrix
    mass: np.ndarray


@dataclass(frozen=True)
class SpectralBasis:
    """k lowest eigenpairs of the Laplace-Beltrami operator.

    ``eigenfunctions`` is n x k with columns M-orthonormal; ``eigenvalues``
    ascending, the first numerically zero on a connected mesh. ``mass``
    repeats the lumped mass so projection needs no extra context.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def n(self) -> int:
        return self.eigenfunctions.shape[0]

    def truncated(self, k: int) -> "SpectralBasis":
        """First k eigenpairs of this basis."""
        if k > self.k:
            raise EigenSolveError(f"cannot truncate basis of size {self.k} to {k}")
        return SpectralBasis(self.eigenvalues[:k], self.eigenfunctions[:, :k],
                             self.mass)


def cotan_laplacian(mesh: TriMesh) -> Laplacian:
    """Assemble the cotangent stiffness and barycentric mass of a mesh.

    The assembly is face-based and exactly symmetric: each face contributes
    the identical scalar to (i, j) and (j, i).
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices

    ii = []
    jj = []
    ww = []
    # Angle at corner c is opposite edge (a, b).
    for c, a, b in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        ea = v[f[:, a]] - v[f[:, c]]
        eb = v[f[:, b]] - v[f[:, c]]
        cross = np.linalg.norm(np.cross(ea, eb), axis=1)
        cot = (ea * eb).sum(axis=1) / cross
        if not np.isfinite(cot).all():
            bad = int(np.flatnonzero(~np.isfinite(cot))[0])
            raise InvalidMeshError(f"degenerate angle in face {bad}")
        half = -0.5 * cot
        ii.extend([f[:, a], f[:, b]])
        jj.extend([f[:, b], f[:, a]])
        ww.extend([half, half])
    off = sparse.coo_matrix(
        (np.concatenate(ww), (np.concatenate(ii), np.concatenate(jj))),
        shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    W = off + sparse.diags(diag)
    return Laplacian(stiffness=W.tocsr(), mass=mesh.vertex_areas.copy())


def eigenbasis(lap: Laplacian, k: int) -> SpectralBasis:
    """Solve W phi = lambda M phi for the k smallest eigenpairs.

    Dense solve below DENSE_LIMIT vertices (also allows k = n there);
    otherwise shift-invert Lanczos around sigma just below zero with a
    constant starting vector, which keeps runs bit-reproducible.

    Raises
    ------
    EigenSolveError
        For k out of range or solver non-convergence.
    """
    W = lap.stiffness
    m = lap.mass
    n = W.shape[0]
    if k < 1:
        raise EigenSolveError(f"k must be positive, got {k}")
    if n <= DENSE_LIMIT:
        if k > n:
            raise EigenSolveError(f"k={k} exceeds n={n}")
        vals, vecs = eigh(W.toarray(), np.diag(m), subset_by_index=[0, k - 1])
    else:
        if k >= n:
            raise EigenSolveError(f"k={k} must be below n={n} for the sparse path")
        M = sparse.diags(m).tocsc()
        v0 = np.full(n, 1.0 / np.sqrt(n))
        # Sphere-like spectra have clusters of multiplicity up to 2l+1; the
        # default Krylov width can silently skip cluster members, so widen it.
        ncv = min(n - 1, max(4 * k + 1, 40))
        try:
            vals, vecs = eigsh(W.tocsc(), k=k, M=M, sigma=-1e-8, which="LM",
                               v0=v0, ncv=ncv, tol=1e-10,
                               maxiter=50 * max(k, 20))
        except (ArpackNoConvergence, ArpackError, RuntimeError) as exc:
            raise EigenSolveError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    # M-orthonormalize exactly (solvers are close but not to 1e-6 per entry
    # in all builds) and canonicalize signs for determinism.
    norms = np.sqrt(np.einsum("ik,i,ik->k", vecs, m, vecs))
    vecs = vecs / norms
    lead = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[lead, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
    vecs = vecs * signs
    return SpectralBasis(eigenvalues=vals, eigenfunctions=vecs, mass=m.copy())


def project(basis: SpectralBasis, funcs: np.ndarray) -> np.ndarray:
    """Spectral coefficients A = Phi^T M F of per-vertex functions F."""
    F = np.asarray(funcs, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != basis.n:
        raise EigenSolveError(
            f"function rows {F.shape[0]} do not match basis n {basis.n}")
    return basis.eigenfunctions.T @ (basis.mass[:, None] * F)


def reconstruct(basis: SpectralBasis, coeffs: np.ndarray) -> np.ndarray:
    """Synthesize per-vertex functions Phi A from spectral coefficients."""
    A = np.asarray(coeffs, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] != basis.k:
        raise EigenSolveError(
            f"coefficient rows {A.shape[0]} do not match basis k {basis.k}")
    return basis.eigenfunctions @ A

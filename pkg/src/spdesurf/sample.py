"""Sparse Cholesky factors, Gaussian field draws and derived quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriangleMesh


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, msg: str = ""):
        super().__init__(msg or f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """``Q[perm][:, perm] = L @ L.T`` with ``L`` sparse lower triangular."""

    perm: np.ndarray
    L: sp.csc_matrix

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(self.L.diagonal())))

    def solve(self, b):
        """Solve Q x = b."""
        b = np.asarray(b, dtype=float)
        y = spla.spsolve_triangular(self.L, b[self.perm], lower=True)
        z = spla.spsolve_triangular(self.L.T.tocsr(), y, lower=False)
        x = np.empty_like(z)
        x[self.perm] = z
        return x

    def apply_inverse_transpose(self, z):
        """Return ``P^T L^{-T} z``, which has covariance Q^{-1} for standard normal z."""
        z = np.asarray(z, dtype=float)
        y = spla.spsolve_triangular(self.L.T.tocsr(), z, lower=False)
        w = np.empty_like(y)
        w[self.perm] = y
        return w


def factorize(Q) -> CholeskyFactor:
    """Fill-reducing sparse Cholesky of a symmetric positive definite matrix.

    Uses SuperLU in symmetric mode without pivoting, which yields
    ``L D L^T`` under a minimum-degree ordering; the Cholesky factor is
    ``L sqrt(D)``.
    """
    Q = sp.csc_matrix(Q, dtype=float)
    n = Q.shape[0]
    if Q.shape != (n, n):
        raise ValueError("Q must be square")
    diag = Q.diagonal()
    bad = np.flatnonzero(~(diag > 0))
    if len(bad):
        raise NotPositiveDefiniteError(int(bad[0]))
    try:
        lu = spla.splu(
            Q,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True, Equil=False),
        )
    except RuntimeError as exc:
        raise NotPositiveDefiniteError(-1, f"factorization failed: {exc}") from None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise NotPositiveDefiniteError(-1, "factorization required off-diagonal pivoting")
    perm = np.argsort(lu.perm_c)
    d = lu.U.diagonal()
    bad = np.flatnonzero(~(d > 0))
    if len(bad):
        raise NotPositiveDefiniteError(int(perm[bad[0]]))
    L = (lu.L @ sp.diags(np.sqrt(d))).tocsc()
    return CholeskyFactor(perm=perm, L=L)


def dense_cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of a dense SPD matrix, reporting the failing pivot."""
    A = np.asarray(A.toarray() if sp.issparse(A) else A, dtype=float)
    c, info = sla.lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError("invalid argument to dpotrf")
    return c


@dataclass(frozen=True, eq=False)
class FieldSample:
    w: np.ndarray
    seed: int
    mesh: TriangleMesh | None = None

    @property
    def u1(self) -> np.ndarray:
        return self.w[: len(self.w) // 2]

    @property
    def u2(self) -> np.ndarray:
        return self.w[len(self.w) // 2:]


def sample_field(factor: CholeskyFactor, seed: int, mesh: TriangleMesh | None = None) -> FieldSample:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(factor.dim)
    return FieldSample(w=factor.apply_inverse_transpose(z), seed=int(seed), mesh=mesh)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for a stream identified by integer keys."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, np.uint64)[0])


def covariance(Q) -> np.ndarray:
    """Dense Q^{-1}; intended for small problems."""
    c = dense_cholesky(Q)
    n = c.shape[0]
    return sla.cho_solve((c, True), np.eye(n))


def marginal_variances(Q) -> np.ndarray:
    c = dense_cholesky(Q)
    Linv = sla.solve_triangular(c, np.eye(c.shape[0]), lower=True)
    return np.einsum("ij,ij->j", Linv, Linv)


def thickness_field(sample: FieldSample, notional: float) -> np.ndarray:
    """Wall thickness notional + u1 + u2 at every vertex."""
    return notional + sample.u1 + sample.u2


def thickness_histogram(values, bin_width: float = 0.05):
    """Counts on bins centred at integer multiples of ``bin_width``.

    Returns (centres, counts) covering the occupied range only.
    """
    v = np.asarray(values, dtype=float).ravel()
    idx = np.rint(v / bin_width).astype(np.int64)
    lo, hi = idx.min(), idx.max()
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    centres = np.arange(lo, hi + 1) * bin_width
    return centres, counts

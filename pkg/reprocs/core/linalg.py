"""
Dense linear-algebra primitives for reprocs.
Basis matrices, subspace distance, (un)denseness coefficients, thresholded
eigensplits and restricted least squares through an orthogonal factorization.
"""

import logging
import math
from dataclasses import dataclass
from itertools import combinations, islice
from typing import Iterable, Iterator, Literal, Optional

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatchError,
    EigenDecompositionError,
    EnumerationBudgetError,
    NotOrthonormalError,
    NotSymmetricError,
    SingularSystemError,
)
from .settings import get_tolerances

logger = logging.getLogger(__name__)

KappaMode = Literal["exact", "bound", "auto"]

# Symmetry slack accepted by eigenvectors_above before symmetrizing
SYMMETRY_TOL = 1e-8

# Subsets evaluated per batched LAPACK call during enumeration
_ENUM_CHUNK = 8192


# ==================== BASIS MATRICES ====================


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """
    An n x r matrix with orthonormal columns.
    r = 0 is the empty basis. The stored array is a read-only copy.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=float, copy=True)
        if data.ndim == 1:
            data = data.reshape(-1, 1)
        if data.ndim != 2:
            raise DimensionMismatchError(f"basis must be 2-D, got shape {data.shape}")
        n, r = data.shape
        if r > n:
            raise DimensionMismatchError(f"basis has {r} columns but only {n} rows")
        if r:
            err = orthonormality_error(data)
            tol = get_tolerances().orthonormality
            if err > tol:
                raise NotOrthonormalError(
                    f"columns are not orthonormal (max |P^T P - I| = {err:.3e} > {tol:.1e})"
                )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def r(self) -> int:
        return self.data.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.r == 0

    @classmethod
    def empty(cls, n: int) -> "BasisMatrix":
        """The empty basis of R^n"""
        return cls(np.zeros((n, 0)))

    @classmethod
    def orthonormalize(cls, A: np.ndarray, against: Optional["BasisMatrix"] = None) -> "BasisMatrix":
        """
        Orthonormalize the columns of A in order (Gram-Schmidt via thin QR).

        Args:
            A: n x k matrix
            against: Optional basis the result must be orthogonal to

        Returns:
            BasisMatrix spanning the numerically independent part of A's columns
        """
        A = np.array(A, dtype=float, copy=True)
        if A.ndim == 1:
            A = A.reshape(-1, 1)
        n = A.shape[0]
        if against is not None:
            if against.n != n:
                raise DimensionMismatchError(f"cannot orthonormalize {n}-row matrix against n={against.n}")
            # Two passes keep the result orthogonal to `against` to working precision
            A = against.project_out(against.project_out(A))
        if A.shape[1] == 0:
            return cls.empty(n)
        Q, R = scipy.linalg.qr(A, mode="economic")
        diag = np.diag(R)
        signs = np.where(diag < 0, -1.0, 1.0)
        Q = Q * signs
        scale = max(1.0, float(np.max(np.abs(diag))))
        keep = np.abs(diag) > get_tolerances().rank_cutoff * scale
        return cls(Q[:, keep])

    def hstack(self, other: "BasisMatrix") -> "BasisMatrix":
        """[self other]; the result is validated as a basis"""
        if other.n != self.n:
            raise DimensionMismatchError(f"cannot stack bases with n={self.n} and n={other.n}")
        return BasisMatrix(np.hstack([self.data, other.data]))

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        """P^T v"""
        return self.data.T @ v

    def project(self, v: np.ndarray) -> np.ndarray:
        """P P^T v for a vector or a matrix of columns"""
        return self.data @ (self.data.T @ v)

    def project_out(self, v: np.ndarray) -> np.ndarray:
        """(I - P P^T) v for a vector or a matrix of columns"""
        return v - self.data @ (self.data.T @ v)

    def projector(self) -> np.ndarray:
        return self.data @ self.data.T

    def __repr__(self) -> str:
        return f"BasisMatrix(n={self.n}, r={self.r})"


def orthonormality_error(A: np.ndarray) -> float:
    """max |A^T A - I|"""
    if A.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(A.T @ A - np.eye(A.shape[1]))))


def dif(Phat: BasisMatrix, P: BasisMatrix) -> float:
    """
    Subspace distance ||(I - Phat Phat^T) P||_2, in [0, 1].

    Args:
        Phat: Estimated basis
        P: Reference basis

    Returns:
        0 when range(P) lies inside range(Phat); 1 when some direction of P is orthogonal to Phat
    """
    if Phat.n != P.n:
        raise DimensionMismatchError(f"dif of bases with n={Phat.n} and n={P.n}")
    if P.r == 0:
        return 0.0
    residual = Phat.project_out(P.data)
    value = float(np.linalg.norm(residual, 2))
    return min(1.0, max(0.0, value))


def incoherence(P: BasisMatrix) -> float:
    """Smallest mu with max_i ||P^T e_i||^2 <= mu r / n"""
    if P.r == 0:
        return 0.0
    row_energy = np.sum(P.data**2, axis=1)
    return float(P.n / P.r * np.max(row_energy))


# ==================== DENSENESS AND RIC ====================


def as_index_set(T: Iterable[int], n: int) -> np.ndarray:
    """Sorted unique index array, bounds-checked against n"""
    idx = np.unique(np.asarray(list(T) if not isinstance(T, np.ndarray) else T, dtype=np.intp))
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise DimensionMismatchError(f"index set {idx.tolist()} out of range for n={n}")
    return idx


def _check_budget(n: int, s: int) -> int:
    if s < 1:
        raise DimensionMismatchError(f"s must be positive, got {s}")
    if s > n:
        raise DimensionMismatchError(f"s={s} exceeds n={n}")
    count = math.comb(n, s)
    budget = get_tolerances().enumeration_budget
    if count > budget:
        raise EnumerationBudgetError(count, budget)
    return count


def _subset_chunks(n: int, s: int) -> Iterator[np.ndarray]:
    it = combinations(range(n), s)
    while True:
        block = list(islice(it, _ENUM_CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.intp)


def kappa_one(P: BasisMatrix) -> float:
    """Largest row norm of P"""
    if P.r == 0:
        return 0.0
    return float(np.max(np.linalg.norm(P.data, axis=1)))


def kappa_s(P: BasisMatrix, s: int, mode: KappaMode = "exact") -> float:
    """
    Denseness coefficient max_{|T| <= s} ||I_T^T P||_2.

    Args:
        P: Basis matrix
        s: Support size
        mode: "exact" enumerates all size-s row subsets, "bound" returns sqrt(s) * kappa_1,
              "auto" enumerates only for small n within the enumeration budget

    Returns:
        The coefficient (or its upper bound in bound mode)
    """
    if s < 1 or s > P.n:
        raise DimensionMismatchError(f"kappa_s needs 1 <= s <= n, got s={s}, n={P.n}")
    if mode == "auto":
        tol = get_tolerances()
        small = P.n <= tol.exact_kappa_max_n and math.comb(P.n, s) <= tol.enumeration_budget
        mode = "exact" if small else "bound"
    if mode == "bound":
        return math.sqrt(s) * kappa_one(P)
    if mode != "exact":
        raise ValueError(f"unknown kappa mode {mode!r}")

    _check_budget(P.n, s)
    if P.r == 0:
        return 0.0
    best = 0.0
    for idx in _subset_chunks(P.n, s):
        rows = P.data[idx]  # (B, s, r)
        sv = np.linalg.svd(rows, compute_uv=False)
        best = max(best, float(np.max(sv[:, 0])))
    return best


def ric_delta(P: BasisMatrix, s: int) -> float:
    """
    Restricted isometry constant delta_s of I - P P^T by support enumeration.
    Extremizes the eigenvalues of every restricted Gram matrix Phi_T^T Phi_T.
    """
    _check_budget(P.n, s)
    if P.r == 0:
        return 0.0
    Phi = np.eye(P.n) - P.projector()
    delta = 0.0
    for idx in _subset_chunks(P.n, s):
        cols = np.moveaxis(Phi[:, idx], 1, 0)  # (B, n, s)
        gram = np.swapaxes(cols, 1, 2) @ cols
        eig = np.linalg.eigvalsh(gram)
        delta = max(delta, float(np.max(eig[:, -1] - 1.0)), float(np.max(1.0 - eig[:, 0])))
    return delta


# ==================== EIGENSPLITS ====================


@dataclass(frozen=True, eq=False)
class EigenSplit:
    """Eigenvectors at or above a threshold plus the full spectrum split in two"""

    basis: BasisMatrix
    eigenvalues_kept: np.ndarray
    eigenvalues_dropped: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.r

    @property
    def lambda_max(self) -> float:
        values = np.concatenate([self.eigenvalues_kept, self.eigenvalues_dropped])
        return float(values.max()) if values.size else 0.0


def _split(eigenvalues: np.ndarray, vectors: np.ndarray, thresh: float, n_total: int) -> EigenSplit:
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    # stable sort: equal eigenvalues keep ascending original index
    order = np.argsort(-eigenvalues, kind="stable")
    values = eigenvalues[order]
    keep = values >= thresh
    basis = BasisMatrix(vectors[:, order[keep]])
    dropped = values[~keep]
    pad = n_total - eigenvalues.size
    if pad > 0:
        dropped = np.concatenate([dropped, np.zeros(pad)])
    return EigenSplit(basis=basis, eigenvalues_kept=values[keep], eigenvalues_dropped=dropped)


def eigenvectors_above(M: np.ndarray, thresh: float) -> EigenSplit:
    """
    Basis for the eigenvectors of a symmetric PSD matrix with eigenvalue >= thresh.

    Args:
        M: n x n symmetric matrix (symmetrized internally)
        thresh: Non-negative threshold; eigenvalues equal to it are kept

    Returns:
        EigenSplit with kept/dropped eigenvalues in descending order
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {M.shape}")
    if thresh < 0:
        raise ValueError(f"thresh must be non-negative, got {thresh}")
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > SYMMETRY_TOL:
        raise NotSymmetricError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    sym = (M + M.T) / 2
    try:
        w, V = scipy.linalg.eigh(sym)
    except np.linalg.LinAlgError as e:
        raise EigenDecompositionError(f"symmetric eigensolver failed: {e}") from e
    return _split(w, V, thresh, M.shape[0])


def thin_svd(D: np.ndarray):
    """Thin SVD with a gesvd fallback when gesdd does not converge"""
    try:
        return scipy.linalg.svd(D, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.warning("gesdd did not converge, retrying with gesvd")
    try:
        return scipy.linalg.svd(D, full_matrices=False, lapack_driver="gesvd")
    except np.linalg.LinAlgError as e:
        raise EigenDecompositionError(f"SVD failed: {e}") from e


def eigensplit_from_data(D: np.ndarray, scale: float, thresh: float) -> EigenSplit:
    """
    EigenSplit of (1/scale) D D^T computed from the thin SVD of D.
    Eigenvalues are sigma^2 / scale; the n - rank structural zeros are reported as dropped.
    """
    D = np.asarray(D, dtype=float)
    if D.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D data matrix, got shape {D.shape}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if thresh <= 0:
        raise ValueError(f"thresh must be positive for data eigensplits, got {thresh}")
    n = D.shape[0]
    if D.shape[1] == 0 or not np.any(D):
        return EigenSplit(BasisMatrix.empty(n), np.zeros(0), np.zeros(n))
    U, sv, _ = thin_svd(D)
    return _split(sv**2 / scale, U, thresh, n)


# ==================== RESTRICTED LEAST SQUARES ====================


def restricted_columns(basis: BasisMatrix, T: np.ndarray) -> np.ndarray:
    """Columns T of Phi = I - P P^T"""
    A = -basis.data @ basis.data[T].T
    A[T, np.arange(T.size)] += 1.0
    return A


def projected_ls(basis: BasisMatrix, T: Iterable[int], y: np.ndarray) -> np.ndarray:
    """
    x supported on T with x_T = (Phi_T)^+ y, where Phi = I - P P^T.

    Solved through a thin QR of Phi_T; raises SingularSystemError when the
    smallest singular value of Phi_T is at or below the rank cutoff.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size != basis.n:
        raise DimensionMismatchError(f"y has length {y.size}, expected {basis.n}")
    T = as_index_set(T, basis.n)
    x = np.zeros(basis.n)
    if T.size == 0:
        return x
    A = restricted_columns(basis, T)
    Q, R = scipy.linalg.qr(A, mode="economic")
    sigma_min = float(scipy.linalg.svdvals(R)[-1])
    cutoff = get_tolerances().rank_cutoff
    if sigma_min <= cutoff:
        raise SingularSystemError(sigma_min, cutoff)
    x[T] = scipy.linalg.solve_triangular(R, Q.T @ y)
    return x

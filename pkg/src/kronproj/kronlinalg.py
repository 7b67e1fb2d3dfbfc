"""Dense linear-algebra kernels for Kronecker-structured operations.

Everything in this package shares one vectorization convention, fixed here:
``vec`` stacks columns (Fortran order), and the Kronecker product follows
numpy's ``np.kron``.  Under that pairing the central identity is

    (A (x) B) vec(X) = vec(B X A^T),

which lets a Kronecker matrix-vector product run in O(n^3) without ever
materializing the n^2 x n^2 operator.  Diagonal Kronecker factors are kept
as length-n^2 vectors with entry ``a[i] * b[j]`` at flat index ``i*n + j``.

All functions are pure; there is no shared mutable state.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    IllConditionedError,
    NotPSDError,
    NotSymmetricError,
)

# Guard applied to every solve; exceeding it is recoverable (callers fall
# back to a full recompute rather than trusting the result).
CONDITION_BOUND = 1e12

SYMMETRY_TOL = 1e-10
EIG_CLAMP_TOL = 1e-10


def vec(X):
    """Column-stacking vectorization of a matrix."""
    return np.asarray(X, dtype=float).ravel(order="F")


def unvec(x, rows, cols=None):
    """Inverse of :func:`vec`: reshape a vector to ``rows x cols``."""
    if cols is None:
        cols = rows
    x = np.asarray(x, dtype=float)
    if x.size != rows * cols:
        raise DimensionError(f"cannot reshape length {x.size} to {rows}x{cols}")
    return x.reshape((rows, cols), order="F")


def kron_apply(A, B, x):
    """Compute (A (x) B) x without materializing the Kronecker product.

    ``x`` is read as vec(X) in the package's column-stacking convention and
    the result is vec(B X A^T), an O(n^3) computation.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[1]
    m = B.shape[1]
    x = np.asarray(x, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or x.size != n * m:
        raise DimensionError(
            f"kron_apply: A {A.shape}, B {B.shape} need x of length "
            f"{n * m}, got {x.size}"
        )
    X = x.reshape((m, n), order="F")
    return (B @ X @ A.T).ravel(order="F")


def kron_diag(a, b):
    """Diagonal of diag(a) (x) diag(b) as a flat vector.

    Entry at flat index ``i*len(b) + j`` equals ``a[i] * b[j]``, matching
    the ordering of :func:`kron_apply`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.outer(a, b).ravel()


@dataclass
class EigenWeight:
    """Weight matrix W = U diag(eigvals) U^T held in factored form.

    ``basis`` is orthonormal within 1e-10 and every eigenvalue is
    nonnegative; this is the concrete form of the shared-eigenbasis
    assumption used throughout the maintenance code.
    """

    basis: np.ndarray
    eigvals: np.ndarray

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=float)
        self.eigvals = np.asarray(self.eigvals, dtype=float)
        n = self.basis.shape[0]
        if self.basis.shape != (n, n) or self.eigvals.shape != (n,):
            raise DimensionError("EigenWeight: basis must be n x n, eigvals length n")
        gram_err = np.max(np.abs(self.basis.T @ self.basis - np.eye(n)))
        if gram_err > 1e-10:
            raise NotSymmetricError(
                f"EigenWeight basis not orthonormal (|U^T U - I| = {gram_err:.2e})"
            )
        if np.min(self.eigvals) < 0:
            raise NotPSDError("EigenWeight eigenvalues must be nonnegative")

    @property
    def n(self):
        return self.basis.shape[0]

    def matrix(self):
        """Materialize W = U diag(eigvals) U^T."""
        return (self.basis * self.eigvals) @ self.basis.T


def sym_eigen(W, sym_tol=SYMMETRY_TOL):
    """Spectral decomposition of a symmetric PSD matrix.

    Returns an :class:`EigenWeight` with eigenvalues sorted nonincreasing.
    Eigenvalues in [-1e-10, 0) are clamped to zero (floating-point noise on
    PSD inputs is expected); anything below that raises.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError("sym_eigen expects a square matrix")
    scale = max(1.0, float(np.max(np.abs(W))) if W.size else 1.0)
    asym = float(np.max(np.abs(W - W.T))) if W.size else 0.0
    if asym > sym_tol * scale:
        raise NotSymmetricError(f"matrix not symmetric (max asymmetry {asym:.2e})")
    lam, U = np.linalg.eigh(0.5 * (W + W.T))
    clamp = EIG_CLAMP_TOL * scale
    if lam[0] < -clamp:
        raise NotPSDError(f"eigenvalue {lam[0]:.3e} below PSD tolerance")
    lam = np.clip(lam, 0.0, None)
    order = np.argsort(lam, kind="stable")[::-1]
    return EigenWeight(basis=U[:, order], eigvals=lam[order])


def solve_spd(A, B, cond_bound=CONDITION_BOUND):
    """Solve A X = B for symmetric positive definite A via Cholesky.

    Raises :class:`NotPSDError` if the factorization fails and
    :class:`IllConditionedError` if the condition estimate exceeds
    ``cond_bound``; both are signals to recompute upstream state.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
        raise DimensionError(f"solve_spd: A {A.shape} incompatible with B {B.shape}")
    scale = max(1.0, float(np.max(np.abs(A))))
    if float(np.max(np.abs(A - A.T))) > SYMMETRY_TOL * scale:
        raise NotSymmetricError("solve_spd: matrix not symmetric")
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPSDError(f"solve_spd: Cholesky failed ({exc})") from exc
    d = np.diag(c)
    # Squared diagonal ratio of the Cholesky factor bounds kappa from below
    # and is essentially free; fall back on it as the guard.
    cond_est = (np.max(d) / np.min(d)) ** 2
    if not np.isfinite(cond_est) or cond_est > cond_bound:
        raise IllConditionedError(
            f"solve_spd: condition estimate {cond_est:.2e} exceeds {cond_bound:.0e}"
        )
    return scipy.linalg.cho_solve((c, low), B, check_finite=False)


def woodbury_update(A_inv, Umat, C, V, cond_bound=CONDITION_BOUND):
    """Low-rank inverse update (A + U C V)^{-1} from A^{-1}.

    Evaluates A^{-1} - A^{-1} U (C^{-1} + V A^{-1} U)^{-1} V A^{-1}.  Both C
    and the inner matrix must be invertible within the condition guard;
    violations raise :class:`IllConditionedError` so callers can fall back
    to a full recompute.
    """
    A_inv = np.asarray(A_inv, dtype=float)
    Umat = np.atleast_2d(np.asarray(Umat, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = A_inv.shape[0]
    k = C.shape[0]
    if Umat.shape != (n, k) or C.shape != (k, k) or V.shape != (k, n):
        raise DimensionError(
            f"woodbury_update: A_inv {A_inv.shape}, U {Umat.shape}, "
            f"C {C.shape}, V {V.shape} do not conform"
        )
    cond_C = np.linalg.cond(C)
    if not np.isfinite(cond_C) or cond_C > cond_bound:
        raise IllConditionedError(f"woodbury_update: C condition {cond_C:.2e}")
    AiU = A_inv @ Umat
    inner = np.linalg.inv(C) + V @ AiU
    cond_inner = np.linalg.cond(inner)
    if not np.isfinite(cond_inner) or cond_inner > cond_bound:
        raise IllConditionedError(
            f"woodbury_update: inner matrix condition {cond_inner:.2e}"
        )
    VAi = V @ A_inv
    return A_inv - AiU @ np.linalg.solve(inner, VAi)

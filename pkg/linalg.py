"""Dense small-matrix primitives and the discrete Lyapunov / Riccati solvers everything else is built on."""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from exceptions import ArgumentError, ConvergenceError, DimensionError, InstabilityError

logger = logging.getLogger(__name__)

# Above this state dimension the Kronecker system (d^2 x d^2) gets too large for a direct solve
KRONECKER_MAX_DIM = 32
SYMMETRY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-10
    max_iterations: int = 100_000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ArgumentError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ArgumentError(f"max_iterations must be at least 1, got {self.max_iterations}")


DEFAULT_SOLVER_OPTIONS = SolverOptions()


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """
    Convert values into a finite float64 2-D array; scalars become 1x1 and vectors a single row.

    :param values: anything np.asarray accepts
    :param name: name used in error messages

    :return: a new 2-D float64 array

    :raises DimensionError: if values has more than two dimensions or no entries
    :raises ArgumentError: if any entry is NaN or infinite
    """
    matrix = np.array(values, dtype=float)
    if matrix.ndim > 2:
        raise DimensionError(f"{name} must be at most 2-dimensional, got shape {matrix.shape}")
    matrix = np.atleast_2d(matrix)
    if matrix.size == 0:
        raise DimensionError(f"{name} must not be empty")
    if not np.all(np.isfinite(matrix)):
        raise ArgumentError(f"{name} contains non-finite entries")
    return matrix


def require_square(m: np.ndarray, name: str = "matrix") -> int:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    return m.shape[0]


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_symmetric(m: np.ndarray, tolerance: float = SYMMETRY_TOLERANCE) -> bool:
    if m.shape[0] != m.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(m))))
    return float(np.max(np.abs(m - m.T))) <= tolerance * scale


def min_eigenvalue(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(la.eigvalsh(symmetrize(m))[0])


def is_positive_semidefinite(m: np.ndarray, tolerance: float = SYMMETRY_TOLERANCE) -> bool:
    scale = max(1.0, float(np.max(np.abs(m))))
    return is_symmetric(m, tolerance) and min_eigenvalue(m) >= -tolerance * scale


def is_positive_definite(m: np.ndarray, tolerance: float = SYMMETRY_TOLERANCE) -> bool:
    if not is_symmetric(m, tolerance):
        return False
    try:
        la.cholesky(symmetrize(m), lower=True)
    except la.LinAlgError:
        return False
    return True


def spectral_radius(m: np.ndarray) -> float:
    """
    Largest eigenvalue modulus of a square matrix.

    :raises DimensionError: if m is not square
    """
    m = np.asarray(m, dtype=float)
    require_square(m)
    return float(np.max(np.abs(la.eigvals(m))))


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=float), ord='fro'))


def spectral_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=float), ord=2))


def lyapunov_residual(F: np.ndarray, W: np.ndarray, sigma: np.ndarray) -> float:
    return frobenius_norm(sigma - W - F @ sigma @ F.T)


def solve_discrete_lyapunov(F: np.ndarray, W: np.ndarray,
                            opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> np.ndarray:
    """
    Solve Sigma = W + F Sigma F^T for a stable F.

    Up to KRONECKER_MAX_DIM the vectorised system (I - F kron F) vec(Sigma) = vec(W) is solved directly,
      above that (or when the direct solution misses the tolerance) the fixed point
      Sigma <- W + F Sigma F^T is iterated.

    :param F: square matrix with spectral radius below one
    :param W: symmetric positive semi-definite matrix of the same size
    :param opts: SolverOptions with the Frobenius residual tolerance and the iteration cap

    :return: the symmetric solution Sigma

    :raises DimensionError: if F is not square or W does not match it
    :raises InstabilityError: if rho(F) >= 1
    :raises ConvergenceError: if the residual is not below opts.tolerance within opts.max_iterations
    """
    F = np.asarray(F, dtype=float)
    W = np.asarray(W, dtype=float)
    d = require_square(F, "F")
    if W.shape != (d, d):
        raise DimensionError(f"W must have shape {(d, d)}, got {W.shape}")
    radius = spectral_radius(F)
    if radius >= 1:
        raise InstabilityError(f"Lyapunov equation has no solution for rho(F) = {radius:.6f} >= 1", radius=radius)

    if d <= KRONECKER_MAX_DIM:
        # Row-major vec: vec(F X F^T) = (F kron F) vec(X)
        lhs = np.eye(d * d) - np.kron(F, F)
        sigma = symmetrize(la.solve(lhs, W.reshape(-1)).reshape(d, d))
    else:
        sigma = symmetrize(W)

    residual = lyapunov_residual(F, W, sigma)
    iterations = 0
    while residual > opts.tolerance:
        if iterations >= opts.max_iterations:
            raise ConvergenceError("discrete Lyapunov iteration did not converge", residual, iterations)
        sigma = symmetrize(W + F @ sigma @ F.T)
        residual = lyapunov_residual(F, W, sigma)
        iterations += 1
    if iterations:
        logger.debug("Lyapunov fixed point needed %d iterations, residual %.3e", iterations, residual)
    return sigma


def riccati_map(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, P: np.ndarray) -> np.ndarray:
    """One step of Riccati value iteration: Q + A^T P A - A^T P B (R + B^T P B)^-1 B^T P A."""
    gain_term = la.solve(R + B.T @ P @ B, B.T @ P @ A, assume_a='sym')
    return symmetrize(Q + A.T @ P @ A - A.T @ P @ B @ gain_term)


def dare_residual(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, P: np.ndarray) -> float:
    return frobenius_norm(P - riccati_map(A, B, Q, R, P))


def solve_dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               opts: SolverOptions = DEFAULT_SOLVER_OPTIONS) -> tuple[np.ndarray, np.ndarray]:
    """
    Solve the discrete algebraic Riccati equation by value iteration started at P = Q.

    :param A: d x d dynamics matrix
    :param B: d x k input matrix
    :param Q: d x d positive semi-definite state cost
    :param R: k x k positive definite input cost
    :param opts: SolverOptions, the DARE residual must drop below opts.tolerance

    :return: (P, K_star) with K_star = (R + B^T P B)^-1 B^T P A

    :raises ArgumentError: if R is not positive definite or the shapes are inconsistent
    :raises ConvergenceError: if value iteration does not reach the tolerance
    :raises InstabilityError: if the resulting gain does not stabilize (A, B)
    """
    A, B, Q, R = (np.asarray(m, dtype=float) for m in (A, B, Q, R))
    d = require_square(A, "A")
    if B.ndim != 2 or B.shape[0] != d:
        raise DimensionError(f"B must have {d} rows, got shape {B.shape}")
    k = B.shape[1]
    if Q.shape != (d, d) or R.shape != (k, k):
        raise DimensionError(f"Q must be {(d, d)} and R {(k, k)}, got {Q.shape} and {R.shape}")
    if not is_positive_definite(R):
        raise ArgumentError("R must be symmetric positive definite")

    P = symmetrize(Q)
    residual = np.inf
    for iteration in range(opts.max_iterations):
        P_next = riccati_map(A, B, Q, R, P)
        residual = frobenius_norm(P_next - P)
        P = P_next
        if residual <= opts.tolerance:
            break
    else:
        raise ConvergenceError("Riccati value iteration did not converge", residual, opts.max_iterations)

    K_star = la.solve(R + B.T @ P @ B, B.T @ P @ A, assume_a='sym')
    radius = spectral_radius(A - B @ K_star)
    if radius >= 1:
        raise InstabilityError(f"Riccati solution does not stabilize the system, rho = {radius:.6f}", radius=radius)
    logger.debug("DARE solved in %d iterations, residual %.3e", iteration + 1, residual)
    return P, K_star

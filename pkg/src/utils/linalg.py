"""Dense linear-algebra helpers shared by the censoring and structured solvers."""

import warnings
from typing import Optional

import numpy as np
from scipy import linalg


def negative_inverse(block: np.ndarray) -> np.ndarray:
    """(−W)^{-1} through an LU factorization; raises LinAlgError when W is singular."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(-block, check_finite=True)
    pivots = np.abs(np.diag(lu))
    scale = max(1.0, float(np.max(np.abs(block)))) if block.size else 1.0
    if pivots.size == 0 or pivots.min() <= np.finfo(float).eps * scale * block.shape[0]:
        raise np.linalg.LinAlgError("singular block")
    return linalg.lu_solve((lu, piv), np.eye(block.shape[0]))


def right_solve(x: np.ndarray, block: np.ndarray) -> np.ndarray:
    """x·block^{-1}."""
    return linalg.solve(block.T, x.T).T


def second_smallest_singular_value(matrix: np.ndarray) -> Optional[float]:
    if matrix.shape[0] < 2:
        return None
    values = np.sort(linalg.svdvals(matrix))
    return float(values[1])


def solve_normalized(matrix: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Solve x·matrix = 0 subject to x·weights = 1 as an augmented least-squares system."""
    n = matrix.shape[0]
    augmented = np.hstack([matrix, np.reshape(weights, (n, 1))])
    rhs = np.zeros(augmented.shape[1])
    rhs[-1] = 1.0
    solution, *_ = linalg.lstsq(augmented.T, rhs)
    return solution


def stationary_vector(generator: np.ndarray, rank_tol: float) -> np.ndarray:
    """
    Stationary row vector of a conservative generator. Raises LinAlgError when
    the null space is more than one-dimensional (reducible generator).
    """
    n = generator.shape[0]
    if n == 1:
        return np.ones(1)
    second = second_smallest_singular_value(generator)
    scale = max(1.0, float(np.max(np.abs(generator))))
    if second is not None and second < rank_tol * scale:
        raise np.linalg.LinAlgError(f"null space has dimension > 1 (second singular value {second:.3g})")
    return solve_normalized(generator, np.ones(n))


"""
Structured solvers for level-independent block sequences.

GI/M/1 type (skip-free upward): level k >= 1 moves to level k+1-j via A_j and
to level 0 via B_{k+1}; level 0 stays via B_1 and climbs via B_0.

M/G/1 type (skip-free downward): level k >= 1 moves to level k+j-1 via A_j,
level 1 drops to level 0 via B_0 and level 0 climbs to level j via B_{j+1}.

Infinite series are truncated at the declared block-sequence length, which the
model layer bounds by max_jump.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from src.config import get_settings
from src.errors import InstabilityError, ModelError, NonConvergenceError, StationarySolveError
from src.state_space import LevelPhaseLayout, ProbabilityVector
from src.utils.linalg import negative_inverse, solve_normalized, stationary_vector


logger = logging.getLogger(__name__)

IterateCallback = Callable[[int, np.ndarray], None]


def _as_blocks(blocks: Sequence[np.ndarray]) -> List[np.ndarray]:
    return [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]


def _spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix)))) if matrix.size else 0.0


def _left_series(A: Sequence[np.ndarray], R: np.ndarray, start: int = 0) -> np.ndarray:
    """Σ_{k>=start} R^k A_k."""
    total = np.zeros_like(A[0])
    power = np.linalg.matrix_power(R, start)
    for k in range(start, len(A)):
        total = total + power @ A[k]
        power = power @ R
    return total


def _right_series(blocks: Sequence[np.ndarray], G: np.ndarray, start: int, shift: int, shape: Tuple[int, int]) -> np.ndarray:
    """Σ_{k>=start} blocks[k] · G^(k-shift)."""
    total = np.zeros(shape)
    if start >= len(blocks):
        return total
    power = np.linalg.matrix_power(G, start - shift)
    for k in range(start, len(blocks)):
        total = total + blocks[k] @ power
        power = power @ G
    return total


# ----------------------------------------------------------------------
# GI/M/1
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GIM1Solution:
    R: np.ndarray
    pi: ProbabilityVector
    residual: float
    iterations: int
    spectral_radius: float

    def __iter__(self):
        return iter((self.R, self.pi))


def _default_layout(B: Sequence[np.ndarray], A: Sequence[np.ndarray], levels: int) -> LevelPhaseLayout:
    m0 = B[1].shape[0]
    m = A[0].shape[0]
    return LevelPhaseLayout((m0,) + (m,) * levels)


def solve_R_gim1(
    A: Sequence[np.ndarray],
    B: Sequence[np.ndarray],
    layout: Optional[LevelPhaseLayout] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    on_iterate: Optional[IterateCallback] = None,
) -> GIM1Solution:
    """
    Minimal nonnegative R of Σ R^k A_k = 0 by successive substitution from 0,
    then the boundary system for (π_0, π_1) and π_k = π_1 R^{k-1}. The
    geometric tail beyond the layout's last level is folded into it.
    """
    settings = get_settings()
    tol = settings.solver_tol if tol is None else tol
    max_iter = settings.solver_max_iter if max_iter is None else max_iter
    A = _as_blocks(A)
    B = _as_blocks(B)
    if len(A) < 2:
        A.append(np.zeros_like(A[0]))
    m = A[0].shape[0]
    try:
        inverse = negative_inverse(A[1])
    except np.linalg.LinAlgError as exc:
        raise InstabilityError("A_1 is singular") from exc

    R = np.zeros((m, m))
    iterations = 0
    while True:
        iterations += 1
        update = (A[0] + _left_series(A, R, start=2)) @ inverse
        change = float(np.max(np.abs(update - R)))
        R = update
        if on_iterate is not None:
            on_iterate(iterations, R)
        if change <= tol:
            break
        if iterations >= max_iter:
            raise InstabilityError(f"R iteration did not settle within {max_iter} iterations (last change {change:.3g})")

    radius = _spectral_radius(R)
    if radius >= 1.0 - 1e-9:
        raise InstabilityError(f"sp(R) = {radius:.12g} >= 1: the structure is not positive recurrent")
    residual = float(np.max(np.abs(_left_series(A, R))))
    logger.debug("[gim1] R converged in %d iterations (sp(R)=%.6g, residual=%.3g)", iterations, radius, residual)

    layout = layout or _default_layout(B, A, 50)
    pi = _gim1_stationary(A, B, R, layout)
    return GIM1Solution(R=R, pi=pi, residual=residual, iterations=iterations, spectral_radius=radius)


def _gim1_stationary(A: List[np.ndarray], B: List[np.ndarray], R: np.ndarray, layout: LevelPhaseLayout) -> ProbabilityVector:
    m0 = B[1].shape[0]
    m = R.shape[0]
    if layout.phase_counts[0] != m0 or any(c != m for c in layout.phase_counts[1:]):
        raise ModelError(f"Layout {layout.phase_counts} does not match block shapes (m_0={m0}, m={m})")
    # level k >= 1 reaches level 0 through B_{k+1} and level 1 through A_k
    to_zero = _left_series(B[2:], R) if len(B) > 2 else np.zeros((m, m0))
    to_one = _left_series(A[1:], R)
    boundary = np.block([[B[1], B[0]], [to_zero, to_one]])
    geometric = linalg.inv(np.eye(m) - R)
    weights = np.concatenate([np.ones(m0), geometric @ np.ones(m)])
    solution = solve_normalized(boundary, weights)
    pi0, pi1 = solution[:m0], solution[m0:]

    L = layout.truncation_level
    blocks = [pi0]
    current = pi1
    for _ in range(1, L):
        blocks.append(current)
        current = current @ R
    blocks.append(current @ geometric)
    vector, correction = ProbabilityVector.project(layout, np.concatenate(blocks))
    if correction > 1e-8:
        raise StationarySolveError(f"GI/M/1 boundary solution needed a correction of {correction:.3g}")
    return vector


# ----------------------------------------------------------------------
# M/G/1
# ----------------------------------------------------------------------

G_RESIDUAL_TOL = 1e-10
G_ROW_SUM_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class MG1Solution:
    G: np.ndarray
    residual: float
    iterations: int
    positive_recurrent: Optional[bool]


def _mg1_recurrent(A: List[np.ndarray]) -> Optional[bool]:
    """θ·Σ(j−1)A_j·e < 0 with θ stationary for ΣA_j; None when ΣA_j is reducible."""
    try:
        theta = stationary_vector(sum(A), get_settings().tol_rank)
    except np.linalg.LinAlgError:
        return None
    drift = sum((j - 1) * float(theta @ block.sum(axis=1)) for j, block in enumerate(A))
    return drift < 0.0


def solve_G_mg1(
    A: Sequence[np.ndarray],
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    on_iterate: Optional[IterateCallback] = None,
) -> MG1Solution:
    """
    Minimal nonnegative G of Σ A_k G^k = 0 by successive substitution from 0.
    The residual must come out at most 1e-10 and, for a positive recurrent
    structure, G must be stochastic to 1e-8.
    """
    settings = get_settings()
    tol = settings.solver_tol if tol is None else tol
    max_iter = settings.solver_max_iter if max_iter is None else max_iter
    A = _as_blocks(A)
    if len(A) < 2:
        A.append(np.zeros_like(A[0]))
    m = A[0].shape[0]
    try:
        inverse = negative_inverse(A[1])
    except np.linalg.LinAlgError as exc:
        raise NonConvergenceError("A_1 is singular") from exc

    G = np.zeros((m, m))
    for iteration in range(1, max_iter + 1):
        update = inverse @ (A[0] + _right_series(A, G, start=2, shift=0, shape=(m, m)))
        change = float(np.max(np.abs(update - G)))
        G = update
        if on_iterate is not None:
            on_iterate(iteration, G)
        if change <= tol:
            break
    else:
        raise NonConvergenceError(f"G iteration did not settle within {max_iter} iterations")

    residual = float(np.max(np.abs(_right_series(A, G, start=0, shift=0, shape=(m, m)))))
    if residual > G_RESIDUAL_TOL:
        raise NonConvergenceError(f"G residual {residual:.3g} exceeds {G_RESIDUAL_TOL:g}")
    recurrent = _mg1_recurrent(A)
    if recurrent:
        row_error = float(np.max(np.abs(G.sum(axis=1) - 1.0)))
        if row_error > G_ROW_SUM_TOL:
            raise NonConvergenceError(f"G is not stochastic (row sums off by {row_error:.3g}) for a positive recurrent structure")
    logger.debug("[mg1] G converged in %d iterations (residual=%.3g)", iteration, residual)
    return MG1Solution(G=G, residual=residual, iterations=iteration, positive_recurrent=recurrent)


@dataclass(frozen=True, eq=False)
class MG1Measures:
    G: np.ndarray
    Psi: np.ndarray
    G1: np.ndarray
    Psi0: np.ndarray
    R0: Tuple[np.ndarray, ...] = field(default_factory=tuple)
    R: Tuple[np.ndarray, ...] = field(default_factory=tuple)


def mg1_r_measure(G: np.ndarray, A: Sequence[np.ndarray], B: Sequence[np.ndarray]) -> MG1Measures:
    """
    Ψ = A_1 + Σ_{k>=2} A_k G^{k-1}, G_1 = (−Ψ)^{-1}B_0,
    Ψ_0 = B_1 + Σ_{k>=2} B_k G^{k-2} G_1 and, for j >= 1,
    R_{0,j} = [Σ_{k>=j+1} B_k G^{k-j-1}](−Ψ)^{-1}, R_j = [Σ_{k>=j+1} A_k G^{k-j-1}](−Ψ)^{-1}.
    """
    A = _as_blocks(A)
    B = _as_blocks(B)
    m = G.shape[0]
    m0 = B[1].shape[0]
    psi = A[1] + _right_series(A, G, start=2, shift=1, shape=(m, m))
    try:
        inverse = negative_inverse(psi)
    except np.linalg.LinAlgError as exc:
        raise StationarySolveError("Psi is singular") from exc
    G1 = inverse @ B[0]
    psi0 = B[1] + _right_series(B, G, start=2, shift=2, shape=(m0, m)) @ G1
    R0 = tuple(
        _right_series(B, G, start=j + 1, shift=j + 1, shape=(m0, m)) @ inverse for j in range(1, len(B) - 1)
    )
    R = tuple(_right_series(A, G, start=j + 1, shift=j + 1, shape=(m, m)) @ inverse for j in range(1, len(A) - 1))
    return MG1Measures(G=G, Psi=psi, G1=G1, Psi0=psi0, R0=R0, R=R)


def mg1_stationary(measures: MG1Measures, layout: LevelPhaseLayout) -> ProbabilityVector:
    """
    π_0 = τx_0, π_k = π_0R_{0,k} + Σ_{i=1}^{k-1} π_iR_{k-i}; the mass beyond L
    comes from the closed form Σ_{k>=1}π_k = π_0ΣR_{0,j}(I − ΣR_j)^{-1} and is
    folded into level L.
    """
    m0 = measures.Psi0.shape[0]
    m = measures.Psi.shape[0]
    if layout.phase_counts[0] != m0 or any(c != m for c in layout.phase_counts[1:]):
        raise ModelError(f"Layout {layout.phase_counts} does not match block shapes (m_0={m0}, m={m})")
    try:
        x0 = stationary_vector(measures.Psi0, get_settings().tol_rank)
    except np.linalg.LinAlgError as exc:
        raise StationarySolveError(f"Psi_0 is reducible: {exc}") from exc

    r0_total = sum(measures.R0, np.zeros((m0, m)))
    r_total = sum(measures.R, np.zeros((m, m)))
    if _spectral_radius(r_total) >= 1.0:
        raise InstabilityError("sp(ΣR_j) >= 1: the structure is not positive recurrent")
    upper_mass = x0 @ r0_total @ linalg.inv(np.eye(m) - r_total)

    L = layout.truncation_level
    blocks = [x0]
    for k in range(1, L):
        level = x0 @ measures.R0[k - 1] if k - 1 < len(measures.R0) else np.zeros(m)
        for i in range(1, k):
            if k - i - 1 < len(measures.R):
                level = level + blocks[i] @ measures.R[k - i - 1]
        blocks.append(level)
    folded = upper_mass - sum(blocks[1:], np.zeros(m))
    blocks.append(np.clip(folded, 0.0, None))
    return ProbabilityVector.project(layout, np.concatenate(blocks))[0]


# ----------------------------------------------------------------------
# Mean drift (QBD)
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class MeanDrift:
    theta: Tuple[float, ...]
    up_rate: float
    down_rate: float
    stable: bool


def mean_drift(A0: np.ndarray, A1: np.ndarray, A2: np.ndarray) -> MeanDrift:
    """θA = 0 for A = A_0 + A_1 + A_2; stable iff θA_2e > θA_0e."""
    generator = A0 + A1 + A2
    try:
        theta = stationary_vector(generator, get_settings().tol_rank)
    except np.linalg.LinAlgError as exc:
        raise StationarySolveError(f"A(p) is reducible: {exc}") from exc
    up = float(theta @ A0.sum(axis=1))
    down = float(theta @ A2.sum(axis=1))
    return MeanDrift(theta=tuple(float(t) for t in theta), up_rate=up, down_rate=down, stable=down > up)


def qbd_mean_drift(spec, p: ProbabilityVector) -> MeanDrift:
    blocks = spec.structured_blocks(p)
    if blocks.kind != "qbd":
        raise ModelError(f"Mean drift needs a QBD model, got {spec.family_name}")
    A0, A1, A2 = blocks.A
    return mean_drift(A0, A1, A2)

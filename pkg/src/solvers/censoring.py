"""
Censoring and the UL-type RG-factorization Γ = [I − R_U]Ψ_D[I − G_L].

Levels are eliminated from the truncation level downward. Eliminating level n
from the chain censored to levels 0..n gives

    R_{i,n} = φ_{i,n}(−Ψ_n)^{-1},  G_{n,j} = (−Ψ_n)^{-1}φ_{n,j},  Ψ_n = φ_{n,n}

and the chain censored to levels 0..n−1 is φ[:n,:n] + φ[:n,n](−Ψ_n)^{-1}φ[n,:n].
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.config import get_settings
from src.errors import CensoringError, FactorizationError, StationarySolveError
from src.state_space import BlockGenerator, LevelPhaseLayout, ProbabilityVector
from src.utils.linalg import negative_inverse, stationary_vector


logger = logging.getLogger(__name__)


def _coupled(block: np.ndarray) -> bool:
    return bool(block.size) and bool(np.any(block != 0.0))


def _eliminate(phi: np.ndarray, start: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Remove the trailing block phi[start:, start:]. Returns the censored matrix
    and the R and G blocks of the removed level. Blocks without coupling to the
    remaining levels are dropped without inverting.
    """
    up = phi[:start, start:]
    down = phi[start:, :start]
    top = phi[start:, start:]
    if not _coupled(up) and not _coupled(down):
        return phi[:start, :start].copy(), np.zeros_like(up), np.zeros_like(down)
    inverse = negative_inverse(top)
    r_block = up @ inverse
    g_block = inverse @ down
    return phi[:start, :start] + r_block @ down, r_block, g_block


def censor(gamma: BlockGenerator, n: int) -> BlockGenerator:
    """Generator of the chain censored to levels 0..n."""
    layout = gamma.layout
    L = layout.truncation_level
    if not 0 <= n < L:
        raise CensoringError(f"Cannot censor to level {n}; need 0 <= n < L = {L}", n)
    phi = np.array(gamma.matrix, dtype=float)
    for level in range(L, n, -1):
        try:
            phi, _, _ = _eliminate(phi, layout.offsets[level])
        except np.linalg.LinAlgError as exc:
            raise CensoringError("Singular diagonal block during elimination", level) from exc
    return BlockGenerator(layout.truncated(n), _conservative(phi))


def _conservative(phi: np.ndarray) -> np.ndarray:
    """Re-derive the diagonal so round-off never breaks the zero row sums."""
    off = phi.copy()
    np.fill_diagonal(off, 0.0)
    off = np.clip(off, 0.0, None)
    np.fill_diagonal(off, -off.sum(axis=1))
    return off


@dataclass(frozen=True, eq=False)
class RGFactors:
    """
    R_U (strictly block-upper), Ψ_D (block-diagonal) and G_L (strictly
    block-lower), stored as full matrices on the layout.
    """

    layout: LevelPhaseLayout
    R_U: np.ndarray
    Psi_D: np.ndarray
    G_L: np.ndarray

    def R(self, i: int, j: int) -> np.ndarray:
        if not i < j:
            raise IndexError(f"R_{{{i},{j}}} needs i < j")
        sl = self.layout.level_slice
        return self.R_U[sl(i), sl(j)]

    def G(self, i: int, j: int) -> np.ndarray:
        if not j < i:
            raise IndexError(f"G_{{{i},{j}}} needs j < i")
        sl = self.layout.level_slice
        return self.G_L[sl(i), sl(j)]

    def Psi(self, n: int) -> np.ndarray:
        sl = self.layout.level_slice(n)
        return self.Psi_D[sl, sl]


def rg_factorize(gamma: BlockGenerator) -> RGFactors:
    layout = gamma.layout
    d = layout.dimension
    R_U = np.zeros((d, d))
    Psi_D = np.zeros((d, d))
    G_L = np.zeros((d, d))
    phi = np.array(gamma.matrix, dtype=float)
    for level in range(layout.truncation_level, 0, -1):
        start, stop = layout.offsets[level], layout.offsets[level + 1]
        Psi_D[start:stop, start:stop] = phi[start:, start:]
        try:
            phi, r_block, g_block = _eliminate(phi, start)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"Singular diagonal block phi_{{{level},{level}}}") from exc
        R_U[:start, start:stop] = r_block
        G_L[start:stop, :start] = g_block
    m0 = layout.phase_counts[0]
    Psi_D[:m0, :m0] = phi
    return RGFactors(layout=layout, R_U=R_U, Psi_D=Psi_D, G_L=G_L)


def reconstruct(factors: RGFactors) -> BlockGenerator:
    identity = np.eye(factors.layout.dimension)
    matrix = (identity - factors.R_U) @ factors.Psi_D @ (identity - factors.G_L)
    return BlockGenerator(factors.layout, matrix)


def stationary_from_rg(factors: RGFactors) -> ProbabilityVector:
    """π_0 = τx_0 with x_0Ψ_0 = 0, then π_k = Σ_{i<k} π_iR_{i,k}; τ normalizes."""
    layout = factors.layout
    psi0 = factors.Psi(0)
    try:
        x0 = stationary_vector(psi0, get_settings().tol_rank)
    except np.linalg.LinAlgError as exc:
        raise StationarySolveError(f"Psi_0 is reducible: {exc}") from exc
    pi = np.zeros(layout.dimension)
    pi[: layout.phase_counts[0]] = x0
    for level in range(1, layout.levels):
        start, stop = layout.offsets[level], layout.offsets[level + 1]
        pi[start:stop] = pi[:start] @ factors.R_U[:start, start:stop]
    if not np.all(np.isfinite(pi)) or pi.sum() <= 0.0:
        raise StationarySolveError("R-measure recursion produced no positive mass")
    logger.debug("[rg] tau = %.6g", 1.0 / pi.sum())
    return ProbabilityVector.project(layout, pi)[0]

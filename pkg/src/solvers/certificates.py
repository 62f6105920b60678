"""Characteristic-equation certificate for a censored boundary generator Ψ_0."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from src.config import get_settings
from src.utils.linalg import second_smallest_singular_value

# largest log|det| that still has a finite float determinant
_LOG_FLOAT_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class Certificate:
    det_value: float
    second_smallest_singular_value: Optional[float]
    passed: bool
    tol_det: float
    tol_rank: float
    drift_norm: Optional[float] = None
    reason: str = ""
    det_sign: float = 0.0
    log_abs_det: float = -math.inf

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def stable_determinant(matrix: np.ndarray) -> Tuple[float, float]:
    """(sign, log|det|) through the LU factors; a singular matrix gives (0, -inf)."""
    P, _, U = linalg.lu(matrix)
    diagonal = np.diag(U)
    if np.any(diagonal == 0.0):
        return 0.0, -math.inf
    sign = float(np.prod(np.sign(diagonal)) * round(np.linalg.det(P)))
    return sign, float(np.sum(np.log(np.abs(diagonal))))


def determinant_value(sign: float, log_abs_det: float) -> float:
    """sign·exp(log|det|), saturated at the largest finite float."""
    if sign == 0.0:
        return 0.0
    if log_abs_det >= _LOG_FLOAT_MAX:
        return sign * float(np.finfo(float).max)
    return sign * math.exp(log_abs_det)


def default_tol_det(psi0: np.ndarray) -> float:
    scale = float(np.max(np.abs(psi0))) if psi0.size else 0.0
    return get_settings().tol_det * max(1.0, scale)


def characteristic_verify(psi0: np.ndarray, tol_det: Optional[float] = None, tol_rank: Optional[float] = None) -> Certificate:
    """
    Pass iff |det Ψ_0| <= tol_det and rank Ψ_0 = m_0 − 1, the latter read off
    the second-smallest singular value. For m_0 = 1 the rank condition reduces
    to the determinant test. The determinant test runs on log|det| so it never
    overflows.
    """
    psi0 = np.atleast_2d(np.asarray(psi0, dtype=float))
    tol_det = default_tol_det(psi0) if tol_det is None else float(tol_det)
    tol_rank = get_settings().tol_rank if tol_rank is None else float(tol_rank)
    sign, log_abs = stable_determinant(psi0)
    second = second_smallest_singular_value(psi0)
    reasons = []
    if sign != 0.0 and not (tol_det > 0.0 and log_abs <= math.log(tol_det)):
        reasons.append(f"log|det Psi_0| = {log_abs:.6g} > log({tol_det:.3g})")
    if second is not None and second < tol_rank:
        reasons.append(f"rank below m_0 - 1 (second singular value {second:.3g} < {tol_rank:.3g})")
    return Certificate(
        det_value=determinant_value(sign, log_abs),
        second_smallest_singular_value=second,
        passed=not reasons,
        tol_det=tol_det,
        tol_rank=tol_rank,
        reason="; ".join(reasons),
        det_sign=sign,
        log_abs_det=log_abs,
    )

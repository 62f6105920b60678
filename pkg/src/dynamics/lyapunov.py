"""
Relative-entropy and Lyapunov diagnostics along the mean-field flow, and the
censored level-0 comparison d/dt p_0 vs p_0Ψ_0(p).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
from scipy.special import xlogy

from src.errors import CensoringError, DomainError, ModelError
from src.dynamics.ode import Trajectory, drift
from src.handlers.failures import FailureLedger
from src.models.spec import GeneratorSpec, evaluate_generator
from src.solvers.censoring import censor
from src.state_space import ProbabilityVector, relative_entropy
from src.transformers.reports import normalize_censored_gap_rows, normalize_entropy_rows


logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9


class ScalarField(Protocol):
    def value(self, y: ProbabilityVector) -> float: ...

    def gradient(self, y: ProbabilityVector) -> np.ndarray: ...


class RelativeEntropyField:
    """g(y) = R(y‖π) with gradient log(y/π) + 1."""

    def __init__(self, pi: ProbabilityVector) -> None:
        self.pi = pi

    def value(self, y: ProbabilityVector) -> float:
        return relative_entropy(y, self.pi)

    def gradient(self, y: ProbabilityVector) -> np.ndarray:
        if np.any(y.values <= 0.0) or np.any(self.pi.values <= 0.0):
            raise DomainError("Relative-entropy gradient needs strictly positive y and pi")
        return np.log(y.values / self.pi.values) + 1.0


class ConstantField:
    def __init__(self, constant: float = 0.0) -> None:
        self.constant = constant

    def value(self, y: ProbabilityVector) -> float:
        return self.constant

    def gradient(self, y: ProbabilityVector) -> np.ndarray:
        return np.zeros(y.layout.dimension)


def reduced_lyapunov(q: ProbabilityVector, pi: ProbabilityVector) -> float:
    """
    Product-measure reduction of the large-deviation Lyapunov function:
    (1/N)R(q^{⊗N}‖π^{⊗N}) = R(q‖π) for every N.
    """
    return relative_entropy(q, pi)


def entropy_formula(generator: np.ndarray, p: ProbabilityVector, q: ProbabilityVector) -> float:
    """
    −Σ_{x≠y} q_yΛ_{yx}[r_y log r_y − r_y log r_x − r_y + r_x] with r = p/q.
    Terms with r_x = 0 < r_y are −∞.
    """
    qv, pv = q.values, p.values
    if np.any((qv == 0.0) & (pv > 0.0)):
        raise DomainError("p has mass where q vanishes")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(qv > 0.0, pv / np.where(qv > 0.0, qv, 1.0), 0.0)
        ry = r[:, None]
        rx = r[None, :]
        bracket = xlogy(ry, ry) - xlogy(ry, rx) - ry + rx
        weights = qv[:, None] * generator
        np.fill_diagonal(weights, 0.0)
        terms = np.where(weights > 0.0, weights * bracket, 0.0)
    return -float(np.sum(terms))


def entropy_decay_report(spec: GeneratorSpec, p_traj: Trajectory, q_traj: Trajectory) -> pd.DataFrame:
    """R(p(t)‖q(t)), its centered finite-difference derivative and the closed-form derivative."""
    if not spec.is_linear:
        raise ModelError("The entropy decay identity only holds for linear generators")
    if len(p_traj) != len(q_traj) or not np.allclose(p_traj.times, q_traj.times, rtol=0.0, atol=1e-12):
        raise ValueError("Trajectories must share one time grid")
    generator = evaluate_generator(spec, p_traj.states[0]).matrix
    values = np.array([relative_entropy(p, q) for p, q in zip(p_traj.states, q_traj.states)])
    numeric = np.gradient(values, p_traj.times) if len(values) > 1 else np.zeros(1)
    rows = [
        {
            "t": float(t),
            "R_value": float(value),
            "dR_dt_numeric": float(slope),
            "dR_dt_formula": entropy_formula(generator, p, q),
        }
        for t, value, slope, p, q in zip(p_traj.times, values, numeric, p_traj.states, q_traj.states)
    ]
    return normalize_entropy_rows(rows)


@dataclass
class LyapunovReport:
    max_violation: float
    violating_points: List[np.ndarray] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    skipped: int = 0


def lyapunov_derivative(spec: GeneratorSpec, g: ScalarField, y: ProbabilityVector) -> float:
    """yΓ(y)·∇g(y)."""
    return float(np.dot(drift(spec, y), g.gradient(y)))


def lyapunov_check(
    spec: GeneratorSpec,
    g: ScalarField,
    samples: int,
    seed: int,
    extra_points: Optional[Sequence[ProbabilityVector]] = None,
) -> LyapunovReport:
    rng = np.random.default_rng(seed)
    points = [ProbabilityVector.project(spec.layout, x)[0] for x in rng.dirichlet(np.ones(spec.layout.dimension), size=samples)]
    points.extend(extra_points or [])
    report = LyapunovReport(max_violation=-np.inf)
    for y in points:
        try:
            value = lyapunov_derivative(spec, g, y)
        except (DomainError, FloatingPointError) as exc:
            logger.debug("[lyapunov] gradient unavailable: %s", exc)
            report.skipped += 1
            continue
        report.values.append(value)
        report.max_violation = max(report.max_violation, value)
        if value > VIOLATION_TOL:
            report.violating_points.append(y.values.copy())
    if not report.values:
        report.max_violation = 0.0
    return report


def censored_trajectory_compare(spec: GeneratorSpec, traj: Trajectory, ledger: Optional[FailureLedger] = None) -> pd.DataFrame:
    """
    Level-0 drift (pΓ(p))_0 against p_0Ψ_0(p) with Ψ_0 = censor(Γ(p), 0),
    one row per stored time and level-0 phase. Exploratory: nothing forces the
    gap to vanish away from fixed points.
    """
    m0 = spec.layout.phase_counts[0]
    rows = []
    for t, p in zip(traj.times, traj.states):
        generator = evaluate_generator(spec, p)
        lhs = (p.values @ generator.matrix)[:m0]
        try:
            psi0 = censor(generator, 0).matrix
        except CensoringError as exc:
            if ledger is not None:
                ledger.send("compare-censored", {"t": float(t)}, exc)
            rows.extend(
                {"t": float(t), "phase": j + 1, "lhs": float(lhs[j]), "rhs": np.nan, "gap": np.nan, "status": "censoring_failed"}
                for j in range(m0)
            )
            continue
        rhs = p.block(0) @ psi0
        rows.extend(
            {"t": float(t), "phase": j + 1, "lhs": float(lhs[j]), "rhs": float(rhs[j]), "gap": float(abs(lhs[j] - rhs[j])), "status": "ok"}
            for j in range(m0)
        )
    return normalize_censored_gap_rows(rows)

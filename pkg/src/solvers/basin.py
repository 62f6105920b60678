"""
Basin scans: follow the mean-field flow from many initial vectors, collect
the distinct long-time limits, classify them, and test local stability by
re-integrating from small perturbations.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import DomainError, MeanFieldError, NonConvergenceError
from src.dynamics.ode import IntegratorConfig, integrate
from src.dynamics.particles import batch_means_se, simulate
from src.handlers.failures import FailureLedger
from src.models.spec import GeneratorSpec
from src.solvers.fixed_point import FixedPointReport, Recipe, algorithm_I, certify, initial_vector, residual_norm
from src.solvers.certificates import Certificate
from src.state_space import ProbabilityVector, l1_distance, mean_level
from src.transformers.reports import normalize_basin_seed_rows, normalize_limit_rows


logger = logging.getLogger(__name__)

CLASSIFICATIONS = ("fixed_point", "suspected_limit_cycle", "non_convergent")
WINDOW_SAMPLES = 50
MIN_PERTURBATIONS = 3


@dataclass(frozen=True)
class Seed:
    label: str
    vector: ProbabilityVector

    @classmethod
    def from_recipe(cls, recipe: Recipe, spec: GeneratorSpec) -> "Seed":
        return cls(recipe.label, initial_vector(recipe, spec.layout))


@dataclass
class SeedOutcome:
    label: str
    classification: str
    limit: Optional[int] = None
    drift_norm: Optional[float] = None
    window_diameter: Optional[float] = None
    state: Optional[ProbabilityVector] = None
    error: str = ""


@dataclass
class Limit:
    index: int
    pi: ProbabilityVector
    classification: str
    drift_norm: float
    seeds: List[str] = field(default_factory=list)
    stability: str = "undetermined"
    certificate: Optional[Certificate] = None
    polish: Optional[FixedPointReport] = None
    return_distances: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "classification": self.classification,
            "stability": self.stability,
            "drift_norm": self.drift_norm,
            "seeds": list(self.seeds),
            "certificate": self.certificate.to_dict() if self.certificate else None,
            "return_distances": list(self.return_distances),
            "level_masses": self.pi.level_masses().tolist(),
            "pi": self.pi.values.tolist(),
        }


@dataclass
class BasinScanReport:
    seeds: List[Seed]
    outcomes: List[SeedOutcome]
    limits: List[Limit]
    parameters: Dict[str, Any] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)

    @property
    def stable_limits(self) -> List[Limit]:
        return [lim for lim in self.limits if lim.classification == "fixed_point" and lim.stability == "locally_stable"]

    @property
    def metastable(self) -> bool:
        return len(self.stable_limits) >= 2

    def seed_frame(self) -> pd.DataFrame:
        rows = [
            {
                "seed": o.label,
                "classification": o.classification,
                "limit": -1 if o.limit is None else o.limit,
                "drift_norm": np.nan if o.drift_norm is None else o.drift_norm,
                "window_diameter": np.nan if o.window_diameter is None else o.window_diameter,
                "error": o.error,
            }
            for o in self.outcomes
        ]
        return normalize_basin_seed_rows(rows)

    def limit_frame(self) -> pd.DataFrame:
        rows = [
            {
                "limit": lim.index,
                "classification": lim.classification,
                "stability": lim.stability,
                "drift_norm": lim.drift_norm,
                "seed_count": len(lim.seeds),
                "certified": bool(lim.certificate is not None and lim.certificate.passed),
            }
            for lim in self.limits
        ]
        return normalize_limit_rows(rows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "parameters": self.parameters,
            "metastable": self.metastable,
            "limits": [lim.to_dict() for lim in self.limits],
            "seeds": [
                {
                    "seed": o.label,
                    "classification": o.classification,
                    "limit": o.limit,
                    "drift_norm": o.drift_norm,
                    "window_diameter": o.window_diameter,
                    "error": o.error,
                }
                for o in self.outcomes
            ],
            "diagnostics": list(self.diagnostics),
        }


def _window_diameter(values: np.ndarray) -> float:
    return float(np.abs(values[:, None, :] - values[None, :, :]).sum(axis=2).max())


def _recurs(values: np.ndarray, diameter: float) -> bool:
    """The last window state comes back close to an earlier one without the window collapsing."""
    if len(values) < 10 or diameter == 0.0:
        return False
    earlier = values[: 3 * len(values) // 4]
    distances = np.abs(earlier - values[-1]).sum(axis=1)
    return bool(distances.min() < 0.05 * diameter)


def _follow(
    spec: GeneratorSpec,
    q: ProbabilityVector,
    t_transient: float,
    t_window: float,
    cfg: IntegratorConfig,
) -> Tuple[ProbabilityVector, np.ndarray]:
    settled = integrate(spec, q, t_transient, IntegratorConfig(**{**cfg.to_dict(), "sample_dt": None})).final
    window = integrate(spec, settled, t_window, IntegratorConfig(**{**cfg.to_dict(), "sample_dt": t_window / WINDOW_SAMPLES}))
    return window.final, window.values


def perturbation_test(
    spec: GeneratorSpec,
    pi: ProbabilityVector,
    count: int,
    size: float,
    t_end: float,
    seed: int,
    cfg: Optional[IntegratorConfig] = None,
) -> List[float]:
    """
    l1 distance back to pi after integrating from `count` random perturbations
    of l1 size `size` (projected onto the simplex) for time t_end.
    """
    cfg = cfg or IntegratorConfig()
    rng = np.random.default_rng(seed)
    distances = []
    for _ in range(count):
        direction = rng.normal(size=pi.layout.dimension)
        direction -= direction.mean()
        direction *= size / np.abs(direction).sum()
        start, _ = ProbabilityVector.project(pi.layout, pi.values + direction)
        final = integrate(spec, start, t_end, IntegratorConfig(**{**cfg.to_dict(), "sample_dt": None})).final
        distances.append(l1_distance(final, pi))
    return distances


def _classify(
    spec: GeneratorSpec,
    seed: Seed,
    t_transient: float,
    t_window: float,
    merge_tol: float,
    epsilon: float,
    cfg: IntegratorConfig,
) -> SeedOutcome:
    final, values = _follow(spec, seed.vector, t_transient, t_window, cfg)
    diameter = _window_diameter(values)
    drift_norm = residual_norm(spec, final)
    if diameter <= merge_tol / 10.0 and drift_norm <= epsilon:
        return SeedOutcome(seed.label, "fixed_point", drift_norm=drift_norm, window_diameter=diameter, state=final)
    if diameter > merge_tol / 10.0 and _recurs(values, diameter):
        mean = ProbabilityVector.project(spec.layout, values.mean(axis=0))[0]
        return SeedOutcome(seed.label, "suspected_limit_cycle", drift_norm=drift_norm, window_diameter=diameter, state=mean)
    return SeedOutcome(seed.label, "non_convergent", drift_norm=drift_norm, window_diameter=diameter, state=final)


def _polish(spec: GeneratorSpec, outcome: SeedOutcome, epsilon: float, merge_tol: float) -> Tuple[ProbabilityVector, Optional[FixedPointReport]]:
    report = algorithm_I(spec, outcome.state, epsilon=epsilon)
    if report.converged and l1_distance(report.pi, outcome.state) < merge_tol:
        return report.pi, report
    logger.debug("[scan] polishing %s moved away or failed; keeping the integrated state", outcome.label)
    return outcome.state, report


def basin_scan(
    spec: GeneratorSpec,
    seeds: Sequence[Seed],
    t_transient: float = 100.0,
    t_window: float = 10.0,
    merge_tol: float = 1e-4,
    epsilon: float = 1e-8,
    perturbations: int = MIN_PERTURBATIONS,
    perturbation_seed: int = 0,
    cfg: Optional[IntegratorConfig] = None,
    ledger: Optional[FailureLedger] = None,
    polish: bool = True,
) -> BasinScanReport:
    """
    Integrate every seed, classify where it settles and merge the end points
    into limits. A fixed-point limit is kept only if it passes `certify`;
    otherwise it is reclassified non_convergent and recorded in the ledger.
    """
    if not seeds:
        raise DomainError("basin_scan needs at least one seed")
    if not t_transient > 0 or not t_window > 0:
        raise DomainError("t_transient and t_window must be positive")
    if not merge_tol > 0 or not epsilon > 0:
        raise DomainError("merge_tol and epsilon must be positive")
    cfg = cfg or IntegratorConfig()
    ledger = ledger if ledger is not None else FailureLedger()

    outcomes: List[SeedOutcome] = []
    limits: List[Limit] = []
    for seed in seeds:
        try:
            outcome = _classify(spec, seed, t_transient, t_window, merge_tol, epsilon, cfg)
        except MeanFieldError as exc:
            ledger.send("scan", {"seed": seed.label}, exc, {"t_transient": t_transient, "t_window": t_window})
            outcomes.append(SeedOutcome(seed.label, "non_convergent", error=f"{type(exc).__name__}: {exc}"))
            continue

        if outcome.classification == "non_convergent":
            outcomes.append(outcome)
            continue
        point, polished = (outcome.state, None)
        if outcome.classification == "fixed_point" and polish:
            point, polished = _polish(spec, outcome, epsilon, merge_tol)
            outcome.drift_norm = residual_norm(spec, point)
        # greedy merge in discovery order
        match = next(
            (lim for lim in limits if lim.classification == outcome.classification and l1_distance(lim.pi, point) < merge_tol),
            None,
        )
        if match is None:
            match = Limit(len(limits), point, outcome.classification, outcome.drift_norm, polish=polished)
            limits.append(match)
        match.seeds.append(seed.label)
        outcome.limit = match.index
        outcomes.append(outcome)

    for limit in limits:
        if limit.classification != "fixed_point":
            continue
        limit.certificate = certify(spec, limit.pi)
        if not limit.certificate.passed:
            _reject(limit, outcomes, ledger)
            continue
        if perturbations < MIN_PERTURBATIONS:
            continue
        try:
            limit.return_distances = perturbation_test(
                spec, limit.pi, perturbations, 10.0 * merge_tol, t_transient, perturbation_seed + limit.index, cfg,
            )
        except MeanFieldError as exc:
            ledger.send("scan-stability", {"limit": limit.index}, exc)
            continue
        limit.stability = "locally_stable" if max(limit.return_distances) < merge_tol else "unstable"

    diagnostics = _isolation_diagnostics(limits, merge_tol)
    report = BasinScanReport(
        seeds=list(seeds),
        outcomes=outcomes,
        limits=limits,
        parameters={
            "t_transient": t_transient,
            "t_window": t_window,
            "merge_tol": merge_tol,
            "epsilon": epsilon,
            "perturbations": perturbations,
            "perturbation_seed": perturbation_seed,
            "polish": polish,
            "integrator": cfg.to_dict(),
        },
        diagnostics=diagnostics,
    )
    logger.info(
        "[scan] %d seeds -> %d limits (%d locally stable, metastable=%s, %d failures)",
        len(seeds), len(limits), len(report.stable_limits), report.metastable, ledger.count("scan"),
    )
    return report


def _reject(limit: Limit, outcomes: Sequence[SeedOutcome], ledger: FailureLedger) -> None:
    """An uncertified fixed point is not reported as one."""
    limit.classification = "non_convergent"
    for outcome in outcomes:
        if outcome.limit == limit.index:
            outcome.classification = "non_convergent"
            outcome.error = f"certificate failed: {limit.certificate.reason}"
    ledger.send(
        "scan-certificate",
        {"limit": limit.index, "seeds": list(limit.seeds)},
        NonConvergenceError(f"certificate failed: {limit.certificate.reason}"),
        {"drift_norm": limit.drift_norm},
    )


def _isolation_diagnostics(limits: Sequence[Limit], merge_tol: float) -> List[str]:
    notes = []
    for a, b in combinations(limits, 2):
        gap = l1_distance(a.pi, b.pi)
        if gap < 10.0 * merge_tol:
            notes.append(f"limits {a.index} and {b.index} are only {gap:.3g} apart; isolation at merge_tol={merge_tol:g} is doubtful")
    return notes


# ----------------------------------------------------------------------
# Metastability
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CommutationConfig:
    N: int = 20
    t_end: float = 1000.0
    burn_in: float = 50.0
    sample_dt: float = 1.0
    seed: int = 0
    batches: int = 20
    threshold: float = 3.0


@dataclass(frozen=True)
class CommutationCheck:
    time_average_mean_level: float
    limit_mean_level: float
    standard_error: float
    passed: bool
    N: int
    seed: int


@dataclass
class MetastabilitySummary:
    count_stable: int
    separations: Dict[str, float] = field(default_factory=dict)
    basins: Dict[int, List[str]] = field(default_factory=dict)
    limit_commutation_check: Optional[CommutationCheck] = None
    diagnostics: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        check = self.limit_commutation_check
        return {
            "count_stable": self.count_stable,
            "separations": dict(self.separations),
            "basins": {str(k): list(v) for k, v in self.basins.items()},
            "limit_commutation_check": None if check is None else check.__dict__.copy(),
            "diagnostics": list(self.diagnostics),
        }


def limit_commutation(spec: GeneratorSpec, pi: ProbabilityVector, config: CommutationConfig) -> CommutationCheck:
    """
    Long-run time average of one finite-N system (t → ∞ first) against the
    mean-field limit point (N → ∞ first), compared on the mean level with a
    batch-means standard error.
    """
    run = simulate(spec, config.N, pi, config.t_end, config.sample_dt, config.seed)
    mask = run.sample_times >= config.burn_in
    series = np.array([mean_level(m) for m, keep in zip(run.measures, mask) if keep])
    se = float(batch_means_se(series, config.batches)[0])
    average = float(series.mean())
    target = mean_level(pi)
    passed = abs(average - target) <= config.threshold * se if se > 0 else abs(average - target) <= 1e-12
    logger.info("[meta] time average %.5g vs limit %.5g (SE %.3g, passed=%s)", average, target, se, passed)
    return CommutationCheck(average, target, se, passed, config.N, config.seed)


def metastability_report(
    scan: BasinScanReport,
    spec: Optional[GeneratorSpec] = None,
    commutation: Optional[CommutationConfig] = None,
) -> MetastabilitySummary:
    """
    Counts the locally stable fixed points. With exactly one and a spec plus
    commutation config given, runs the limit-commutation experiment; with two
    or more, reports pairwise l1 separations and which seeds fed each basin.
    """
    stable = scan.stable_limits
    summary = MetastabilitySummary(count_stable=len(stable), diagnostics=list(scan.diagnostics))
    if not stable:
        counts = {c: sum(o.classification == c for o in scan.outcomes) for c in CLASSIFICATIONS}
        summary.diagnostics.append(
            "no locally stable fixed point found: " + ", ".join(f"{n} {c}" for c, n in counts.items())
        )
        return summary
    summary.basins = {lim.index: list(lim.seeds) for lim in stable}
    if len(stable) >= 2:
        summary.separations = {f"{a.index}-{b.index}": l1_distance(a.pi, b.pi) for a, b in combinations(stable, 2)}
    elif spec is not None and commutation is not None:
        summary.limit_commutation_check = limit_commutation(spec, stable[0].pi, commutation)
    return summary

"""
Fixed points of the nonlinear generator: initial-vector recipes, the
successive-substitution iteration π ← stationary(Γ(π)) and its certificate.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from src.config import get_settings
from src.errors import (
    CensoringError,
    DomainError,
    FactorizationError,
    InstabilityError,
    ModelError,
    NonConvergenceError,
    StationarySolveError,
)
from src.loaders.files import read_vector
from src.models.spec import GeneratorSpec, evaluate_generator
from src.solvers.censoring import censor, rg_factorize, stationary_from_rg
from src.solvers.certificates import Certificate, characteristic_verify, default_tol_det
from src.solvers.structured import mg1_r_measure, mg1_stationary, solve_G_mg1, solve_R_gim1
from src.state_space import LevelPhaseLayout, ProbabilityVector, l1_distance, max_norm


logger = logging.getLogger(__name__)

SOLVERS = ("rg", "structured")
STRUCTURED_KINDS = ("qbd", "gim1", "mg1")
STABILITY = ("locally_stable", "unstable", "undetermined")

# consecutive non-contracting iterations before damping falls back to 0.5
OSCILLATION_WINDOW = 5
OSCILLATION_RATIO = 0.999
FALLBACK_DAMPING = 0.5

ITERATION_ERRORS = (
    CensoringError,
    FactorizationError,
    InstabilityError,
    ModelError,
    NonConvergenceError,
    StationarySolveError,
    DomainError,
    np.linalg.LinAlgError,
)


# ----------------------------------------------------------------------
# Initial-vector recipes
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    kind: str
    params: Tuple[float, ...] = ()
    path: str = ""

    @property
    def label(self) -> str:
        if self.kind == "file":
            return f"file:{self.path}"
        return f"{self.kind}:" + ",".join(f"{p:g}" for p in self.params)


RECIPE_KINDS = ("uniform", "geometric", "poisson", "custom", "ph2", "file")

NAMED_RECIPE_SETS: Dict[str, Tuple[str, ...]] = {
    "default20": (
        "uniform:1", "uniform:2", "uniform:3", "uniform:4",
        "geometric:0.05", "geometric:0.1", "geometric:0.25", "geometric:0.5",
        "geometric:0.75", "geometric:0.9", "geometric:0.95",
        "poisson:0.25", "poisson:0.5", "poisson:1", "poisson:2", "poisson:4", "poisson:8",
        "ph2:1,3", "ph2:2,2", "ph2:4,1.5",
    ),
}


def parse_recipe(text: str) -> Recipe:
    kind, sep, rest = text.strip().partition(":")
    kind = kind.strip().lower()
    if not sep or kind not in RECIPE_KINDS:
        raise DomainError(f"Unknown initial-vector recipe {text!r}; expected one of {RECIPE_KINDS}")
    if kind == "file":
        return Recipe(kind, path=rest.strip())
    try:
        params = tuple(float(v) for v in rest.split(",") if v.strip())
    except ValueError as exc:
        raise DomainError(f"Recipe {text!r} has a non-numeric parameter") from exc
    expected = {"uniform": 1, "geometric": 1, "poisson": 1, "ph2": 2}
    if kind in expected and len(params) != expected[kind]:
        raise DomainError(f"Recipe {kind} takes {expected[kind]} parameter(s), got {len(params)}")
    if kind == "custom" and not params:
        raise DomainError("custom recipe needs at least one value")
    return Recipe(kind, params)


def recipe_set(text: str) -> List[Recipe]:
    """`recipes:<name>` for a named set, otherwise `;`-separated recipes."""
    text = text.strip()
    if text.startswith("recipes:"):
        name = text.split(":", 1)[1]
        if name not in NAMED_RECIPE_SETS:
            raise DomainError(f"Unknown recipe set {name!r}; available: {sorted(NAMED_RECIPE_SETS)}")
        return [parse_recipe(r) for r in NAMED_RECIPE_SETS[name]]
    return [parse_recipe(part) for part in text.split(";") if part.strip()]


def _fold(masses: np.ndarray, levels: int) -> np.ndarray:
    """Level masses 0..L with everything beyond L moved onto L."""
    folded = np.zeros(levels)
    head = masses[:levels]
    folded[: head.size] = head
    if masses.size > levels:
        folded[-1] += masses[levels:].sum()
    return folded


def _ph2_masses(mean: float, scv: float, levels: int) -> np.ndarray:
    """
    Balanced-means mixture of two geometric laws on {0,1,...} with the given
    mean and squared coefficient of variation; needs scv >= 1 + 1/mean.
    """
    if mean <= 0:
        raise DomainError("ph2 mean must be positive")
    floor = 1.0 + 1.0 / mean
    if scv < floor - 1e-12:
        raise DomainError(f"ph2 with mean {mean:g} needs scv >= {floor:g}, got {scv:g}")
    product = 1.0 / (2.0 * (scv + 1.0 - 1.0 / mean))
    weight = 0.5 * (1.0 + math.sqrt(max(0.0, 1.0 - 4.0 * product)))
    k = np.arange(levels)
    masses = np.zeros(levels)
    for w in (weight, 1.0 - weight):
        if w <= 0.0:
            continue
        m = mean / (2.0 * w)
        rho = m / (1.0 + m)
        masses += w * (1.0 - rho) * rho ** k
        masses[-1] += w * rho ** levels
    return masses


def _weights(recipe: Recipe) -> np.ndarray:
    """custom values as weights, rescaled to unit mass."""
    values = np.asarray(recipe.params, dtype=float)
    if values.min() < 0.0 or values.sum() <= 0.0:
        raise DomainError("custom values must be nonnegative with positive total")
    return values / values.sum()


def _level_masses(recipe: Recipe, layout: LevelPhaseLayout) -> np.ndarray:
    levels = layout.levels
    L = layout.truncation_level
    if recipe.kind == "uniform":
        m = recipe.params[0]
        if m < 1 or m != int(m):
            raise DomainError(f"uniform(m) needs an integer m >= 1, got {m:g}")
        return _fold(np.full(int(m), 1.0 / m), levels)
    if recipe.kind == "geometric":
        rho = recipe.params[0]
        if not 0.0 < rho < 1.0:
            raise DomainError(f"geometric(rho) needs rho in (0,1), got {rho:g}")
        masses = (1.0 - rho) * rho ** np.arange(levels)
        masses[-1] = rho ** L
        return masses
    if recipe.kind == "poisson":
        lam = recipe.params[0]
        if lam <= 0:
            raise DomainError(f"poisson(lambda) needs lambda > 0, got {lam:g}")
        masses = stats.poisson.pmf(np.arange(levels), lam)
        masses[-1] = stats.poisson.sf(L - 1, lam)
        return masses
    if recipe.kind == "ph2":
        return _ph2_masses(recipe.params[0], recipe.params[1], levels)
    return _fold(_weights(recipe), levels)


def initial_vector(recipe: Any, layout: LevelPhaseLayout) -> ProbabilityVector:
    """
    Level masses from the recipe, spread uniformly over each level's phases.
    A `custom` list as long as the layout's dimension is taken per state.
    """
    if isinstance(recipe, str):
        recipe = parse_recipe(recipe)
    if recipe.kind == "file":
        return read_vector(recipe.path, layout)
    if recipe.kind == "custom" and len(recipe.params) == layout.dimension and layout.dimension != layout.levels:
        values = _weights(recipe)
    else:
        masses = _level_masses(recipe, layout)
        values = np.repeat(masses / np.asarray(layout.phase_counts), layout.phase_counts)
    if values.min() < 0.0 or abs(values.sum() - 1.0) > 1e-9:
        raise DomainError(f"Recipe {recipe.label} does not define a distribution (mass {values.sum():.12g})")
    return ProbabilityVector.project(layout, values)[0]


# ----------------------------------------------------------------------
# Iteration
# ----------------------------------------------------------------------

@dataclass
class FixedPointReport:
    pi: ProbabilityVector
    residual: float
    iterations: int
    converged: bool
    certificate: Optional[Certificate] = None
    stability: str = "undetermined"
    failed_iteration: Optional[int] = None
    error: str = ""
    boundary_mass: float = 0.0
    truncation_flag: bool = False
    changes: List[float] = field(default_factory=list)
    damping: float = 1.0
    solver: str = "rg"

    @property
    def certified(self) -> bool:
        return self.certificate is not None and self.certificate.passed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "certificate": self.certificate.to_dict() if self.certificate else None,
            "stability": self.stability,
            "failed_iteration": self.failed_iteration,
            "error": self.error,
            "boundary_mass": self.boundary_mass,
            "truncation_flag": self.truncation_flag,
            "changes": list(self.changes),
            "damping": self.damping,
            "solver": self.solver,
        }


def residual_norm(spec: GeneratorSpec, pi: ProbabilityVector) -> float:
    """‖πΓ(π)‖_max."""
    return max_norm(pi.values @ evaluate_generator(spec, pi).matrix)


def _structured_step(spec: GeneratorSpec, pi: ProbabilityVector) -> ProbabilityVector:
    blocks = spec.structured_blocks(pi)
    if blocks.kind in ("qbd", "gim1"):
        return solve_R_gim1(blocks.A, blocks.B, layout=spec.layout).pi
    G = solve_G_mg1(blocks.A).G
    return mg1_stationary(mg1_r_measure(G, blocks.A, blocks.B), spec.layout)


def stationary_map(spec: GeneratorSpec, pi: ProbabilityVector, solver: str = "rg") -> ProbabilityVector:
    """One application of π ↦ stationary law of Γ(π)."""
    if solver == "structured":
        return _structured_step(spec, pi)
    return stationary_from_rg(rg_factorize(evaluate_generator(spec, pi)))


def algorithm_I(
    spec: GeneratorSpec,
    pi0: ProbabilityVector,
    epsilon: float = 1e-10,
    max_iter: int = 10_000,
    damping: float = 1.0,
    solver: str = "rg",
) -> FixedPointReport:
    """
    π^{(n+1)} = (1−ω)π^{(n)} + ω·stationary(Γ(π^{(n)})). Stops once the l1
    change is below epsilon and the residual is at most epsilon; the reported
    iteration count excludes the final confirming pass, so a linear model
    reports 1 from any start, including a start that is already the fixed point.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not 0.0 < damping <= 1.0:
        raise DomainError(f"damping must lie in (0, 1], got {damping}")
    if solver not in SOLVERS:
        raise DomainError(f"Unknown solver {solver!r}; expected one of {SOLVERS}")
    if solver == "structured" and spec.structure_tag.kind not in STRUCTURED_KINDS:
        raise ModelError(f"The structured solver needs a QBD, GI/M/1 or M/G/1 model, got {spec.family_name}")
    if pi0.layout != spec.layout:
        raise DomainError("Initial vector does not live on the model layout")

    pi = pi0
    omega = damping
    changes: List[float] = []
    stalled = 0
    report: Optional[FixedPointReport] = None
    for n in range(1, max_iter + 1):
        try:
            image = stationary_map(spec, pi, solver)
        except ITERATION_ERRORS as exc:
            logger.warning("[algorithm-I] iteration %d failed: %s", n, exc)
            report = FixedPointReport(
                pi=pi, residual=math.nan, iterations=n - 1, converged=False,
                failed_iteration=n, error=f"{type(exc).__name__}: {exc}",
            )
            break
        if omega < 1.0:
            image = ProbabilityVector.project(spec.layout, (1.0 - omega) * pi.values + omega * image.values)[0]
        change = l1_distance(image, pi)
        pi = image
        changes.append(change)
        logger.debug("[algorithm-I] n=%d change=%.3g", n, change)

        if change < epsilon:
            residual = residual_norm(spec, pi)
            if residual <= epsilon:
                report = FixedPointReport(pi=pi, residual=residual, iterations=max(n - 1, 1), converged=True)
                break

        if len(changes) > 1 and change > OSCILLATION_RATIO * changes[-2]:
            stalled += 1
        else:
            stalled = 0
        if stalled >= OSCILLATION_WINDOW and omega > FALLBACK_DAMPING:
            logger.info("[algorithm-I] no contraction over %d iterations; damping %.2f -> %.2f", stalled, omega, FALLBACK_DAMPING)
            omega = FALLBACK_DAMPING
            stalled = 0

    if report is None:
        logger.warning("[algorithm-I] no convergence within %d iterations (last change %.3g)", max_iter, changes[-1])
        report = FixedPointReport(pi=pi, residual=residual_norm(spec, pi), iterations=max_iter, converged=False)

    report.changes = changes
    report.damping = omega
    report.solver = solver
    report.boundary_mass = float(report.pi.level_masses()[-1])
    report.truncation_flag = report.boundary_mass > get_settings().truncation_mass_tol
    if report.truncation_flag:
        logger.warning(
            "[algorithm-I] %.3g of the mass sits at the truncation level L=%d",
            report.boundary_mass, spec.layout.truncation_level,
        )
    if report.converged:
        report.certificate = certify(spec, report.pi)
        logger.info(
            "[algorithm-I] %s converged in %d iterations (residual %.3g, certified=%s)",
            spec.name or spec.family_name, report.iterations, report.residual, report.certified,
        )
    return report


def certify(
    spec: GeneratorSpec,
    pi_hat: ProbabilityVector,
    tol_det: Optional[float] = None,
    tol_rank: Optional[float] = None,
) -> Certificate:
    """
    characteristic_verify on Ψ_0(π̂) = censor(Γ(π̂), 0), plus the drift guard
    ‖π̂Γ(π̂)‖_max <= 10·tol_det.
    """
    generator = evaluate_generator(spec, pi_hat)
    drift_norm = max_norm(pi_hat.values @ generator.matrix)
    try:
        psi0 = censor(generator, 0).matrix
    except CensoringError as exc:
        return Certificate(
            det_value=math.nan,
            det_sign=math.nan,
            log_abs_det=math.nan,
            second_smallest_singular_value=None,
            passed=False,
            tol_det=default_tol_det(generator.block(0, 0)) if tol_det is None else float(tol_det),
            tol_rank=get_settings().tol_rank if tol_rank is None else float(tol_rank),
            drift_norm=drift_norm,
            reason=f"censoring failed: {exc}",
        )
    base = characteristic_verify(psi0, tol_det, tol_rank)
    reasons = [base.reason] if base.reason else []
    if not drift_norm <= 10.0 * base.tol_det:
        reasons.append(f"drift norm {drift_norm:.3g} > {10.0 * base.tol_det:.3g}")
    return Certificate(**{**asdict(base), "drift_norm": drift_norm, "passed": not reasons, "reason": "; ".join(reasons)})

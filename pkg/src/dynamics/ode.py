"""
The mean-field ODE dp/dt = pΓ(p).

Two explicit integrators: classical RK4 with a fixed step and the Dormand-Prince
5(4) embedded pair with step-size control. Steps are clamped so that every
sample time is hit exactly; after each accepted step the state is clipped at 0
and rescaled to unit mass, and the size of that correction is recorded.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DomainError, IntegrationError
from src.models.spec import GeneratorSpec, evaluate_generator
from src.state_space import LevelPhaseLayout, ProbabilityVector


logger = logging.getLogger(__name__)

METHODS = ("rk4", "dopri5")
RENORMALIZATION_POLICIES = ("clip-rescale", "none")

# Dormand-Prince 5(4)
DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "dopri5"
    step: float = 1e-2
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    sample_dt: Optional[float] = None
    renormalization: str = "clip-rescale"
    initial_step: Optional[float] = None
    min_step: float = 1e-12
    max_steps: int = 10_000_000

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"Unknown integrator {self.method!r}; expected one of {METHODS}")
        if self.renormalization not in RENORMALIZATION_POLICIES:
            raise ConfigError(f"Unknown renormalization policy {self.renormalization!r}")
        for name in ("step", "abs_tol", "rel_tol", "min_step", "max_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("sample_dt", "initial_step"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Trajectory:
    layout: LevelPhaseLayout
    times: np.ndarray
    states: Tuple[ProbabilityVector, ...]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.vstack([s.values for s in self.states])

    @property
    def final(self) -> ProbabilityVector:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)


class DriftField:
    """x ↦ xΓ(proj(x)); Γ is evaluated once for linear specs."""

    def __init__(self, spec: GeneratorSpec) -> None:
        self.spec = spec
        self.evaluations = 0
        self._constant: Optional[np.ndarray] = None
        if spec.is_linear:
            d = spec.layout.dimension
            self._constant = evaluate_generator(spec, ProbabilityVector(spec.layout, np.full(d, 1.0 / d))).matrix

    def generator(self, x: np.ndarray) -> np.ndarray:
        if self._constant is not None:
            return self._constant
        p, _ = ProbabilityVector.project(self.spec.layout, x)
        return evaluate_generator(self.spec, p).matrix

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        return x @ self.generator(x)


def drift(spec: GeneratorSpec, p: ProbabilityVector) -> np.ndarray:
    """pΓ(p)."""
    return p.values @ evaluate_generator(spec, p).matrix


def _rk4_step(f: DriftField, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0


def _dopri_step(f: DriftField, x: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    stages: List[np.ndarray] = []
    for row in DP_A:
        increment = sum((a * k for a, k in zip(row, stages) if a != 0.0), np.zeros_like(x))
        stages.append(f(x + h * increment))
    high = x + h * sum((b * k for b, k in zip(DP_B5, stages) if b != 0.0), np.zeros_like(x))
    low = x + h * sum((b * k for b, k in zip(DP_B4, stages) if b != 0.0), np.zeros_like(x))
    return high, high - low


def _error_norm(error: np.ndarray, x: np.ndarray, x_new: np.ndarray, cfg: IntegratorConfig) -> float:
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(x), np.abs(x_new))
    return float(np.max(np.abs(error) / scale))


def _sample_grid(t_end: float, sample_dt: Optional[float]) -> np.ndarray:
    if sample_dt is None:
        return np.array([t_end])
    count = max(1, int(math.ceil(t_end / sample_dt - 1e-9)))
    grid = np.arange(1, count + 1, dtype=float) * sample_dt
    grid[-1] = t_end
    return grid


def _initial_step(cfg: IntegratorConfig, t_end: float) -> float:
    if cfg.method == "rk4":
        return cfg.step
    return cfg.initial_step if cfg.initial_step is not None else min(1e-2, t_end / 100.0)


def integrate(spec: GeneratorSpec, q: ProbabilityVector, t_end: float, cfg: Optional[IntegratorConfig] = None) -> Trajectory:
    if not t_end > 0:
        raise DomainError("t_end must be positive")
    if q.layout != spec.layout:
        raise DomainError("Initial vector does not live on the model layout")
    cfg = cfg or IntegratorConfig()
    f = DriftField(spec)
    grid = _sample_grid(t_end, cfg.sample_dt)
    store_every_step = cfg.sample_dt is None

    t = 0.0
    x = q.values.copy()
    times: List[float] = [0.0]
    states: List[ProbabilityVector] = [q]
    h = _initial_step(cfg, t_end)
    next_sample = 0
    stats = {"steps": 0, "rejected": 0, "max_correction": 0.0, "min_entry": float(x.min()), "max_mass_error": 0.0}

    while next_sample < len(grid):
        target = float(grid[next_sample])
        lands = t + h >= target - 1e-12 * max(1.0, target)
        h_try = target - t if lands else h

        if cfg.method == "rk4":
            x_new = _rk4_step(f, x, h_try)
            if not np.all(np.isfinite(x_new)):
                raise IntegrationError("Non-finite state", t)
            factor = 1.0
        else:
            x_new, error = _dopri_step(f, x, h_try)
            err = _error_norm(error, x, x_new, cfg) if np.all(np.isfinite(x_new)) else math.inf
            factor = MAX_FACTOR if err == 0.0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err ** -0.2))
            if err > 1.0:
                stats["rejected"] += 1
                h = h_try * min(1.0, factor)
                if h < cfg.min_step * max(1.0, t):
                    raise IntegrationError(f"Step size underflow (h={h:.3g})", t)
                continue

        t = target if lands else t + h_try
        stats["steps"] += 1
        if stats["steps"] > cfg.max_steps:
            raise IntegrationError(f"Exceeded {cfg.max_steps} steps", t)
        stats["min_entry"] = min(stats["min_entry"], float(x_new.min()))
        stats["max_mass_error"] = max(stats["max_mass_error"], abs(float(x_new.sum()) - 1.0))
        try:
            state, correction = ProbabilityVector.project(spec.layout, x_new)
        except DomainError as exc:
            raise IntegrationError(f"State left the simplex: {exc}", t) from exc
        stats["max_correction"] = max(stats["max_correction"], correction)
        x = state.values.copy() if cfg.renormalization == "clip-rescale" else x_new

        if cfg.method == "dopri5":
            h = max(h, h_try * factor) if lands else h_try * factor
        if lands:
            next_sample += 1
        if lands or store_every_step:
            times.append(t)
            states.append(state)

    stats["evaluations"] = f.evaluations
    stats["method"] = cfg.method
    logger.debug(
        "[ode] %s integrated to t=%g in %d steps (%d rejected, max correction %.3g)",
        spec.name, t_end, stats["steps"], stats["rejected"], stats["max_correction"],
    )
    return Trajectory(layout=spec.layout, times=np.array(times), states=tuple(states), metadata=stats)

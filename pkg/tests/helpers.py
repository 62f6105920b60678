"""Model builders and closed-form oracles shared by the tests."""

from pathlib import Path

import numpy as np

from src.models.spec import GeneratorSpec, spec_from_dict
from src.state_space import LevelPhaseLayout, ProbabilityVector


MODELS_DIR = Path(__file__).resolve().parent.parent / "config" / "models"


def model_path(name: str) -> str:
    return str(MODELS_DIR / f"{name}.yaml")


def linear_spec(matrix, phases=None) -> GeneratorSpec:
    """Linear model from a dense rate matrix (diagonal ignored)."""
    matrix = np.asarray(matrix, dtype=float)
    counts = list(phases) if phases is not None else [1] * matrix.shape[0]
    return spec_from_dict({"family": "Linear", "levels": len(counts) - 1, "phases": counts, "params": {"matrix": matrix.tolist()}})


def birth_death_spec(up: float, down: float, L: int) -> GeneratorSpec:
    return spec_from_dict({"family": "Linear", "levels": L, "phases": 1, "params": {"birth_death": {"up": up, "down": down}}})


def supermarket_spec(d: int, arrival: float, L: int = 32) -> GeneratorSpec:
    return spec_from_dict({"family": "Supermarket", "levels": L, "phases": 1, "params": {"d": d, "lambda": arrival, "mu": 1.0}})


def vector(*values: float) -> ProbabilityVector:
    return ProbabilityVector(LevelPhaseLayout.uniform(len(values) - 1), np.array(values, dtype=float))


def random_rates(rng: np.random.Generator, dimension: int) -> np.ndarray:
    """Irreducible off-diagonal rate matrix."""
    rates = rng.uniform(0.1, 2.0, size=(dimension, dimension)) * (rng.random((dimension, dimension)) < 0.6)
    # a ring keeps every state reachable
    rates[np.arange(dimension), (np.arange(dimension) + 1) % dimension] += 0.5
    np.fill_diagonal(rates, 0.0)
    return rates


def supermarket_tails(arrival: float, d: int, count: int) -> np.ndarray:
    """
    Fixed-point tails from the balance recursion λ(s_{k-1}^d − s_k^d) = s_k − s_{k+1},
    which telescopes to s_k = λ s_{k-1}^d; iterated to a fixed point.
    """
    s = np.zeros(count + 1)
    s[0] = 1.0
    for _ in range(10 * count):
        updated = s.copy()
        updated[1:] = arrival * s[:-1] ** d
        if np.array_equal(updated, s):
            break
        s = updated
    return s

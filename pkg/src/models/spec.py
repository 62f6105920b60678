"""
GeneratorSpec: the declarative map p ↦ Γ(p), model-file loading, and
generator-level diagnostics (Lipschitz estimate).
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from src.config import load_yaml
from src.errors import ConfigError, ModelError
from src.models.expressions import FeatureContext
from src.models.families import Family, StructuredBlocks, StructureTag, get_family
from src.state_space import BlockGenerator, LevelPhaseLayout, ProbabilityVector, max_norm, unflatten_index


logger = logging.getLogger(__name__)

UNIFORM_PHASES = re.compile(r"^\s*uniform\(\s*(\d+)\s*\)\s*$")


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    layout: LevelPhaseLayout
    family: Family
    name: str = ""
    source: Dict[str, Any] = field(default_factory=dict)

    @property
    def family_name(self) -> str:
        return self.family.name

    @property
    def is_linear(self) -> bool:
        return self.family.is_linear

    @property
    def structure_tag(self) -> StructureTag:
        return self.family.structure

    def evaluate(self, p: ProbabilityVector) -> BlockGenerator:
        return evaluate_generator(self, p)

    def structured_blocks(self, p: ProbabilityVector) -> StructuredBlocks:
        _check_layout(self, p)
        blocks = self.family.structured_blocks(FeatureContext(p))
        if blocks is None:
            raise ModelError(f"{self.family_name} models have no repeating block structure")
        return blocks


def _check_layout(spec: GeneratorSpec, p: ProbabilityVector) -> None:
    if p.layout != spec.layout:
        raise ModelError(f"Distribution layout {p.layout.phase_counts} does not match model layout {spec.layout.phase_counts}")


def evaluate_generator(spec: GeneratorSpec, p: ProbabilityVector) -> BlockGenerator:
    """Γ(p) with diagonal entries recomputed as negative row sums."""
    _check_layout(spec, p)
    rates = np.array(spec.family.off_diagonal(FeatureContext(p)), dtype=float)
    np.fill_diagonal(rates, 0.0)
    if not np.all(np.isfinite(rates)):
        raise ModelError(f"{spec.family_name} produced non-finite rates")
    if rates.min(initial=0.0) < 0.0:
        src, dst = np.unravel_index(int(np.argmin(rates)), rates.shape)
        (k, j), (l, i) = unflatten_index(spec.layout, int(src)), unflatten_index(spec.layout, int(dst))
        raise ModelError(
            f"Negative rate {rates[src, dst]:.6g} in block ({k},{l}) from state ({k},{j}) to state ({l},{i})"
        )
    return BlockGenerator.from_off_diagonal(spec.layout, rates)


def _simplex_samples(layout: LevelPhaseLayout, count: int, rng: np.random.Generator) -> np.ndarray:
    vertices = np.eye(layout.dimension)
    random = rng.dirichlet(np.ones(layout.dimension), size=count)
    return np.vstack([vertices, random])


def lipschitz_estimate(spec: GeneratorSpec, sample_count: int, seed: int) -> float:
    """
    Lower bound on the Lipschitz constant of p ↦ Γ(p): the largest ratio
    ‖Γ(x) − Γ(y)‖_max / ‖x − y‖_1 over sampled pairs. Simplex vertices are
    always part of the sample.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    if spec.is_linear:
        return 0.0
    rng = np.random.default_rng(seed)
    points = _simplex_samples(spec.layout, sample_count, rng)
    generators = [evaluate_generator(spec, ProbabilityVector(spec.layout, x / x.sum())).matrix for x in points]
    best = 0.0
    for a in range(len(points)):
        for b in range(a + 1, len(points)):
            distance = float(np.abs(points[a] - points[b]).sum())
            if distance <= 0.0:
                continue
            best = max(best, max_norm(generators[a], generators[b]) / distance)
    logger.debug("[model] Lipschitz estimate for %s over %d points: %.6g", spec.name, len(points), best)
    return best


# ----------------------------------------------------------------------
# Model files
# ----------------------------------------------------------------------

def parse_layout(data: Mapping[str, Any]) -> LevelPhaseLayout:
    if "levels" not in data:
        raise ConfigError("Model file must declare 'levels'")
    L = int(data["levels"])
    phases = data.get("phases", 1)
    if isinstance(phases, int):
        return LevelPhaseLayout.uniform(L, phases)
    if isinstance(phases, str):
        match = UNIFORM_PHASES.match(phases)
        if not match:
            raise ConfigError(f"Cannot parse phases {phases!r}; use a list or uniform(m)")
        return LevelPhaseLayout.uniform(L, int(match.group(1)))
    counts: Tuple[int, ...] = tuple(int(m) for m in phases)
    if len(counts) != L + 1:
        raise ConfigError(f"phases lists {len(counts)} levels but levels = {L} needs {L + 1}")
    return LevelPhaseLayout(counts)


def spec_from_dict(data: Mapping[str, Any], name: Optional[str] = None) -> GeneratorSpec:
    layout = parse_layout(data)
    family_cls = get_family(str(data.get("family", "")))
    params = dict(data.get("params") or {})
    if "max_jump" in data and "max_jump" not in params:
        params["max_jump"] = data["max_jump"]
    family = family_cls.from_params(layout, params)
    return GeneratorSpec(layout=layout, family=family, name=name or str(data.get("name", family.name)), source=dict(data))


def load_model(path: str) -> GeneratorSpec:
    data = load_yaml(path)
    spec = spec_from_dict(data, name=data.get("name") or Path(path).stem)
    logger.info("[model] Loaded %s (%s, L=%d, D=%d)", spec.name, spec.family_name, spec.layout.truncation_level, spec.layout.dimension)
    return spec

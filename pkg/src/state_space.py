"""
Level-phase state space: layouts, block-partitioned probability vectors,
block-structured generators and the elementary measures used everywhere else.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from src.config import get_settings
from src.errors import DomainError, LayoutError


State = Tuple[int, int]


def _frozen(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LevelPhaseLayout:
    phase_counts: Tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(m) for m in self.phase_counts)
        object.__setattr__(self, "phase_counts", counts)
        if len(counts) < 2:
            raise LayoutError("A layout needs at least two levels (L >= 1)")
        if any(m < 1 for m in counts):
            raise LayoutError(f"Every level needs at least one phase, got {counts}")

    @classmethod
    def uniform(cls, truncation_level: int, phases: int = 1) -> "LevelPhaseLayout":
        return cls(tuple([phases] * (truncation_level + 1)))

    @property
    def truncation_level(self) -> int:
        return len(self.phase_counts) - 1

    @property
    def levels(self) -> int:
        return len(self.phase_counts)

    @cached_property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.phase_counts)]))

    @property
    def dimension(self) -> int:
        return self.offsets[-1]

    def level_slice(self, level: int) -> slice:
        if not 0 <= level <= self.truncation_level:
            raise LayoutError(f"Level {level} outside 0..{self.truncation_level}")
        return slice(self.offsets[level], self.offsets[level + 1])

    def level_of(self) -> np.ndarray:
        """Level index of every flattened position."""
        return np.repeat(np.arange(self.levels), self.phase_counts)

    def truncated(self, n: int) -> "LevelPhaseLayout":
        """Sub-layout holding levels 0..n; n = 0 yields a single-level layout."""
        if not 0 <= n <= self.truncation_level:
            raise LayoutError(f"Cannot truncate to level {n}")
        return _SingleLevel(self.phase_counts[:1]) if n == 0 else LevelPhaseLayout(self.phase_counts[: n + 1])

    def states(self) -> Iterator[State]:
        for level, m in enumerate(self.phase_counts):
            for phase in range(1, m + 1):
                yield level, phase

    def state_labels(self) -> List[str]:
        return [f"p_{level}_{phase}" for level, phase in self.states()]


class _SingleLevel(LevelPhaseLayout):
    """Level-0 layout produced by censoring; exempt from the L >= 1 rule."""

    def __post_init__(self) -> None:
        counts = tuple(int(m) for m in self.phase_counts)
        object.__setattr__(self, "phase_counts", counts)
        if len(counts) != 1 or counts[0] < 1:
            raise LayoutError(f"Invalid single-level layout {counts}")


def flatten_index(layout: LevelPhaseLayout, state: State) -> int:
    level, phase = state
    if not 0 <= level <= layout.truncation_level:
        raise LayoutError(f"Level {level} outside 0..{layout.truncation_level}")
    if not 1 <= phase <= layout.phase_counts[level]:
        raise LayoutError(f"Phase {phase} outside 1..{layout.phase_counts[level]} at level {level}")
    return layout.offsets[level] + phase - 1


def unflatten_index(layout: LevelPhaseLayout, index: int) -> State:
    if not 0 <= index < layout.dimension:
        raise LayoutError(f"Index {index} outside 0..{layout.dimension - 1}")
    level = int(np.searchsorted(layout.offsets, index, side="right")) - 1
    return level, index - layout.offsets[level] + 1


@dataclass(frozen=True, eq=False)
class ProbabilityVector:
    layout: LevelPhaseLayout
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values).reshape(-1)
        object.__setattr__(self, "values", values)
        if values.size != self.layout.dimension:
            raise LayoutError(f"Vector of length {values.size} does not fit layout of dimension {self.layout.dimension}")
        tol = get_settings().normalization_tol
        if not np.all(np.isfinite(values)) or values.min() < 0.0:
            raise DomainError("Probability vector entries must be finite and nonnegative")
        total = float(values.sum())
        if abs(total - 1.0) > max(tol, 4 * np.finfo(float).eps * values.size):
            raise DomainError(f"Probability vector sums to {total!r}, not 1")

    @classmethod
    def from_blocks(cls, layout: LevelPhaseLayout, blocks: Sequence[Sequence[float]]) -> "ProbabilityVector":
        if len(blocks) != layout.levels:
            raise LayoutError(f"Expected {layout.levels} blocks, got {len(blocks)}")
        return cls(layout, np.concatenate([np.asarray(b, dtype=float).reshape(-1) for b in blocks]))

    @classmethod
    def project(cls, layout: LevelPhaseLayout, values: np.ndarray) -> Tuple["ProbabilityVector", float]:
        """Clip negatives at 0 and rescale to unit mass; also returns the max correction."""
        raw = np.asarray(values, dtype=float).reshape(-1)
        clipped = np.clip(raw, 0.0, None)
        total = clipped.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise DomainError("Cannot project a vector without positive mass onto the simplex")
        projected = clipped / total
        projected /= projected.sum()
        return cls(layout, projected), float(np.max(np.abs(projected - raw)))

    def block(self, level: int) -> np.ndarray:
        return self.values[self.layout.level_slice(level)]

    def blocks(self) -> List[np.ndarray]:
        return [self.block(k) for k in range(self.layout.levels)]

    def level_masses(self) -> np.ndarray:
        return np.add.reduceat(self.values, self.layout.offsets[:-1])

    def __getitem__(self, state: State) -> float:
        return float(self.values[flatten_index(self.layout, state)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProbabilityVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.layout, self.values.tobytes()))


@dataclass(frozen=True, eq=False)
class BlockGenerator:
    layout: LevelPhaseLayout
    matrix: np.ndarray

    def __post_init__(self) -> None:
        matrix = _frozen(self.matrix)
        object.__setattr__(self, "matrix", matrix)
        d = self.layout.dimension
        if matrix.shape != (d, d):
            raise LayoutError(f"Generator of shape {matrix.shape} does not fit layout of dimension {d}")
        if not np.all(np.isfinite(matrix)):
            raise DomainError("Generator entries must be finite")
        scale = max(1.0, float(np.max(np.abs(matrix))) if d else 1.0)
        tol = get_settings().row_sum_tol * scale
        off = matrix - np.diag(np.diag(matrix))
        if off.min(initial=0.0) < -tol:
            raise DomainError(f"Negative off-diagonal rate {off.min():.3g}")
        row_sums = matrix.sum(axis=1)
        worst = float(np.max(np.abs(row_sums))) if d else 0.0
        if worst > tol:
            raise DomainError(f"Generator row sums deviate from 0 by {worst:.3g}")

    @classmethod
    def from_off_diagonal(cls, layout: LevelPhaseLayout, rates: np.ndarray) -> "BlockGenerator":
        """Build a conservative generator; the diagonal is always the negative row sum."""
        off = np.array(rates, dtype=float, copy=True)
        np.fill_diagonal(off, 0.0)
        np.fill_diagonal(off, -off.sum(axis=1))
        return cls(layout, off)

    @classmethod
    def from_blocks(cls, layout: LevelPhaseLayout, blocks: Sequence[Sequence[np.ndarray]]) -> "BlockGenerator":
        return cls(layout, np.block([[np.atleast_2d(b) for b in row] for row in blocks]))

    def block(self, i: int, j: int) -> np.ndarray:
        return self.matrix[self.layout.level_slice(i), self.layout.level_slice(j)]

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.matrix)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BlockGenerator):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash((self.layout, self.matrix.tobytes()))


def _same_layout(p: ProbabilityVector, q: ProbabilityVector) -> None:
    if p.layout != q.layout:
        raise LayoutError("Vectors live on different layouts")


def tail_mass(p: ProbabilityVector, k: int) -> float:
    """T_k(p): probability mass at levels >= k."""
    L = p.layout.truncation_level
    if not 0 <= k <= L + 1:
        raise LayoutError(f"Tail index {k} outside 0..{L + 1}")
    if k == 0:
        return 1.0
    if k == L + 1:
        return 0.0
    return float(p.values[p.layout.offsets[k]:].sum())


def tail_masses(p: ProbabilityVector) -> np.ndarray:
    """All tails T_0..T_{L+1} at once."""
    masses = p.level_masses()
    tails = np.concatenate([np.cumsum(masses[::-1])[::-1], [0.0]])
    tails[0] = 1.0
    return tails


def mean_level(p: ProbabilityVector) -> float:
    return float(np.dot(np.arange(p.layout.levels), p.level_masses()))


def relative_entropy(p: ProbabilityVector, q: ProbabilityVector) -> float:
    """R(p||q) in nats, with 0 log(0/q) = 0."""
    _same_layout(p, q)
    terms = rel_entr(p.values, q.values)
    if np.isinf(terms).any():
        bad = int(np.argmax(np.isinf(terms)))
        raise DomainError(f"p has mass where q vanishes at state {unflatten_index(p.layout, bad)}")
    return max(float(terms.sum()), 0.0)


def l1_distance(p: ProbabilityVector, q: ProbabilityVector) -> float:
    _same_layout(p, q)
    return float(np.abs(p.values - q.values).sum())


def point_mass(layout: LevelPhaseLayout, state: State) -> ProbabilityVector:
    values = np.zeros(layout.dimension)
    values[flatten_index(layout, state)] = 1.0
    return ProbabilityVector(layout, values)


def max_norm(matrix: np.ndarray, other: Optional[np.ndarray] = None) -> float:
    diff = matrix if other is None else matrix - other
    return float(np.max(np.abs(diff))) if np.size(diff) else 0.0

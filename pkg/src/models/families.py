"""
Built-in model families. Each family turns a distribution p into the
off-diagonal rates of Γ(p) on a truncated layout; the diagonal is always
derived by the caller. Transitions that would leave level L are folded back
into level L (same target phase).
"""

import re
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Type

import numpy as np

from src.config import get_settings
from src.errors import ConfigError, ModelError
from src.models.expressions import FeatureContext, FeatureExpression, parse_expression
from src.state_space import LevelPhaseLayout, flatten_index


@dataclass(frozen=True)
class StructureTag:
    """Banded-width metadata used for solver dispatch."""

    kind: str
    lower: int
    upper: int


@dataclass(frozen=True)
class StructuredBlocks:
    """Repeating blocks A_k(p) and boundary blocks B_k(p), diagonals included."""

    kind: str
    A: Tuple[np.ndarray, ...]
    B: Tuple[np.ndarray, ...]


def _matrix(raw: Any, shape: Tuple[int, int], name: str) -> np.ndarray:
    try:
        value = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} is not numeric: {raw!r}") from exc
    if value.ndim == 0:
        value = value * np.eye(shape[0]) if shape[0] == shape[1] else np.full(shape, float(value))
    elif value.ndim == 1 and shape[0] == shape[1] and value.size == shape[0]:
        value = np.diag(value)
    if value.shape != shape:
        raise ConfigError(f"{name} has shape {value.shape}, expected {shape}")
    return value


def _off_diagonal(matrix: np.ndarray) -> np.ndarray:
    off = matrix.copy()
    np.fill_diagonal(off, 0.0)
    return off


def _with_derived_diagonal(off: np.ndarray, *others: np.ndarray) -> np.ndarray:
    total = off.sum(axis=1) + sum(o.sum(axis=1) for o in others)
    full = _off_diagonal(off)
    full[np.diag_indices_from(full)] = -total
    return full


def _scales(raw: Optional[Mapping[str, Any]], layout: LevelPhaseLayout, allowed: Sequence[str]) -> Dict[str, FeatureExpression]:
    scales: Dict[str, FeatureExpression] = {}
    for key, text in (raw or {}).items():
        if key not in allowed:
            raise ConfigError(f"Unknown scale {key!r}; expected one of {list(allowed)}")
        scales[key] = parse_expression(str(text), layout)
    return scales


def _scale(scales: Mapping[str, FeatureExpression], key: str, ctx: FeatureContext) -> float:
    expression = scales.get(key)
    return 1.0 if expression is None else expression.evaluate(ctx)


class Family:
    name = ""
    is_linear = False

    def __init__(self, layout: LevelPhaseLayout) -> None:
        self.layout = layout

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "Family":
        raise NotImplementedError

    @property
    def structure(self) -> StructureTag:
        return StructureTag("dense", self.layout.truncation_level, self.layout.truncation_level)

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        raise NotImplementedError

    def structured_blocks(self, ctx: FeatureContext) -> Optional[StructuredBlocks]:
        return None

    def describe(self) -> Dict[str, Any]:
        return {"family": self.name}


# ----------------------------------------------------------------------
# Linear
# ----------------------------------------------------------------------

class LinearFamily(Family):
    name = "Linear"
    is_linear = True

    def __init__(self, layout: LevelPhaseLayout, rates: np.ndarray) -> None:
        super().__init__(layout)
        self.rates = _off_diagonal(rates)
        self.rates.setflags(write=False)

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "LinearFamily":
        d = layout.dimension
        if "matrix" in params:
            return cls(layout, _matrix(params["matrix"], (d, d), "matrix"))
        if "birth_death" in params:
            if any(m != 1 for m in layout.phase_counts):
                raise ConfigError("birth_death shorthand needs one phase per level")
            bd = params["birth_death"]
            up, down = float(bd["up"]), float(bd["down"])
            rates = np.diag(np.full(d - 1, up), 1) + np.diag(np.full(d - 1, down), -1)
            return cls(layout, rates)
        raise ConfigError("Linear family needs 'matrix' or 'birth_death'")

    @property
    def structure(self) -> StructureTag:
        nz = np.argwhere(self.rates > 0)
        levels = self.layout.level_of()
        if nz.size == 0:
            return StructureTag("dense", 0, 0)
        jumps = levels[nz[:, 1]] - levels[nz[:, 0]]
        return StructureTag("dense", int(max(0, -jumps.min())), int(max(0, jumps.max())))

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        return self.rates


# ----------------------------------------------------------------------
# QBD and the bistable feedback family
# ----------------------------------------------------------------------

class QBDFamily(Family):
    """
    Level-independent QBD with p-dependent scalar multipliers:
    A_0(p) = up_scale(p)·up, A_2(p) = down_scale(p)·down, local phase moves
    scaled by local_scale(p). Level 0 uses the boundary_* blocks.
    """

    name = "QBD"
    SCALE_KEYS = ("up_scale", "down_scale", "local_scale")

    def __init__(self, layout: LevelPhaseLayout, blocks: Dict[str, np.ndarray], scales: Dict[str, FeatureExpression]) -> None:
        super().__init__(layout)
        self.blocks = blocks
        self.scales = scales

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "QBDFamily":
        m0 = layout.phase_counts[0]
        m = layout.phase_counts[1]
        if any(c != m for c in layout.phase_counts[1:]):
            raise ConfigError("QBD levels >= 1 must share one phase count")
        blocks = {
            "up": _matrix(params.get("up", 0.0), (m, m), "up"),
            "local": _off_diagonal(_matrix(params.get("local", 0.0), (m, m), "local")),
            "down": _matrix(params.get("down", 0.0), (m, m), "down"),
        }
        same = m0 == m
        for key, shape, fallback in (
            ("boundary_up", (m0, m), "up"),
            ("boundary_local", (m0, m0), "local"),
            ("boundary_down", (m, m0), "down"),
        ):
            if key in params:
                blocks[key] = _matrix(params[key], shape, key)
            elif same:
                blocks[key] = blocks[fallback]
            else:
                raise ConfigError(f"{key} is required when m_0 != m")
        blocks["boundary_local"] = _off_diagonal(blocks["boundary_local"])
        if not np.allclose(blocks["boundary_down"].sum(axis=1), blocks["down"].sum(axis=1)):
            raise ModelError("boundary_down and down must have equal row sums to keep level 1 conservative")
        scales = {k: parse_expression(str(params[k]), layout) for k in cls.SCALE_KEYS if k in params}
        return cls(layout, blocks, scales)

    @property
    def is_linear(self) -> bool:
        return not self.scales

    @property
    def structure(self) -> StructureTag:
        return StructureTag("qbd", 1, 1)

    def scaled(self, ctx: FeatureContext) -> Dict[str, np.ndarray]:
        up = _scale(self.scales, "up_scale", ctx)
        down = _scale(self.scales, "down_scale", ctx)
        local = _scale(self.scales, "local_scale", ctx)
        b = self.blocks
        return {
            "up": up * b["up"],
            "local": local * b["local"],
            "down": down * b["down"],
            "boundary_up": up * b["boundary_up"],
            "boundary_local": local * b["boundary_local"],
            "boundary_down": down * b["boundary_down"],
        }

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        s = self.scaled(ctx)
        layout = self.layout
        L = layout.truncation_level
        rates = np.zeros((layout.dimension, layout.dimension))
        sl = layout.level_slice
        rates[sl(0), sl(0)] += s["boundary_local"]
        rates[sl(0), sl(1)] += s["boundary_up"]
        rates[sl(1), sl(0)] += s["boundary_down"]
        for k in range(1, L + 1):
            rates[sl(k), sl(k)] += s["local"]
            if k >= 2:
                rates[sl(k), sl(k - 1)] += s["down"]
            if k < L:
                rates[sl(k), sl(k + 1)] += s["up"]
            else:
                rates[sl(k), sl(k)] += s["up"]
        return rates

    def structured_blocks(self, ctx: FeatureContext) -> StructuredBlocks:
        s = self.scaled(ctx)
        A0, A2 = s["up"], s["down"]
        A1 = _with_derived_diagonal(s["local"], A0, A2)
        B0, B2 = s["boundary_up"], s["boundary_down"]
        B1 = _with_derived_diagonal(s["boundary_local"], B0)
        return StructuredBlocks("qbd", (A0, A1, A2), (B0, B1, B2))


class BistableFamily(QBDFamily):
    """
    Two-phase positive-feedback QBD: every phase moves up at rate
    base_up + feedback·tail(1)^2, down at rate down, and phases switch at
    rate switch. The documented calibration point (levels 0..1,
    base_up=0.05, feedback=4, down=1, switch=1) has stable fixed points with
    level-1 mass ≈ 0.0609 and ≈ 0.5926 and an unstable one at ≈ 0.3465.
    """

    name = "Bistable"
    parameters: Dict[str, float] = {}
    CALIBRATION = {"base_up": 0.05, "feedback": 4.0, "down": 1.0, "switch": 1.0}

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "BistableFamily":
        if any(c != 2 for c in layout.phase_counts):
            raise ConfigError("Bistable family uses two phases on every level")
        values = {**cls.CALIBRATION, **{k: float(v) for k, v in params.items()}}
        unknown = set(values) - set(cls.CALIBRATION)
        if unknown:
            raise ConfigError(f"Unknown Bistable parameters {sorted(unknown)}")
        qbd_params = {
            "up": np.eye(2),
            "down": values["down"] * np.eye(2),
            "local": values["switch"] * (np.ones((2, 2)) - np.eye(2)),
            "up_scale": f"{values['base_up']!r} + {values['feedback']!r}*tail(1)^2",
        }
        family = super().from_params(layout, qbd_params)
        family.parameters = values
        return family

    def describe(self) -> Dict[str, Any]:
        return {"family": self.name, **self.parameters}


# ----------------------------------------------------------------------
# GI/M/1 and M/G/1 types
# ----------------------------------------------------------------------

def _block_list(raw: Any, name: str) -> List[Any]:
    if not isinstance(raw, (list, tuple)) or not raw:
        raise ConfigError(f"{name} must be a nonempty list of blocks")
    return list(raw)


class _SkipFreeFamily(Family):
    kind = ""

    def __init__(self, layout: LevelPhaseLayout, A: List[np.ndarray], B: List[np.ndarray], scales: Dict[str, FeatureExpression]) -> None:
        super().__init__(layout)
        self.A = A
        self.B = B
        self.scales = scales

    @property
    def is_linear(self) -> bool:
        return not self.scales

    @classmethod
    def _parse(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> Tuple[int, int, List[Any], Optional[List[Any]], Dict[str, FeatureExpression], int]:
        m0 = layout.phase_counts[0]
        m = layout.phase_counts[1]
        if any(c != m for c in layout.phase_counts[1:]):
            raise ConfigError(f"{cls.name} levels >= 1 must share one phase count")
        raw_a = _block_list(params.get("A"), "A")
        raw_b = _block_list(params["B"], "B") if "B" in params else None
        max_jump = int(params.get("max_jump", get_settings().max_jump))
        if len(raw_a) > max_jump + 2 or (raw_b is not None and len(raw_b) > max_jump + 2):
            raise ConfigError(f"{cls.name} block sequence longer than max_jump + 2 = {max_jump + 2}")
        keys = [f"A{k}" for k in range(max_jump + 2)] + [f"B{k}" for k in range(max_jump + 2)]
        scales = _scales(params.get("scales"), layout, keys)
        return m0, m, raw_a, raw_b, scales, max_jump

    def _scaled(self, ctx: FeatureContext) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        A = [_scale(self.scales, f"A{k}", ctx) * a for k, a in enumerate(self.A)]
        B = [_scale(self.scales, f"B{k}", ctx) * b for k, b in enumerate(self.B)]
        return A, B


class GIM1Family(_SkipFreeFamily):
    """
    Skip-free upward: from level k >= 1 the chain moves to k+1 via A_0, stays
    via A_1 and drops to level k+1-j via A_j; B_{k+1} collects jumps to level 0.
    """

    name = "GIM1"
    kind = "gim1"

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "GIM1Family":
        m0, m, raw_a, raw_b, scales, _ = cls._parse(layout, params)
        A = [_matrix(a, (m, m), f"A{k}") for k, a in enumerate(raw_a)]
        if len(A) < 2:
            A.append(np.zeros((m, m)))
        A[1] = _off_diagonal(A[1])
        if raw_b is None:
            if m0 != m:
                raise ConfigError("B blocks are required when m_0 != m")
            # overshooting jumps land at level 0
            B = [A[0], A[1]] + [sum(A[j] for j in range(k, len(A))) for k in range(2, len(A))]
        else:
            B = [_matrix(raw_b[0], (m0, m), "B0")]
            B.append(_off_diagonal(_matrix(raw_b[1], (m0, m0), "B1")) if len(raw_b) > 1 else np.zeros((m0, m0)))
            B += [_matrix(b, (m, m0), f"B{k}") for k, b in enumerate(raw_b[2:], start=2)]
            for k in range(2, len(A) + 1):
                expected = sum(A[j].sum(axis=1) for j in range(k, len(A))) if k < len(A) else np.zeros(m)
                got = B[k].sum(axis=1) if k < len(B) else np.zeros(m)
                if not np.allclose(got, expected):
                    raise ModelError(f"B{k} row sums must equal those of A{k}+A{k + 1}+... to keep level {k - 1} conservative")
        return cls(layout, A, B, scales)

    @property
    def structure(self) -> StructureTag:
        return StructureTag(self.kind, len(self.A) - 2, 1)

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        A, B = self._scaled(ctx)
        layout = self.layout
        L = layout.truncation_level
        sl = layout.level_slice
        rates = np.zeros((layout.dimension, layout.dimension))
        rates[sl(0), sl(0)] += B[1]
        rates[sl(0), sl(1)] += B[0]
        for k in range(1, L + 1):
            if k + 1 < len(B):
                rates[sl(k), sl(0)] += B[k + 1]
            for l in range(1, k + 2):
                j = k + 1 - l
                if j >= len(A):
                    continue
                rates[sl(k), sl(min(l, L))] += A[j]
        return _off_diagonal(rates)

    def structured_blocks(self, ctx: FeatureContext) -> StructuredBlocks:
        A, B = self._scaled(ctx)
        others = [a for j, a in enumerate(A) if j != 1]
        A = list(A)
        A[1] = _with_derived_diagonal(A[1], *others)
        B = list(B)
        B[1] = _with_derived_diagonal(B[1], B[0])
        return StructuredBlocks(self.kind, tuple(A), tuple(B))


class MG1Family(_SkipFreeFamily):
    """
    Skip-free downward: from level k >= 1 the chain drops to k-1 via A_0
    (B_0 from level 1), stays via A_1 and climbs to k+j-1 via A_j; level 0
    climbs to level j via B_{j+1}.
    """

    name = "MG1"
    kind = "mg1"

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "MG1Family":
        m0, m, raw_a, raw_b, scales, _ = cls._parse(layout, params)
        A = [_matrix(a, (m, m), f"A{k}") for k, a in enumerate(raw_a)]
        if len(A) < 2:
            A.append(np.zeros((m, m)))
        A[1] = _off_diagonal(A[1])
        if raw_b is None:
            if m0 != m:
                raise ConfigError("B blocks are required when m_0 != m")
            B = [A[0], A[1]] + A[2:]
        else:
            B = [_matrix(raw_b[0], (m, m0), "B0")]
            B.append(_off_diagonal(_matrix(raw_b[1], (m0, m0), "B1")) if len(raw_b) > 1 else np.zeros((m0, m0)))
            B += [_matrix(b, (m0, m), f"B{k}") for k, b in enumerate(raw_b[2:], start=2)]
            if not np.allclose(B[0].sum(axis=1), A[0].sum(axis=1)):
                raise ModelError("B0 and A0 must have equal row sums to keep level 1 conservative")
        return cls(layout, A, B, scales)

    @property
    def structure(self) -> StructureTag:
        return StructureTag(self.kind, 1, max(len(self.A), len(self.B)) - 2)

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        A, B = self._scaled(ctx)
        layout = self.layout
        L = layout.truncation_level
        sl = layout.level_slice
        rates = np.zeros((layout.dimension, layout.dimension))
        rates[sl(0), sl(0)] += B[1]
        for j in range(2, len(B)):
            rates[sl(0), sl(min(j - 1, L))] += B[j]
        for k in range(1, L + 1):
            rates[sl(k), sl(k - 1)] += B[0] if k == 1 else A[0]
            for j in range(1, len(A)):
                rates[sl(k), sl(min(k + j - 1, L))] += A[j]
        return _off_diagonal(rates)

    def structured_blocks(self, ctx: FeatureContext) -> StructuredBlocks:
        A, B = self._scaled(ctx)
        others = [a for j, a in enumerate(A) if j != 1]
        A = list(A)
        A[1] = _with_derived_diagonal(A[1], *others)
        B = list(B)
        B[1] = _with_derived_diagonal(B[1], *B[2:])
        return StructuredBlocks(self.kind, tuple(A), tuple(B))


# ----------------------------------------------------------------------
# Supermarket (power-of-d choices)
# ----------------------------------------------------------------------

class SupermarketFamily(Family):
    """
    Join-the-shortest-of-d queues. Per-particle up-rate from level k is
    λ(T_k^d − T_{k+1}^d)/p_k, evaluated in its cancelled form
    λ Σ_i T_k^i T_{k+1}^{d-1-i} so that empty levels stay finite.
    """

    name = "Supermarket"

    def __init__(self, layout: LevelPhaseLayout, d: int, arrival: float, service: float) -> None:
        super().__init__(layout)
        self.d = d
        self.arrival = arrival
        self.service = service

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "SupermarketFamily":
        if any(m != 1 for m in layout.phase_counts):
            raise ConfigError("Supermarket family needs one phase per level")
        d = int(params.get("d", 2))
        arrival = float(params.get("lambda", params.get("arrival", 0.0)))
        service = float(params.get("mu", params.get("service", 1.0)))
        if d < 1:
            raise ConfigError("d must be >= 1")
        if arrival < 0 or service <= 0:
            raise ConfigError("Supermarket needs lambda >= 0 and mu > 0")
        return cls(layout, d, arrival, service)

    @property
    def structure(self) -> StructureTag:
        return StructureTag("birth-death", 1, 1)

    def up_rates(self, ctx: FeatureContext) -> np.ndarray:
        tails = ctx.tails
        upper, lower = tails[:-1], tails[1:]
        ratio = sum(upper ** i * lower ** (self.d - 1 - i) for i in range(self.d))
        return self.arrival * ratio

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        L = self.layout.truncation_level
        up = self.up_rates(ctx)[:L]
        return np.diag(up, 1) + np.diag(np.full(L, self.service), -1)

    def describe(self) -> Dict[str, Any]:
        return {"family": self.name, "d": self.d, "lambda": self.arrival, "mu": self.service}


# ----------------------------------------------------------------------
# Expression blocks from model files
# ----------------------------------------------------------------------

RATE_PATTERN = re.compile(
    r"^\s*(?:rate\s+)?\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*->\s*\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*=\s*(.+?)\s*$"
)


@dataclass(frozen=True)
class RateEntry:
    source: int
    target: int
    expression: FeatureExpression


class ExpressionBlocksFamily(Family):
    name = "ExpressionBlocks"

    def __init__(self, layout: LevelPhaseLayout, entries: List[RateEntry]) -> None:
        super().__init__(layout)
        self.entries = entries
        self.is_linear = all(e.expression.is_constant for e in entries)

    @classmethod
    def from_params(cls, layout: LevelPhaseLayout, params: Mapping[str, Any]) -> "ExpressionBlocksFamily":
        raw = params.get("rates")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("ExpressionBlocks needs a nonempty 'rates' list")
        entries = []
        for line in raw:
            match = RATE_PATTERN.match(str(line))
            if not match:
                raise ConfigError(f"Cannot parse rate entry {line!r}; expected '(k,j) -> (l,i) = <expression>'")
            k, j, l, i = (int(match.group(n)) for n in range(1, 5))
            source = flatten_index(layout, (k, j))
            target = flatten_index(layout, (l, i))
            if source == target:
                raise ConfigError(f"Rate entry {line!r} is a self-transition; diagonals are derived")
            entries.append(RateEntry(source, target, parse_expression(match.group(5), layout)))
        return cls(layout, entries)

    @property
    def structure(self) -> StructureTag:
        levels = self.layout.level_of()
        jumps = [int(levels[e.target] - levels[e.source]) for e in self.entries]
        return StructureTag("dense", max(0, -min(jumps)), max(0, max(jumps)))

    def off_diagonal(self, ctx: FeatureContext) -> np.ndarray:
        rates = np.zeros((self.layout.dimension, self.layout.dimension))
        for entry in self.entries:
            rates[entry.source, entry.target] += entry.expression.evaluate(ctx)
        return rates


FAMILIES: Dict[str, Type[Family]] = {
    "Linear": LinearFamily,
    "QBD": QBDFamily,
    "GIM1": GIM1Family,
    "MG1": MG1Family,
    "Supermarket": SupermarketFamily,
    "Bistable": BistableFamily,
    "ExpressionBlocks": ExpressionBlocksFamily,
}


def get_family(name: str) -> Type[Family]:
    family = FAMILIES.get(name)
    if family is None:
        raise ConfigError(f"Unknown family {name!r}; available: {available()}")
    return family


def available() -> List[str]:
    return sorted(FAMILIES)

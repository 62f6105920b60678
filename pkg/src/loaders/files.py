"""
Local file exports. Tables go to CSV or JSON-lines, reports to JSON. Every
file starts with its metadata (format_version, resolved config, seed): a
`# {...}` comment line in CSV, a leading `{"_meta": {...}}` record in
JSON-lines, a top-level `meta` key in JSON.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import ConfigError, DomainError
from src.state_space import LevelPhaseLayout, ProbabilityVector
from src.transformers.trajectories import VECTOR_SCHEMA, states_from_frame


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FORMATS = ("csv", "jsonl")


def _default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, default=_default, allow_nan=True)


class FileLoader:
    def __init__(self, out_dir: str, fmt: str = "csv", meta: Optional[Dict[str, Any]] = None) -> None:
        if fmt not in FORMATS:
            raise ConfigError(f"Unknown table format {fmt!r}; expected one of {FORMATS}")
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.meta = {"format_version": FORMAT_VERSION, **(meta or {})}
        self.written: List[Path] = []

    def _path(self, name: str, suffix: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{name}.{suffix}"
        self.written.append(path)
        return path

    def write_frame(self, name: str, df: pd.DataFrame, fmt: Optional[str] = None) -> Path:
        fmt = fmt or self.fmt
        header = json.dumps(self.meta, sort_keys=True, default=_default)
        path = self._path(name, fmt)
        if fmt == "csv":
            body = df.to_csv(index=False, lineterminator="\n")
            path.write_text(f"# {header}\n{body}")
        else:
            body = df.to_json(orient="records", lines=True, double_precision=15)
            path.write_text(f'{{"_meta": {header}}}\n{body.rstrip()}\n' if len(df) else f'{{"_meta": {header}}}\n')
        logger.info("[files] wrote %s (%d rows)", path, len(df))
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self._path(name, "json")
        path.write_text(dumps({"meta": self.meta, **payload}) + "\n")
        logger.info("[files] wrote %s", path)
        return path


def read_meta(path: str) -> Dict[str, Any]:
    first = Path(path).read_text().splitlines()[0] if Path(path).stat().st_size else ""
    if first.startswith("# "):
        return json.loads(first[2:])
    if first.startswith('{"_meta"'):
        return json.loads(first)["_meta"]
    if first.startswith("{"):
        return json.loads(Path(path).read_text()).get("meta", {})
    return {}


def read_frame(path: str) -> pd.DataFrame:
    source = Path(path)
    if not source.exists():
        raise ConfigError(f"File not found: {path}")
    if source.suffix == ".jsonl":
        lines = [line for line in source.read_text().splitlines()[1:] if line.strip()]
        records = [json.loads(line) for line in lines]
        return pd.DataFrame.from_records(records)
    return pd.read_csv(source, comment="#")


def _layout_from_vector_frame(df: pd.DataFrame) -> LevelPhaseLayout:
    counts = df.groupby("level")["phase"].max().sort_index()
    if list(counts.index) != list(range(len(counts))):
        raise DomainError("Vector file must list every level from 0 upward")
    return LevelPhaseLayout(tuple(int(c) for c in counts))


def read_vector(path: str, layout: Optional[LevelPhaseLayout] = None) -> ProbabilityVector:
    """Re-read a (level, phase, probability) table written by write_frame."""
    df = VECTOR_SCHEMA.validate(read_frame(path)[["level", "phase", "probability"]].astype({"level": int, "phase": int}))
    df = df.sort_values(["level", "phase"], kind="stable")
    found = _layout_from_vector_frame(df)
    if layout is not None and found != layout:
        raise DomainError(f"Vector in {path} has layout {found.phase_counts}, expected {layout.phase_counts}")
    return ProbabilityVector(found, df["probability"].to_numpy(dtype=float))


def read_trajectory(path: str, layout: LevelPhaseLayout) -> Tuple[np.ndarray, List[ProbabilityVector]]:
    df = read_frame(path)
    return df["t"].to_numpy(dtype=float), states_from_frame(layout, df)

from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import pandera as pa
from pandera import Check, Column

from src.state_space import LevelPhaseLayout, ProbabilityVector


VECTOR_SCHEMA = pa.DataFrameSchema(
    {
        "level": Column(int, Check.ge(0)),
        "phase": Column(int, Check.ge(1)),
        "probability": Column(float, Check.in_range(0.0, 1.0)),
    },
    ordered=True,
)


def trajectory_schema(layout: LevelPhaseLayout, empirical: bool = False) -> pa.DataFrameSchema:
    columns: Dict[str, Column] = {"t": Column(float, Check.ge(0.0))}
    for label in layout.state_labels():
        columns[label] = Column(float, Check.in_range(0.0, 1.0))
    if empirical:
        columns["N"] = Column(int, Check.ge(1))
        columns["seed"] = Column(int)
    return pa.DataFrameSchema(columns, ordered=True, strict=True)


def normalize_trajectory(
    layout: LevelPhaseLayout,
    times: Sequence[float],
    states: Sequence[ProbabilityVector],
    N: Optional[int] = None,
    seed: Optional[int] = None,
) -> pd.DataFrame:
    """One row per stored time: t, p_{k}_{j} for every state, plus N and seed for particle runs."""
    labels = layout.state_labels()
    empirical = N is not None
    schema = trajectory_schema(layout, empirical)
    if not states:
        return pd.DataFrame(columns=list(schema.columns.keys()))
    df = pd.DataFrame(np.vstack([s.values for s in states]), columns=labels)
    df.insert(0, "t", np.asarray(times, dtype=float))
    if empirical:
        df["N"] = int(N)
        df["seed"] = int(seed if seed is not None else 0)
    return schema.validate(df)


def states_from_frame(layout: LevelPhaseLayout, df: pd.DataFrame) -> List[ProbabilityVector]:
    labels = layout.state_labels()
    missing = [c for c in labels if c not in df.columns]
    if missing:
        raise KeyError(f"Trajectory table lacks columns {missing[:3]}...")
    return [ProbabilityVector(layout, row) for row in df[labels].to_numpy(dtype=float)]


def vector_frame(p: ProbabilityVector) -> pd.DataFrame:
    """π as a tidy (level, phase, probability) table."""
    rows: List[Dict[str, Any]] = [
        {"level": level, "phase": phase, "probability": float(value)}
        for (level, phase), value in zip(p.layout.states(), p.values)
    ]
    return VECTOR_SCHEMA.validate(pd.DataFrame(rows))


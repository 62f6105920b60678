from typing import Any, Dict, List

import pandas as pd
import pandera as pa
from pandera import Check, Column


ENTROPY_SCHEMA = pa.DataFrameSchema(
    {
        "t": Column(float, Check.ge(0.0)),
        "R_value": Column(float, Check.ge(0.0)),
        "dR_dt_numeric": Column(float),
        "dR_dt_formula": Column(float, Check.le(1e-12)),
    },
    ordered=True,
)

CENSORED_GAP_SCHEMA = pa.DataFrameSchema(
    {
        "t": Column(float, Check.ge(0.0)),
        "phase": Column(int, Check.ge(1)),
        "lhs": Column(float, nullable=True),
        "rhs": Column(float, nullable=True),
        "gap": Column(float, Check.ge(0.0), nullable=True),
        "status": Column(str, Check.isin(["ok", "censoring_failed"])),
    },
    ordered=True,
)

CHAOS_SCHEMA = pa.DataFrameSchema(
    {
        "N": Column(int, Check.ge(1)),
        "replications": Column(int, Check.ge(2)),
        "mean_sup_l1_error": Column(float, Check.in_range(0.0, 2.0)),
        "std": Column(float, Check.ge(0.0)),
        "standard_error": Column(float, Check.ge(0.0)),
    },
    ordered=True,
)

BASIN_SEED_SCHEMA = pa.DataFrameSchema(
    {
        "seed": Column(str),
        "classification": Column(str, Check.isin(["fixed_point", "suspected_limit_cycle", "non_convergent"])),
        "limit": Column(int, Check.ge(-1)),
        "drift_norm": Column(float, nullable=True),
        "window_diameter": Column(float, nullable=True),
        "error": Column(str),
    },
    ordered=True,
)

LIMIT_SCHEMA = pa.DataFrameSchema(
    {
        "limit": Column(int, Check.ge(0)),
        "classification": Column(str),
        "stability": Column(str, Check.isin(["locally_stable", "unstable", "undetermined"])),
        "drift_norm": Column(float, nullable=True),
        "seed_count": Column(int, Check.ge(1)),
        "certified": Column(bool),
    },
    ordered=True,
)


def _frame(rows: List[Dict[str, Any]], schema: pa.DataFrameSchema) -> pd.DataFrame:
    if not rows:
        return pd.DataFrame(columns=list(schema.columns.keys()))
    return schema.validate(pd.DataFrame(rows, columns=list(schema.columns.keys())))


def normalize_entropy_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return _frame(rows, ENTROPY_SCHEMA)


def normalize_censored_gap_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return _frame(rows, CENSORED_GAP_SCHEMA)


def normalize_chaos_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return _frame(rows, CHAOS_SCHEMA)


def normalize_basin_seed_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return _frame(rows, BASIN_SEED_SCHEMA)


def normalize_limit_rows(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return _frame(rows, LIMIT_SCHEMA)

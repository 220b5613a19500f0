"""Collapse records into the 96-cell poststratification frame and align frames."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .labels import CELL_COLUMNS, Labels

CELL_TABLE_COLUMNS = ("gender", "age_group", "region", "mean", "count", "census_population")


class NoOverlapError(ValueError):
    """Two cell tables share no cell where both means are defined."""


def census_vector(census: pd.DataFrame | None, labels: Labels) -> np.ndarray:
    """Census population per canonical cell; absent crossings count as 0."""
    pop = np.zeros(labels.n_cells, dtype=np.int64)
    if census is not None and len(census):
        idx = labels.cell_index(census["gender"], census["age_group"], census["region"])
        np.add.at(pop, idx, census["population"].to_numpy(dtype=np.int64))
    return pop


def cell_sums(cell: np.ndarray, values: np.ndarray, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell (count, sum); values are summed in sorted order so the result
    does not depend on record order."""
    count = np.bincount(cell, minlength=n_cells).astype(np.int64)
    total = np.zeros(n_cells, dtype=np.float64)
    if cell.size:
        order = np.lexsort((values, cell))
        c, v = cell[order], values[order]
        starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
        total[c[starts]] = np.add.reduceat(v, starts)
    return count, total


def collapse(
    records: pd.DataFrame,
    outcome: str,
    census: pd.DataFrame | None = None,
    labels: Labels | None = None,
) -> pd.DataFrame:
    """Per-cell mean and count of ``records[outcome]`` over all 96 cells.

    Cells without records keep ``count == 0`` and a NaN mean; cells missing
    from ``census`` get population 0.
    """
    labels = labels or Labels()
    cell = labels.cell_index(records["gender"], records["age_group"], records["region"])
    values = records[outcome].to_numpy(dtype=np.float64)
    count, total = cell_sums(cell, values, labels.n_cells)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    keys = labels.cells()
    return pd.DataFrame(
        {
            "gender": [k[0] for k in keys],
            "age_group": [k[1] for k in keys],
            "region": [k[2] for k in keys],
            "mean": mean,
            "count": count,
            "census_population": census_vector(census, labels),
        }
    )


@dataclass
class Aligned:
    keys: list[tuple[str, str, str]]
    a: np.ndarray
    b: np.ndarray
    excluded: list[tuple[str, str, str]]


def align(a: pd.DataFrame, b: pd.DataFrame) -> Aligned:
    """Pair the cell means of two tables on cells where both are defined.

    Both tables must be in canonical cell order (as built by :func:`collapse`).
    """
    key_a = list(zip(a["gender"], a["age_group"], a["region"]))
    key_b = list(zip(b["gender"], b["age_group"], b["region"]))
    if key_a != key_b:
        raise ValueError("cell tables use different label configurations or orders")
    ma = a["mean"].to_numpy(dtype=np.float64)
    mb = b["mean"].to_numpy(dtype=np.float64)
    both = ~np.isnan(ma) & ~np.isnan(mb)
    if not both.any():
        raise NoOverlapError("no cell has a defined mean in both tables")
    return Aligned(
        keys=[k for k, ok in zip(key_a, both) if ok],
        a=ma[both],
        b=mb[both],
        excluded=[k for k, ok in zip(key_a, both) if not ok],
    )


def write_cells(table: pd.DataFrame, path: str | Path) -> None:
    out = table[list(CELL_TABLE_COLUMNS)].copy()
    out["mean"] = ["" if np.isnan(m) else repr(float(m)) for m in out["mean"]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False, lineterminator="\n")


def read_cells(path: str | Path) -> pd.DataFrame:
    # The C parser is not correctly rounded; parse means through Python floats.
    df = pd.read_csv(path, dtype={**{c: str for c in CELL_COLUMNS}, "mean": str}, keep_default_na=False)
    df["mean"] = [float(m) if m else np.nan for m in df["mean"]]
    return df[list(CELL_TABLE_COLUMNS)]

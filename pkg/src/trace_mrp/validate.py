"""Validation battery: rank correlations over cells, descriptives, bias shares,
regional comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import stats

from .frame import NoOverlapError, align
from .labels import CELL_COLUMNS, Labels


class UndefinedCorrelationError(ValueError):
    """Correlation undefined: constant input or too few pairs."""


class SpearmanResult(NamedTuple):
    rho: float
    p: float


def spearman(x, y) -> SpearmanResult:
    """Spearman rank correlation with average ranks for ties.

    The p-value is two-sided, from the t approximation with n - 2 degrees
    of freedom.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x and y must be 1-d of equal length, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise UndefinedCorrelationError(f"need at least 3 pairs, got {n}")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    rho = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    return SpearmanResult(rho, spearman_pvalue(rho, n))


def spearman_pvalue(rho: float, n: int) -> float:
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


@dataclass
class Heatmap:
    names: list[str]
    rho: np.ndarray
    p: np.ndarray
    n_pairs: np.ndarray

    def long(self) -> pd.DataFrame:
        """Upper triangle including the diagonal: ``metric_a,metric_b,rho,p``."""
        rows = []
        for i, j in combinations_with_replacement(range(len(self.names)), 2):
            r, p = self.rho[i, j], self.p[i, j]
            rows.append((self.names[i], self.names[j],
                         None if np.isnan(r) else float(r), None if np.isnan(p) else float(p)))
        return pd.DataFrame(rows, columns=["metric_a", "metric_b", "rho", "p"])

    def to_dict(self) -> dict:
        def clean(m):
            return [[None if np.isnan(v) else float(v) for v in row] for row in m]
        return {"metrics": self.names, "rho": clean(self.rho), "p": clean(self.p),
                "n_pairs": self.n_pairs.astype(int).tolist()}


def heatmap(cell_tables: dict[str, pd.DataFrame]) -> Heatmap:
    """Pairwise Spearman correlations of cell means over mutually defined cells.

    Pairs whose correlation is undefined come out as NaN rather than failing
    the whole matrix.
    """
    names = list(cell_tables)
    if len(names) < 2:
        raise ValueError("heatmap needs at least two metrics")
    k = len(names)
    rho = np.full((k, k), np.nan)
    p = np.full((k, k), np.nan)
    n_pairs = np.zeros((k, k), dtype=np.int64)
    for i, j in combinations_with_replacement(range(k), 2):
        try:
            al = align(cell_tables[names[i]], cell_tables[names[j]])
            n_pairs[i, j] = n_pairs[j, i] = len(al.keys)
            res = spearman(al.a, al.b)
        except (NoOverlapError, UndefinedCorrelationError):
            continue
        if i == j:
            res = SpearmanResult(1.0, 0.0)
        rho[i, j] = rho[j, i] = res.rho
        p[i, j] = p[j, i] = res.p
    return Heatmap(names, rho, p, n_pairs)


@dataclass
class Descriptives:
    name: str
    n: int
    mean: float
    std: float
    min: float
    max: float

    def to_dict(self) -> dict:
        return {"name": self.name, "n": self.n, "mean": self.mean, "std": self.std,
                "min": self.min, "max": self.max}


def descriptives(values, name: str = "") -> Descriptives:
    """n, mean, sample SD (n - 1 denominator; 0 for a single value), min, max."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("descriptives need at least one value")
    v = np.sort(v)
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return Descriptives(name, int(v.size), float(v.sum() / v.size), std, float(v[0]), float(v[-1]))


def _shares(codes: np.ndarray, n_levels: int, weights=None) -> np.ndarray:
    counts = np.bincount(codes, weights=weights, minlength=n_levels).astype(np.float64)
    total = counts.sum()
    return counts / total if total > 0 else np.full(n_levels, np.nan)


def bias_report(users: pd.DataFrame, survey: pd.DataFrame, census: pd.DataFrame,
                labels: Labels | None = None) -> pd.DataFrame:
    """Per dimension and level: trace, survey and census shares, and trace/census ratio."""
    labels = labels or Labels()
    if not len(users) or not len(survey) or not len(census):
        raise ValueError("bias report needs non-empty trace, survey and census inputs")
    rows = []
    for dim in CELL_COLUMNS:
        levels = labels.levels(dim)
        trace = _shares(labels.code(dim, users[dim].to_numpy()), len(levels))
        surv = _shares(labels.code(dim, survey[dim].to_numpy()), len(levels))
        cens = _shares(labels.code(dim, census[dim].to_numpy()), len(levels),
                       census["population"].to_numpy(dtype=np.float64))
        for i, level in enumerate(levels):
            ratio = trace[i] / cens[i] if cens[i] > 0 else np.nan
            rows.append((dim, level, trace[i], surv[i], cens[i], ratio))
    return pd.DataFrame(rows, columns=["dimension", "level", "trace_share", "survey_share",
                                       "census_share", "ratio"])


REGIONAL_COLUMNS = ("survey_dummy", "survey_score", "trace_dummy_disagg", "trace_dummy_mrp", "trace_score")


def regional_table(survey_dummy: dict, survey_score: dict, trace_dummy_disagg: dict,
                   trace_dummy_mrp: dict, trace_score: dict,
                   labels: Labels | None = None) -> pd.DataFrame:
    """One row per region in configured order; missing values become NaN."""
    labels = labels or Labels()
    cols = (survey_dummy, survey_score, trace_dummy_disagg, trace_dummy_mrp, trace_score)
    rows = [(r, *[c.get(r) for c in cols]) for r in labels.regions]
    return pd.DataFrame(rows, columns=["region", *REGIONAL_COLUMNS])


def region_means(records: pd.DataFrame, outcome: str, labels: Labels | None = None) -> dict:
    labels = labels or Labels()
    out = {}
    reg = records["region"].to_numpy(dtype=object)
    y = records[outcome].to_numpy(dtype=np.float64)
    for r in labels.regions:
        v = np.sort(y[reg == r])
        out[r] = float(v.sum() / v.size) if v.size else None
    return out


@dataclass
class ValidationReport:
    descriptives: list[Descriptives]
    heatmap: Heatmap
    bias: pd.DataFrame
    regional: pd.DataFrame
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def nullify(df: pd.DataFrame) -> list[dict]:
            recs = df.astype(object).where(df.notna(), None).to_dict("records")
            return [{k: v.item() if isinstance(v, np.generic) else v for k, v in r.items()} for r in recs]

        return {
            "metadata": self.metadata,
            "descriptives": [d.to_dict() for d in self.descriptives],
            "heatmap": self.heatmap.to_dict(),
            "bias": nullify(self.bias),
            "regional": nullify(self.regional),
        }

"""Readers, validators and writers for the four input tables.

All tables are CSV with a header row (UTF-8, comma separated, RFC-4180
quoting). Readers return validated ``pandas.DataFrame`` objects; the record
dataclasses below describe one row of each and are used for row-level work
and tests.

Line numbers in errors are 1-based file lines (the header is line 1).
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .labels import CELL_COLUMNS, Labels

log = logging.getLogger(__name__)

KINDS = ("original", "retweet", "favorite", "quote", "reply")
TWEET_COLUMNS = ("user_id", "kind", "timestamp", "prob")
USER_COLUMNS = ("user_id", "gender", "age_group", "region")
CENSUS_COLUMNS = ("gender", "age_group", "region", "population")
SURVEY_COLUMNS = ("respondent_id", "gender", "age_group", "region", "religiosity_level")
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

# "not religious at all" .. "very religious"
RELIGIOSITY_LEVELS = (
    "not religious at all",
    "not religious",
    "neither religious nor",
    "religious",
    "very religious",
)


class IngestError(ValueError):
    """Input row or file failed validation."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        if line is not None:
            loc = f"line {line}" + (f", field {field!r}" if field else "")
            message = f"{loc}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class RejectedRowsError(IngestError):
    """Rows whose probability lies outside [0, 1]."""

    def __init__(self, rejected: int, accepted: int, first_line: int):
        super().__init__(
            f"{rejected} row(s) rejected with prob outside [0, 1] "
            f"({accepted} accepted); first at line {first_line}"
        )
        self.rejected = rejected
        self.accepted = accepted
        self.first_line = first_line


@dataclass(frozen=True)
class TweetRecord:
    user_id: str
    kind: str
    timestamp: dt.datetime
    prob: float
    in_window: bool = True


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    gender: str
    age_group: str
    region: str


@dataclass(frozen=True)
class CensusCell:
    gender: str
    age_group: str
    region: str
    population: int


@dataclass(frozen=True)
class SurveyResponse:
    respondent_id: str
    gender: str
    age_group: str
    region: str
    religiosity_level: int
    extra_metrics: dict = field(default_factory=dict)


def window_start(reference_date: dt.date, window_months: int = 24) -> pd.Timestamp:
    """First instant inside the look-back window (inclusive)."""
    ref = pd.Timestamp(reference_date, tz="UTC")
    return ref - pd.DateOffset(months=window_months)


def _line(idx) -> int:
    return int(idx) + 2


def _read(path: str | Path, expected: tuple[str, ...], allow_extra: bool = False) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such input file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise IngestError(f"{path}: empty file, expected header {','.join(expected)}")
    head = tuple(h.strip() for h in header)
    if head[: len(expected)] != expected or (not allow_extra and len(head) != len(expected)):
        raise IngestError(
            f"{path}: header {','.join(head)!r} does not match {','.join(expected)!r}", line=1
        )
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.ParserError as exc:
        m = re.search(r"in line (\d+)", str(exc))
        line = int(m.group(1)) if m else None
        raise IngestError(f"{path}: wrong number of fields ({exc})", line=line) from None
    df.columns = list(head)
    for col in head:
        if col in expected:
            empty = np.flatnonzero(df[col].to_numpy(dtype=object) == "")
            if empty.size:
                raise IngestError("missing value", line=_line(empty[0]), field=col)
    return df


def _to_float(col: pd.Series) -> pd.Series:
    """Correctly rounded float parsing; unparseable entries become NaN."""
    try:
        return pd.Series(col.to_numpy(dtype=object).astype(np.float64), index=col.index)
    except ValueError:
        out = pd.to_numeric(col, errors="coerce")
        ok = out.notna()
        out[ok] = col[ok].to_numpy(dtype=object).astype(np.float64)
        return out.astype(np.float64)


def _check_labels(df: pd.DataFrame, labels: Labels) -> None:
    for col in CELL_COLUMNS:
        levels = labels.levels(col)
        bad = np.flatnonzero(~df[col].isin(levels).to_numpy())
        if bad.size:
            value = df[col].iat[bad[0]]
            raise IngestError(f"unknown {col} label {value!r}", line=_line(bad[0]), field=col)


def parse_tweets(
    path: str | Path,
    reference_date: dt.date,
    window_months: int = 24,
    on_invalid: str = "raise",
) -> pd.DataFrame:
    """Read a tweets file (``user_id,kind,timestamp,prob``).

    Rows older than the window are kept and flagged ``in_window=False``;
    filtering is left to aggregation. With ``on_invalid="drop"`` rows whose
    probability is outside [0, 1] are dropped instead of raising, and the
    counts are kept in ``df.attrs["rejected"]`` / ``df.attrs["accepted"]``.
    """
    if on_invalid not in ("raise", "drop"):
        raise ValueError("on_invalid must be 'raise' or 'drop'")
    df = _read(path, TWEET_COLUMNS)
    n_rows = len(df)

    bad = np.flatnonzero(~df["kind"].isin(KINDS).to_numpy())
    if bad.size:
        raise IngestError(
            f"unknown engagement kind {df['kind'].iat[bad[0]]!r}; expected one of {KINDS}",
            line=_line(bad[0]),
            field="kind",
        )

    ts = pd.to_datetime(df["timestamp"], utc=True, format="ISO8601", errors="coerce")
    bad = np.flatnonzero(ts.isna().to_numpy())
    if bad.size:
        raise IngestError(
            f"unparseable timestamp {df['timestamp'].iat[bad[0]]!r}",
            line=_line(bad[0]),
            field="timestamp",
        )
    horizon = pd.Timestamp(reference_date, tz="UTC") + pd.Timedelta(days=1)
    bad = np.flatnonzero((ts >= horizon).to_numpy())
    if bad.size:
        raise IngestError(
            f"timestamp {df['timestamp'].iat[bad[0]]} is after reference date {reference_date}",
            line=_line(bad[0]),
            field="timestamp",
        )

    prob = _to_float(df["prob"])
    bad = np.flatnonzero(prob.isna().to_numpy())
    if bad.size:
        raise IngestError(f"not a number: {df['prob'].iat[bad[0]]!r}", line=_line(bad[0]), field="prob")

    out = pd.DataFrame(
        {
            "user_id": df["user_id"],
            "kind": df["kind"],
            "timestamp": ts,
            "prob": prob.astype(np.float64),
            "in_window": (ts >= window_start(reference_date, window_months)).to_numpy(),
        }
    )
    out_of_range = ~((out["prob"] >= 0.0) & (out["prob"] <= 1.0)).to_numpy()
    n_rejected = int(out_of_range.sum())
    if n_rejected:
        first = _line(np.flatnonzero(out_of_range)[0])
        if on_invalid == "raise":
            raise RejectedRowsError(n_rejected, n_rows - n_rejected, first)
        log.warning("dropped %d tweet rows with prob outside [0, 1]", n_rejected)
        out = out.loc[~out_of_range].reset_index(drop=True)
    out.attrs["rejected"] = n_rejected
    out.attrs["accepted"] = n_rows - n_rejected
    return out


def parse_users(path: str | Path, labels: Labels | None = None) -> pd.DataFrame:
    """Read user demographics; on duplicate ``user_id`` the last row wins.

    The number of superseded rows is kept in ``df.attrs["duplicates"]``.
    """
    labels = labels or Labels()
    df = _read(path, USER_COLUMNS)
    _check_labels(df, labels)
    dedup = df.drop_duplicates("user_id", keep="last").reset_index(drop=True)
    n_dup = len(df) - len(dedup)
    if n_dup:
        log.warning("%d duplicate user profile row(s) superseded by later rows", n_dup)
    dedup.attrs["duplicates"] = n_dup
    return dedup


def parse_census(path: str | Path, labels: Labels | None = None) -> pd.DataFrame:
    """Read census counts per cell. Missing crossings are allowed (population 0)."""
    labels = labels or Labels()
    df = _read(path, CENSUS_COLUMNS)
    _check_labels(df, labels)
    pop = pd.to_numeric(df["population"], errors="coerce")
    bad = np.flatnonzero((pop.isna() | (pop != np.floor(pop))).to_numpy())
    if bad.size:
        raise IngestError(
            f"population must be an integer, got {df['population'].iat[bad[0]]!r}",
            line=_line(bad[0]),
            field="population",
        )
    bad = np.flatnonzero((pop < 0).to_numpy())
    if bad.size:
        raise IngestError("negative population", line=_line(bad[0]), field="population")
    dup = np.flatnonzero(df.duplicated(list(CELL_COLUMNS)).to_numpy())
    if dup.size:
        key = tuple(df.loc[dup[0], list(CELL_COLUMNS)])
        raise IngestError(f"duplicate census cell {key}", line=_line(dup[0]))
    df["population"] = pop.astype(np.int64)
    if df["population"].sum() <= 0:
        raise IngestError(f"{path}: total census population must be positive")
    return df


def parse_survey(
    path: str | Path, labels: Labels | None = None, metrics: tuple[str, ...] = ()
) -> pd.DataFrame:
    """Read survey responses plus any declared extra metric columns.

    Extra metric cells may be empty (missing answer, read as NaN); present
    values must lie in [0, 1].
    """
    labels = labels or Labels()
    df = _read(path, SURVEY_COLUMNS, allow_extra=True)
    extra = [c for c in df.columns if c not in SURVEY_COLUMNS]
    undeclared = sorted(set(extra) - set(metrics))
    if undeclared:
        raise IngestError(f"{path}: undeclared survey columns {undeclared}", line=1)
    missing = [m for m in metrics if m not in extra]
    if missing:
        raise IngestError(f"{path}: declared survey metrics missing from header: {missing}", line=1)
    _check_labels(df, labels)
    level = pd.to_numeric(df["religiosity_level"], errors="coerce")
    bad = np.flatnonzero((~level.isin([0, 1, 2, 3, 4])).to_numpy())
    if bad.size:
        raise IngestError(
            f"religiosity_level must be an integer 0..4, got {df['religiosity_level'].iat[bad[0]]!r}",
            line=_line(bad[0]),
            field="religiosity_level",
        )
    df["religiosity_level"] = level.astype(np.int64)
    for m in metrics:
        raw = df[m]
        vals = _to_float(raw.replace("", "nan"))
        bad = np.flatnonzero(((raw != "") & (vals.isna() | (vals < 0) | (vals > 1))).to_numpy())
        if bad.size:
            raise IngestError(
                f"metric value must lie in [0, 1], got {raw.iat[bad[0]]!r}", line=_line(bad[0]), field=m
            )
        df[m] = vals.astype(np.float64)
    return df[list(SURVEY_COLUMNS) + list(metrics)]


def survey_dummy(r) -> int | np.ndarray:
    """1 for "religious" / "very religious" (levels 3, 4), else 0.

    Accepts a :class:`SurveyResponse`, a level, or an array of levels.
    """
    level = getattr(r, "religiosity_level", r)
    out = (np.asarray(level) >= 3).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def survey_score(r) -> float | np.ndarray:
    """Ordinal level k in 0..4 rescaled to k / 4."""
    level = getattr(r, "religiosity_level", r)
    out = np.asarray(level, dtype=np.float64) / 4.0
    return float(out) if out.ndim == 0 else out


def add_survey_outcomes(survey: pd.DataFrame) -> pd.DataFrame:
    out = survey.copy()
    out["dummy"] = survey_dummy(out["religiosity_level"].to_numpy())
    out["score"] = survey_score(out["religiosity_level"].to_numpy())
    return out


# --- writers (canonical formatting) -------------------------------------------------------

def _write(df: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def format_prob(p: float) -> str:
    return repr(float(p))


def write_tweets(df: pd.DataFrame, path: str | Path) -> None:
    out = pd.DataFrame(
        {
            "user_id": df["user_id"],
            "kind": df["kind"],
            "timestamp": pd.to_datetime(df["timestamp"], utc=True).dt.strftime(TIMESTAMP_FORMAT),
            "prob": [format_prob(p) for p in df["prob"]],
        }
    )
    _write(out, path)


def write_users(df: pd.DataFrame, path: str | Path) -> None:
    _write(df[list(USER_COLUMNS)], path)


def write_census(df: pd.DataFrame, path: str | Path) -> None:
    _write(df[list(CENSUS_COLUMNS)], path)


def write_survey(df: pd.DataFrame, path: str | Path, metrics: tuple[str, ...] = ()) -> None:
    out = df[list(SURVEY_COLUMNS) + list(metrics)].copy()
    for m in metrics:
        out[m] = [format_prob(v) if pd.notna(v) else "" for v in out[m]]
    _write(out, path)


def tweet_records(df: pd.DataFrame) -> list[TweetRecord]:
    return [
        TweetRecord(u, k, t.to_pydatetime(), float(p), bool(w))
        for u, k, t, p, w in zip(df["user_id"], df["kind"], df["timestamp"], df["prob"], df["in_window"])
    ]


def survey_records(df: pd.DataFrame, metrics: tuple[str, ...] = ()) -> list[SurveyResponse]:
    return [
        SurveyResponse(
            d["respondent_id"], d["gender"], d["age_group"], d["region"],
            int(d["religiosity_level"]), {m: d[m] for m in metrics},
        )
        for d in df.to_dict("records")
    ]

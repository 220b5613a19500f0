"""Tweet-to-user transformation.

Two user-level outcomes are derived from the in-window tweet probabilities:

* ``dummy``: 1 when any tweet's probability reaches the threshold (inclusive).
* ``score``: unweighted arithmetic mean of the probabilities.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import IngestError, window_start
from .labels import CELL_COLUMNS, Labels

log = logging.getLogger(__name__)

USER_TABLE_COLUMNS = ("user_id", "gender", "age_group", "region", "dummy", "score", "n_tweets")


class EmptyHistoryError(ValueError):
    """A user-level aggregate was requested for an empty probability list."""


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    gender: str
    age_group: str
    region: str
    dummy: int
    score: float
    n_tweets: int


def aggregate_dummy(probs, threshold: float = 0.5) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyHistoryError("aggregate_dummy needs at least one probability")
    return int(probs.max() >= threshold)


def aggregate_score(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyHistoryError("aggregate_score needs at least one probability")
    # Sorting fixes the summation order, so the mean is order independent.
    # The clip undoes rounding that can push the mean one ulp past an extreme.
    # reduceat matches the kernel build_user_table uses, so both agree bitwise.
    p = np.sort(probs)
    return float(np.clip(np.add.reduceat(p, [0])[0] / p.size, p[0], p[-1]))


def build_user_table(
    tweets: pd.DataFrame,
    profiles: pd.DataFrame,
    reference_date: dt.date,
    window_months: int = 24,
    threshold: float = 0.5,
) -> pd.DataFrame:
    """Join per-user aggregates of in-window tweets with demographics.

    Users need at least one in-window tweet and a profile. Drop counts land in
    ``attrs``: ``users_in_union`` (ids seen in either input), ``users_out``,
    ``dropped_no_tweets`` (no in-window tweet) and ``dropped_no_profile``
    (in-window tweets but no profile), with
    ``users_out + dropped_no_tweets + dropped_no_profile == users_in_union``.

    Output rows are sorted by ``user_id``.
    """
    start = window_start(reference_date, window_months)
    end = pd.Timestamp(reference_date, tz="UTC") + pd.Timedelta(days=1)
    ts = tweets["timestamp"]
    keep = ((ts >= start) & (ts < end)).to_numpy()

    uid = tweets["user_id"].to_numpy(dtype=object)[keep]
    prob = tweets["prob"].to_numpy(dtype=np.float64)[keep]
    codes, uniq = pd.factorize(uid, sort=True)
    order = np.lexsort((prob, codes))
    codes, prob = codes[order], prob[order]
    starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]]) if codes.size else np.array([], int)
    counts = np.diff(np.r_[starts, codes.size]).astype(np.int64)
    if codes.size:
        sums = np.add.reduceat(prob, starts)
        mins = prob[starts]
        maxes = prob[np.r_[starts[1:], codes.size] - 1]
    else:
        sums = mins = maxes = np.array([], dtype=np.float64)
    agg = pd.DataFrame(
        {
            "user_id": np.asarray(uniq, dtype=object),
            "dummy": (maxes >= threshold).astype(np.int64),
            "score": np.clip(sums / np.maximum(counts, 1), mins, maxes),
            "n_tweets": counts,
        }
    )

    prof = profiles[["user_id", *CELL_COLUMNS]].astype({"user_id": object})
    table = agg.merge(prof, on="user_id", how="inner", validate="one_to_one")
    table = table.sort_values("user_id", kind="mergesort").reset_index(drop=True)
    table = table[list(USER_TABLE_COLUMNS)]

    all_tweeters = pd.Index(tweets["user_id"].unique())
    union = all_tweeters.union(pd.Index(profiles["user_id"].unique()))
    active = pd.Index(agg["user_id"])
    table.attrs.update(
        users_in_union=int(len(union)),
        users_out=int(len(table)),
        dropped_no_tweets=int(len(union) - len(active)),
        dropped_no_profile=int(len(active) - len(table)),
    )
    log.info(
        "user table: %d users kept, %d without in-window tweets, %d without profile",
        len(table), table.attrs["dropped_no_tweets"], table.attrs["dropped_no_profile"],
    )
    return table


def user_records(table: pd.DataFrame) -> list[UserRecord]:
    return [
        UserRecord(r["user_id"], r["gender"], r["age_group"], r["region"],
                   int(r["dummy"]), float(r["score"]), int(r["n_tweets"]))
        for r in table.to_dict("records")
    ]


def write_user_table(table: pd.DataFrame, path: str | Path) -> None:
    out = table[list(USER_TABLE_COLUMNS)].copy()
    out["score"] = [f"{s:.6f}" for s in out["score"]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False, lineterminator="\n")


def read_user_table(path: str | Path, labels: Labels | None = None) -> pd.DataFrame:
    labels = labels or Labels()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such input file: {path}")
    df = pd.read_csv(path, dtype={"user_id": str, "gender": str, "age_group": str, "region": str},
                     keep_default_na=False)
    if tuple(df.columns) != USER_TABLE_COLUMNS:
        raise IngestError(f"{path}: header does not match {','.join(USER_TABLE_COLUMNS)}", line=1)
    for col in CELL_COLUMNS:
        bad = np.flatnonzero(~df[col].isin(labels.levels(col)).to_numpy())
        if bad.size:
            raise IngestError(f"unknown {col} label {df[col].iat[bad[0]]!r}", line=int(bad[0]) + 2, field=col)
    df["dummy"] = df["dummy"].astype(np.int64)
    df["score"] = df["score"].astype(np.float64)
    df["n_tweets"] = df["n_tweets"].astype(np.int64)
    return df

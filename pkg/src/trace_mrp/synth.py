"""Seeded synthetic populations with known cell truth.

A population is a census frame over the 96 cells with a true religiosity
rate per cell from the logistic random-intercept model. From it we draw

* a trace panel whose users are over-sampled by demographic weights
  (e.g. males x3, young adults x2), each emitting tweets with classifier
  probabilities, and
* an unbiased survey answering on the 5-point scale.

Randomness comes only from ``numpy.random.Generator(Philox(seed))``;
Philox4x64-10 is counter based, so a seed reproduces the same draws on
any platform with the same numpy stream semantics.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from . import ingest
from .aggregate import build_user_table
from .labels import Labels
from .mrp import MrpSpec, estimate, estimates_table, fit

# NUTS-1 adult population shares, TR1 (Istanbul) .. TRC; rounded.
DEFAULT_REGION_SHARES = (0.185, 0.043, 0.125, 0.097, 0.098, 0.128,
                         0.047, 0.054, 0.031, 0.026, 0.045, 0.121)
DEFAULT_AGE_SHARES = (0.03, 0.24, 0.21, 0.52)
DEFAULT_GENDER_SHARES = (0.5, 0.5)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SynthSpec:
    seed: int = 0
    beta0: float = -0.5
    beta_male: float = 0.4
    sigma_age: float = 0.3
    sigma_region: float = 0.5
    # rescale drawn effects to mean 0 and population SD sigma exactly
    moment_match: bool = True
    census_total: int = 60_000_000
    gender_shares: tuple[float, ...] = DEFAULT_GENDER_SHARES
    age_shares: tuple[float, ...] = DEFAULT_AGE_SHARES
    region_shares: tuple[float, ...] = DEFAULT_REGION_SHARES
    gender_weights: dict = field(default_factory=lambda: {"male": 3.0})
    age_weights: dict = field(default_factory=lambda: {"<=18": 2.0, "19-29": 2.0})
    region_weights: dict = field(default_factory=dict)
    n_trace_users: int = 50_000
    n_survey: int = 2_000
    mean_tweets: float = 4.0
    classifier_accuracy: float = 1.0
    background_beta: tuple[float, float] = (0.8, 10.0)
    background_scale: float = 0.49
    survey_noise: float = 0.05
    survey_metrics: tuple[str, ...] = ("fasting", "praying")
    reference_date: dt.date = dt.date(2022, 6, 1)
    window_months: int = 24
    labels: Labels = field(default_factory=Labels)

    def __post_init__(self):
        if self.n_trace_users < 1 or self.n_survey < 1:
            raise ValueError("sample sizes must be at least 1")
        if self.mean_tweets < 1:
            raise ValueError("mean_tweets must be at least 1")
        if not 0.0 <= self.classifier_accuracy <= 1.0:
            raise ValueError("classifier_accuracy must lie in [0, 1]")
        if min(self.sigma_age, self.sigma_region) < 0:
            raise ValueError("random-effect SDs must be non-negative")
        for dim, weights in (("gender", self.gender_weights), ("age_group", self.age_weights),
                             ("region", self.region_weights)):
            unknown = set(weights) - set(self.labels.levels(dim))
            if unknown:
                raise ValueError(f"bias weights for unknown {dim} levels: {sorted(unknown)}")
            if any(w <= 0 for w in weights.values()):
                raise ValueError("bias weights must be positive")
        for name, shares, size in (("gender_shares", self.gender_shares, 2),
                                   ("age_shares", self.age_shares, 4),
                                   ("region_shares", self.region_shares, 12)):
            if len(shares) != size or min(shares) <= 0:
                raise ValueError(f"{name} needs {size} positive entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference_date"] = self.reference_date.isoformat()
        d["labels"] = self.labels.to_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Truth:
    labels: Labels
    cell_mean: np.ndarray
    population: np.ndarray

    @property
    def national(self) -> float:
        return float(self.population @ self.cell_mean / self.population.sum())

    @property
    def per_region(self) -> dict:
        region = self.labels.cell_codes()[:, 2]
        out = {}
        for k, r in enumerate(self.labels.regions):
            m = region == k
            out[r] = float(self.population[m] @ self.cell_mean[m] / self.population[m].sum())
        return out

    def table(self) -> pd.DataFrame:
        keys = self.labels.cells()
        return pd.DataFrame({
            "gender": [k[0] for k in keys],
            "age_group": [k[1] for k in keys],
            "region": [k[2] for k in keys],
            "true_mean": self.cell_mean,
        })


@dataclass
class SyntheticData:
    spec: SynthSpec
    truth: Truth
    a_age: np.ndarray
    a_region: np.ndarray
    census: pd.DataFrame
    users: pd.DataFrame
    tweets: pd.DataFrame
    survey: pd.DataFrame
    religious: np.ndarray  # latent 0/1 per trace user, aligned with ``users``


def _effects(rng, size: int, sigma: float, moment_match: bool) -> np.ndarray:
    z = rng.standard_normal(size)
    if not moment_match or sigma == 0:
        return sigma * z
    z = z - z.mean()
    return z / math.sqrt(z @ z / size) * sigma


def _weights(labels: Labels, spec: SynthSpec) -> np.ndarray:
    codes = labels.cell_codes()
    g = np.array([spec.gender_weights.get(v, 1.0) for v in labels.genders])
    a = np.array([spec.age_weights.get(v, 1.0) for v in labels.age_groups])
    r = np.array([spec.region_weights.get(v, 1.0) for v in labels.regions])
    return g[codes[:, 0]] * a[codes[:, 1]] * r[codes[:, 2]]


def census_frame(spec: SynthSpec) -> pd.DataFrame:
    labels = spec.labels
    codes = labels.cell_codes()
    g = np.asarray(spec.gender_shares) / sum(spec.gender_shares)
    a = np.asarray(spec.age_shares) / sum(spec.age_shares)
    r = np.asarray(spec.region_shares) / sum(spec.region_shares)
    pop = np.rint(spec.census_total * g[codes[:, 0]] * a[codes[:, 1]] * r[codes[:, 2]]).astype(np.int64)
    keys = labels.cells()
    return pd.DataFrame({
        "gender": [k[0] for k in keys],
        "age_group": [k[1] for k in keys],
        "region": [k[2] for k in keys],
        "population": pop,
    })


def _cell_columns(labels: Labels, cells: np.ndarray) -> dict:
    codes = labels.cell_codes()[cells]
    return {
        "gender": np.asarray(labels.genders, dtype=object)[codes[:, 0]],
        "age_group": np.asarray(labels.age_groups, dtype=object)[codes[:, 1]],
        "region": np.asarray(labels.regions, dtype=object)[codes[:, 2]],
    }


def generate(spec: SynthSpec) -> SyntheticData:
    labels = spec.labels
    rng = make_rng(spec.seed)
    codes = labels.cell_codes()

    a_age = _effects(rng, len(labels.age_groups), spec.sigma_age, spec.moment_match)
    a_region = _effects(rng, len(labels.regions), spec.sigma_region, spec.moment_match)
    male = (codes[:, 0] == labels.male_index).astype(np.float64)
    true_mean = expit(spec.beta0 + spec.beta_male * male + a_age[codes[:, 1]] + a_region[codes[:, 2]])

    census = census_frame(spec)
    pop = census["population"].to_numpy(dtype=np.float64)

    # trace panel
    w = pop * _weights(labels, spec)
    cells = rng.choice(labels.n_cells, size=spec.n_trace_users, p=w / w.sum())
    religious = (rng.random(spec.n_trace_users) < true_mean[cells]).astype(np.int64)
    width = len(str(spec.n_trace_users))
    user_ids = np.array([f"u{i:0{width}d}" for i in range(spec.n_trace_users)], dtype=object)
    users = pd.DataFrame({"user_id": user_ids, **_cell_columns(labels, cells)})

    n_tweets = rng.geometric(1.0 / spec.mean_tweets, size=spec.n_trace_users)
    owner = np.repeat(np.arange(spec.n_trace_users), n_tweets)
    first = np.r_[0, np.cumsum(n_tweets)[:-1]]
    a_bg, b_bg = spec.background_beta
    prob = spec.background_scale * rng.beta(a_bg, b_bg, size=owner.size)
    # one tweet crosses 0.5 for detected religious users and for false positives
    hit = rng.random(spec.n_trace_users)
    signal = np.where(religious == 1, hit < spec.classifier_accuracy, hit >= spec.classifier_accuracy)
    pick = first + np.floor(rng.random(spec.n_trace_users) * n_tweets).astype(np.int64)
    strong = 0.5 + 0.5 * rng.beta(2.0, 2.0, size=spec.n_trace_users)
    prob[pick[signal]] = strong[signal]
    kinds = np.asarray(ingest.KINDS, dtype=object)[rng.integers(0, len(ingest.KINDS), size=owner.size)]
    start = ingest.window_start(spec.reference_date, spec.window_months)
    span = int((pd.Timestamp(spec.reference_date, tz="UTC") - start).total_seconds())
    offsets = rng.integers(0, span, size=owner.size)
    stamps = start + pd.to_timedelta(offsets, unit="s")
    tweets = pd.DataFrame({
        "user_id": user_ids[owner],
        "kind": kinds,
        "timestamp": stamps,
        "prob": prob,
        "in_window": np.ones(owner.size, dtype=bool),
    })

    # unbiased survey
    s_cells = rng.choice(labels.n_cells, size=spec.n_survey, p=pop / pop.sum())
    s_rel = rng.random(spec.n_survey) < true_mean[s_cells]
    latent = np.where(s_rel, 0.6 + 0.4 * rng.random(spec.n_survey), 0.6 * rng.random(spec.n_survey))
    noisy = np.clip(latent + spec.survey_noise * rng.standard_normal(spec.n_survey), 0.0, 1.0)
    level = np.minimum(np.floor(noisy * 5.0), 4).astype(np.int64)
    width = len(str(spec.n_survey))
    survey = pd.DataFrame({
        "respondent_id": [f"r{i:0{width}d}" for i in range(spec.n_survey)],
        **_cell_columns(labels, s_cells),
        "religiosity_level": level,
    })
    for j, m in enumerate(spec.survey_metrics):
        base = 0.1 + 0.1 * j
        survey[m] = (rng.random(spec.n_survey) < base + (0.85 - base) * latent).astype(np.float64)

    return SyntheticData(
        spec=spec,
        truth=Truth(labels, true_mean, pop),
        a_age=a_age,
        a_region=a_region,
        census=census,
        users=users,
        tweets=tweets,
        survey=survey,
        religious=religious,
    )


def write(data: SyntheticData, out_dir: str | Path) -> dict[str, Path]:
    """Write the dataset in the ingest CSV schemas plus truth.csv, spec.json and config.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = data.spec
    paths = {name: out / f"{name}.csv" for name in ("census", "users", "tweets", "survey", "truth")}
    ingest.write_census(data.census, paths["census"])
    ingest.write_users(data.users, paths["users"])
    ingest.write_tweets(data.tweets, paths["tweets"])
    ingest.write_survey(data.survey, paths["survey"], spec.survey_metrics)
    truth = data.truth.table()
    truth["true_mean"] = [repr(float(v)) for v in truth["true_mean"]]
    truth.to_csv(paths["truth"], index=False, lineterminator="\n")
    paths["spec"] = out / "spec.json"
    paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["config"] = out / "config.txt"
    labels = spec.labels
    paths["config"].write_text("\n".join([
        "tweets = tweets.csv",
        "users = users.csv",
        "census = census.csv",
        "survey = survey.csv",
        f"reference_date = {spec.reference_date.isoformat()}",
        f"window_months = {spec.window_months}",
        f"genders = {', '.join(labels.genders)}",
        f"age_groups = {', '.join(labels.age_groups)}",
        f"regions = {', '.join(labels.regions)}",
        f"survey_metrics = {', '.join(spec.survey_metrics)}",
        f"seed = {spec.seed}",
    ]) + "\n")
    return paths


def evaluate(estimates: pd.DataFrame, truth: Truth) -> dict:
    """Absolute error of each estimator against the truth, nationally and per region.

    ``estimates`` has columns ``level,key,disaggregated,mrp``; missing
    estimates give ``None`` errors.
    """
    def err(v, t):
        return None if v is None or pd.isna(v) else abs(float(v) - t)

    out = {"national": {}, "region": {}}
    nat = estimates[estimates["level"] == "national"].iloc[0]
    for col in ("disaggregated", "mrp"):
        out["national"][col] = err(nat[col], truth.national)
    per_region = truth.per_region
    for _, row in estimates[estimates["level"] == "region"].iterrows():
        out["region"][row["key"]] = {
            col: err(row[col], per_region[row["key"]]) for col in ("disaggregated", "mrp")
        }
    return out


def run_pipeline(data: SyntheticData, threshold: float = 0.5, mrp_spec: MrpSpec | None = None) -> pd.DataFrame:
    """Aggregate the synthetic trace in memory, fit MRP on the dummy and tabulate estimates."""
    spec = data.spec
    users = build_user_table(data.tweets, data.users, spec.reference_date, spec.window_months, threshold)
    fitted = fit(mrp_spec or MrpSpec(), users, "dummy", spec.labels)
    post = estimate(fitted, data.truth.population)
    table = estimates_table(users, "dummy", post, spec.labels)
    table.attrs["converged"] = fitted.converged
    return table


def run_replicates(spec: SynthSpec, replicates: int, first_seed: int | None = None) -> pd.DataFrame:
    """One row per seed: national truth, both estimates and their absolute errors."""
    base = spec.seed if first_seed is None else first_seed
    rows = []
    for i in range(replicates):
        rep_spec = replace(spec, seed=base + i)
        data = generate(rep_spec)
        table = run_pipeline(data)
        nat = table[table["level"] == "national"].iloc[0]
        t = data.truth.national
        rows.append({
            "seed": base + i,
            "truth": t,
            "disaggregated": nat["disaggregated"],
            "mrp": nat["mrp"],
            "err_disaggregated": abs(nat["disaggregated"] - t),
            "err_mrp": abs(nat["mrp"] - t),
            "converged": bool(table.attrs["converged"]),
        })
    df = pd.DataFrame(rows)
    df["mrp_wins"] = df["err_mrp"] < df["err_disaggregated"]
    return df


def summarize_replicates(df: pd.DataFrame) -> dict:
    return {
        "replicates": int(len(df)),
        "mrp_wins": int(df["mrp_wins"].sum()),
        "mean_abs_error_mrp": float(df["err_mrp"].mean()),
        "mean_abs_error_disaggregated": float(df["err_disaggregated"].mean()),
        "all_converged": bool(df["converged"].all()),
    }

"""Non-Bayesian multilevel regression and poststratification.

Binary outcomes use a logistic random-intercept model

    logit P(y = 1) = b0 + b_male * male + a_age[j] + a_region[k],
    a_age ~ N(0, s_age^2),  a_region ~ N(0, s_region^2),

fitted by maximising the Laplace approximation of the marginal likelihood:
penalised IRLS over the coefficients at fixed standard deviations, and a
coordinate-wise golden-section search over the log standard deviations.
Continuous outcomes use the Gaussian analogue (identity link) with a REML
criterion; there the search runs over the standard deviations relative to
the residual one, which is profiled out.

All predictors live on the 96 demographic cells, so the likelihood only
needs per-cell counts and sums; individual rows never enter the fit.
Random effects are handled in the spherical parametrisation
``a = sigma * v`` with ``v ~ N(0, I)``, which stays well defined at
``sigma = 0``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from .frame import cell_sums, census_vector
from .labels import Labels

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SeparationError(ValueError):
    """Coefficients diverge: the outcome is (quasi-)completely separated."""


@dataclass
class MrpSpec:
    """Model and optimiser settings.

    ``sigma_age`` / ``sigma_region`` pin the random-effect SD when set; for
    the continuous model only a pin at 0 is supported.
    """

    outcome_kind: str = "binary"
    gender_effect: bool = True
    sigma_age: float | None = None
    sigma_region: float | None = None
    inner_tol: float = 1e-10
    inner_max_iter: int = 200
    outer_tol: float = 1e-6
    outer_max_iter: int = 100
    golden_tol: float = 1e-8
    log_sigma_bounds: tuple[float, float] = (math.log(1e-4), math.log(10.0))
    separation_bound: float = 30.0

    def __post_init__(self):
        if self.outcome_kind not in ("binary", "continuous"):
            raise ValueError(f"outcome_kind must be 'binary' or 'continuous', got {self.outcome_kind!r}")
        for name in ("sigma_age", "sigma_region"):
            s = getattr(self, name)
            if s is not None and s < 0:
                raise ValueError(f"{name} must be non-negative")
            if s not in (None, 0, 0.0) and self.outcome_kind == "continuous":
                raise ValueError("continuous model supports pinning a random-effect SD only at 0")


@dataclass
class CellData:
    """Per-cell sufficient statistics of one outcome."""

    labels: Labels
    n: np.ndarray
    total: np.ndarray
    ss_within: np.ndarray

    @property
    def n_obs(self) -> int:
        return int(self.n.sum())

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n > 0, self.total / np.maximum(self.n, 1), 0.0)


@dataclass
class MrpFit:
    outcome_kind: str
    labels: Labels
    beta0: float
    beta_male: float
    a_age: np.ndarray
    a_region: np.ndarray
    sigma_age: float
    sigma_region: float
    converged: bool
    iterations: int
    final_deviance: float
    inner_converged: bool = True
    inner_iterations: int = 0
    sigma_residual: float | None = None
    n_obs: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def extension(self) -> str | None:
        return "continuous-outcome MRP (identity link)" if self.outcome_kind == "continuous" else None

    def to_dict(self) -> dict:
        return {
            "outcome_kind": self.outcome_kind,
            "extension": self.extension,
            "labels": self.labels.to_dict(),
            "beta0": float(self.beta0),
            "beta_male": float(self.beta_male),
            "a_age": dict(zip(self.labels.age_groups, map(float, self.a_age))),
            "a_region": dict(zip(self.labels.regions, map(float, self.a_region))),
            "sigma_age": float(self.sigma_age),
            "sigma_region": float(self.sigma_region),
            "sigma_residual": None if self.sigma_residual is None else float(self.sigma_residual),
            "n_obs": int(self.n_obs),
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "final_deviance": float(self.final_deviance),
                "inner_converged": bool(self.inner_converged),
                "inner_iterations": int(self.inner_iterations),
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MrpFit":
        labels = Labels(**d["labels"])
        conv = d["convergence"]
        return cls(
            outcome_kind=d["outcome_kind"],
            labels=labels,
            beta0=d["beta0"],
            beta_male=d["beta_male"],
            a_age=np.array([d["a_age"][k] for k in labels.age_groups]),
            a_region=np.array([d["a_region"][k] for k in labels.regions]),
            sigma_age=d["sigma_age"],
            sigma_region=d["sigma_region"],
            converged=conv["converged"],
            iterations=conv["iterations"],
            final_deviance=conv["final_deviance"],
            inner_converged=conv.get("inner_converged", True),
            inner_iterations=conv.get("inner_iterations", 0),
            sigma_residual=d.get("sigma_residual"),
            n_obs=d.get("n_obs", 0),
            warnings=list(d.get("warnings", [])),
        )


# --- data and design ----------------------------------------------------------------------

def cell_data(users: pd.DataFrame, outcome: str, labels: Labels | None = None) -> CellData:
    labels = labels or Labels()
    cell = labels.cell_index(users["gender"], users["age_group"], users["region"])
    y = users[outcome].to_numpy(dtype=np.float64)
    n, total = cell_sums(cell, y, labels.n_cells)
    mean = np.where(n > 0, total / np.maximum(n, 1), 0.0)
    _, ss = cell_sums(cell, (y - mean[cell]) ** 2, labels.n_cells)
    return CellData(labels, n, total, ss)


def design(labels: Labels, gender_effect: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-effect matrix X (cells x p) and random-effect indicator Z (cells x 16)."""
    codes = labels.cell_codes()
    n_cells = labels.n_cells
    male = (codes[:, 0] == labels.male_index).astype(np.float64)
    cols = [np.ones(n_cells)]
    if gender_effect:
        cols.append(male)
    X = np.column_stack(cols)
    n_age, n_reg = len(labels.age_groups), len(labels.regions)
    Z = np.zeros((n_cells, n_age + n_reg))
    Z[np.arange(n_cells), codes[:, 1]] = 1.0
    Z[np.arange(n_cells), n_age + codes[:, 2]] = 1.0
    return X, Z


def _scales(labels: Labels, sigma_age: float, sigma_region: float) -> np.ndarray:
    return np.r_[np.full(len(labels.age_groups), sigma_age), np.full(len(labels.regions), sigma_region)]


# --- penalised likelihood in the natural (a) parametrisation -------------------------------

def _split(params, labels: Labels):
    params = np.asarray(params, dtype=np.float64)
    n_age = len(labels.age_groups)
    return params[:2], params[2 : 2 + n_age], params[2 + n_age :]


def penalized_loglik(params, data: CellData, sigma_age: float, sigma_region: float,
                     sigma_residual: float = 1.0, kind: str = "binary") -> float:
    """Penalised log-likelihood at ``params = (b0, b_male, a_age..., a_region...)``.

    Binary: Bernoulli log-likelihood minus ``sum(a^2) / (2 sigma^2)`` per
    grouping. Continuous: Gaussian log-likelihood kernel with residual SD
    ``sigma_residual`` minus the same penalty. Both SDs must be positive.
    """
    X, Z = design(data.labels)
    beta, a_age, a_reg = _split(params, data.labels)
    eta = X @ beta + Z @ np.r_[a_age, a_reg]
    penalty = 0.5 * (a_age @ a_age / sigma_age**2 + a_reg @ a_reg / sigma_region**2)
    if kind == "binary":
        ll = data.total @ eta - data.n @ np.logaddexp(0.0, eta)
    else:
        rss = data.ss_within.sum() + data.n @ (data.mean - eta) ** 2
        ll = -0.5 * rss / sigma_residual**2
    return float(ll - penalty)


def penalized_gradient(params, data: CellData, sigma_age: float, sigma_region: float,
                       sigma_residual: float = 1.0, kind: str = "binary") -> np.ndarray:
    X, Z = design(data.labels)
    beta, a_age, a_reg = _split(params, data.labels)
    a = np.r_[a_age, a_reg]
    eta = X @ beta + Z @ a
    if kind == "binary":
        resid = data.total - data.n * expit(eta)
    else:
        resid = data.n * (data.mean - eta) / sigma_residual**2
    scale = _scales(data.labels, sigma_age, sigma_region)
    return np.r_[X.T @ resid, Z.T @ resid - a / scale**2]


# --- inner solvers --------------------------------------------------------------------------

@dataclass
class _Inner:
    coef: np.ndarray  # (beta, v) in spherical parametrisation
    objective: float  # -2 * Laplace / REML log-likelihood
    converged: bool
    iterations: int
    rss: float = float("nan")


def _binary_f(A, coef, pen, data: CellData) -> float:
    eta = A @ coef
    return float(data.total @ eta - data.n @ np.logaddexp(0.0, eta) - 0.5 * (pen * coef) @ coef)


def _pirls(data: CellData, X, Z, scale, start, spec: MrpSpec) -> _Inner:
    """Penalised IRLS for the binary model at fixed random-effect SDs."""
    p, q = X.shape[1], Z.shape[1]
    A = np.hstack([X, Z * scale])
    pen = np.r_[np.zeros(p), np.ones(q)]
    coef = start.copy()
    f = _binary_f(A, coef, pen, data)
    converged = False
    it = 0
    for it in range(1, spec.inner_max_iter + 1):
        eta = A @ coef
        mu = expit(eta)
        w = data.n * mu * (1.0 - mu)
        grad = A.T @ (data.total - data.n * mu) - pen * coef
        H = (A.T * w) @ A + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        decrement = float(grad @ step)
        t = 1.0
        while True:
            cand = coef + t * step
            f_new = _binary_f(A, cand, pen, data)
            if f_new >= f - 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
            if t < 1e-10:
                # no ascent left at machine precision
                cand, f_new = coef, f
                break
        change = 2.0 * abs(f_new - f)
        coef, f = cand, f_new
        if np.max(np.abs(coef[:p])) > spec.separation_bound:
            mu = expit(A @ coef)
            w = data.n * mu * (1.0 - mu)
            if np.min(w[data.n > 0]) < 1e-10:
                raise SeparationError(
                    "fixed effects diverge (|beta| > %g) with vanishing IRLS weights: the outcome "
                    "looks completely separated; inspect the threshold and the cell counts"
                    % spec.separation_bound
                )
        if change < spec.inner_tol or decrement < spec.inner_tol:
            converged = True
            break
    mu = expit(A @ coef)
    w = data.n * mu * (1.0 - mu)
    AZ = A[:, p:]
    _, logdet = np.linalg.slogdet((AZ.T * w) @ AZ + np.eye(q))
    return _Inner(coef, -2.0 * f + logdet, converged, it)


def _gaussian(data: CellData, X, Z, scale) -> _Inner:
    """Penalised least squares and REML criterion at fixed relative SDs."""
    p, q = X.shape[1], Z.shape[1]
    A = np.hstack([X, Z * scale])
    pen = np.r_[np.zeros(p), np.ones(q)]
    M = (A.T * data.n) @ A + np.diag(pen)
    rhs = A.T @ data.total
    coef = np.linalg.solve(M, rhs)
    resid = data.mean - A @ coef
    rss = float(data.ss_within.sum() + data.n @ resid**2 + coef[p:] @ coef[p:])
    dof = data.n_obs - p
    _, logdet = np.linalg.slogdet(M)
    crit = logdet + dof * (1.0 + math.log(2.0 * math.pi * rss / dof))
    return _Inner(coef, crit, True, 1, rss)


# --- outer search -------------------------------------------------------------------------

def _golden_min(fun, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
    # compare the interior winner against the end points (boundary optima)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for x in (lo, hi):
        fx = fun(x)
        if fx < best_f:
            best_x, best_f = x, fx
    return best_x


def fit_cells(spec: MrpSpec, data: CellData) -> MrpFit:
    """Fit the multilevel model to per-cell sufficient statistics."""
    labels = data.labels
    X, Z = design(labels, spec.gender_effect)
    p, q = X.shape[1], Z.shape[1]
    n_age = len(labels.age_groups)
    warnings: list[str] = []
    binary = spec.outcome_kind == "binary"

    if data.n_obs == 0:
        raise ValueError("no observations to fit")
    if binary:
        k = data.total.sum()
        if k <= 0 or k >= data.n_obs:
            raise ValueError("binary MRP needs at least two distinct outcome values")
    elif np.all(data.ss_within == 0) and np.ptp(data.mean[data.n > 0]) == 0:
        raise ValueError("continuous MRP needs at least two distinct outcome values")
    if not binary and data.n_obs <= p:
        raise ValueError("too few observations for the continuous model")

    observed = data.n > 0
    codes = labels.cell_codes()
    pinned = {"age": spec.sigma_age, "region": spec.sigma_region}
    for name, col in (("age", 1), ("region", 2)):
        if pinned[name] is None and len(np.unique(codes[observed, col])) < 2:
            msg = f"{name} grouping has a single observed level; its SD is fixed to 0"
            log.warning(msg)
            warnings.append(msg)
            pinned[name] = 0.0

    lo, hi = spec.log_sigma_bounds
    free = [name for name in ("age", "region") if pinned[name] is None]
    log_s = {name: math.log(0.5) for name in free}

    def sigmas() -> tuple[float, float]:
        s_age = pinned["age"] if pinned["age"] is not None else math.exp(log_s["age"])
        s_reg = pinned["region"] if pinned["region"] is not None else math.exp(log_s["region"])
        return s_age, s_reg

    state = {"coef": np.zeros(p + q), "scale": _scales(labels, *sigmas())}
    if binary:
        # start the intercept at the pooled logit
        pbar = data.total.sum() / data.n_obs
        state["coef"][0] = math.log(pbar / (1.0 - pbar))

    def solve(s_age: float, s_reg: float) -> _Inner:
        scale = _scales(labels, s_age, s_reg)
        if not binary:
            return _gaussian(data, X, Z, scale)
        # carry the random effects over on the natural scale
        old = state["scale"]
        u = state["coef"][p:] * old
        start = state["coef"].copy()
        start[p:] = np.where(scale > 0, u / np.where(scale > 0, scale, 1.0), 0.0)
        res = _pirls(data, X, Z, scale, start, spec)
        state["coef"], state["scale"] = res.coef, scale
        return res

    iterations = 0
    converged = True
    if free:
        converged = False
        for iterations in range(1, spec.outer_max_iter + 1):
            moves = []
            for name in free:
                before = log_s[name]

                def objective(x, name=name):
                    log_s[name] = x
                    return solve(*sigmas()).objective

                best = _golden_min(objective, lo, hi, spec.golden_tol)
                log_s[name] = best
                moves.append(abs(best - before))
            if max(moves) < spec.outer_tol:
                converged = True
                break

    s_age, s_reg = sigmas()
    final = solve(s_age, s_reg)
    if not final.converged:
        warnings.append("inner PIRLS loop hit its iteration cap")
    scale = _scales(labels, s_age, s_reg)
    u = final.coef[p:] * scale
    beta0 = float(final.coef[0])
    beta_male = float(final.coef[1]) if spec.gender_effect else 0.0
    sigma_resid = None
    if not binary:
        sigma_resid = math.sqrt(final.rss / (data.n_obs - p))
        # the search ran over SDs relative to the residual one; u is already on the data scale
        s_age, s_reg = s_age * sigma_resid, s_reg * sigma_resid
    if not converged:
        log.warning("variance-component search did not converge in %d sweeps", iterations)
        warnings.append(f"outer search did not converge within {spec.outer_max_iter} sweeps")
    return MrpFit(
        outcome_kind=spec.outcome_kind,
        labels=labels,
        beta0=beta0,
        beta_male=beta_male,
        a_age=u[:n_age].copy(),
        a_region=u[n_age:].copy(),
        sigma_age=float(s_age),
        sigma_region=float(s_reg),
        converged=bool(converged and final.converged),
        iterations=iterations,
        final_deviance=float(final.objective),
        inner_converged=final.converged,
        inner_iterations=final.iterations,
        sigma_residual=sigma_resid,
        n_obs=data.n_obs,
        warnings=warnings,
    )


def fit(spec: MrpSpec, users: pd.DataFrame, outcome: str = "dummy", labels: Labels | None = None) -> MrpFit:
    """Fit the multilevel model to user records, using column ``outcome``."""
    y = users[outcome].to_numpy(dtype=np.float64)
    if spec.outcome_kind == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValueError(f"binary MRP needs a 0/1 outcome; column {outcome!r} has other values")
    if spec.outcome_kind == "continuous" and not np.all((y >= 0) & (y <= 1)):
        raise ValueError(f"continuous MRP needs an outcome in [0, 1]; column {outcome!r} does not comply")
    return fit_cells(spec, cell_data(users, outcome, labels))


# --- prediction and poststratification ----------------------------------------------------

def linear_predictor(fit: MrpFit) -> np.ndarray:
    codes = fit.labels.cell_codes()
    male = (codes[:, 0] == fit.labels.male_index).astype(np.float64)
    return fit.beta0 + fit.beta_male * male + fit.a_age[codes[:, 1]] + fit.a_region[codes[:, 2]]


def predict_cells(fit: MrpFit) -> np.ndarray:
    """Predicted mean for every one of the 96 cells, sampled or not."""
    eta = linear_predictor(fit)
    if fit.outcome_kind == "binary":
        return expit(eta)
    return np.clip(eta, 0.0, 1.0)


def saturated_predictions(data: CellData) -> np.ndarray:
    """Cell-means model (one free parameter per cell, no shrinkage); NaN for empty cells."""
    return np.where(data.n > 0, data.mean, np.nan)


def _population(census, labels: Labels) -> np.ndarray:
    if isinstance(census, pd.DataFrame):
        if "census_population" in census.columns:
            return census["census_population"].to_numpy(dtype=np.float64)
        return census_vector(census, labels).astype(np.float64)
    return np.asarray(census, dtype=np.float64)


def poststratify(per_cell, census, level: str = "national", labels: Labels | None = None):
    """Census-weighted mean of cell predictions.

    ``census`` is a cell table (``census_population`` column), a census
    DataFrame, or a population vector in canonical cell order. For
    ``level="national"`` a float is returned; for ``level="region"`` a dict
    region -> float, with ``None`` for regions whose population is 0.
    """
    labels = labels or Labels()
    pred = np.asarray(per_cell, dtype=np.float64)
    pop = _population(census, labels)
    if level == "national":
        if pop.sum() <= 0:
            raise ValueError("census population sums to zero")
        return float(pop @ pred / pop.sum())
    if level != "region":
        raise ValueError("level must be 'national' or 'region'")
    region = labels.cell_codes()[:, 2]
    out = {}
    for k, name in enumerate(labels.regions):
        m = region == k
        tot = pop[m].sum()
        if tot <= 0:
            log.warning("region %s has zero census population; estimate undefined", name)
            out[name] = None
        else:
            out[name] = float(pop[m] @ pred[m] / tot)
    return out


def disaggregated_estimate(users: pd.DataFrame, outcome: str, level: str = "national",
                           labels: Labels | None = None):
    """Raw unweighted mean of user outcomes, nationally or per region (None when empty)."""
    labels = labels or Labels()
    y = users[outcome].to_numpy(dtype=np.float64)
    if level == "national":
        if y.size == 0:
            return None
        return float(np.sort(y).sum() / y.size)
    if level != "region":
        raise ValueError("level must be 'national' or 'region'")
    out = {}
    reg = users["region"].to_numpy(dtype=object)
    for name in labels.regions:
        v = y[reg == name]
        out[name] = float(np.sort(v).sum() / v.size) if v.size else None
    return out


@dataclass
class PoststratifiedEstimate:
    national: float
    per_region: dict
    per_cell: np.ndarray


def estimate(fit: MrpFit, census) -> PoststratifiedEstimate:
    pred = predict_cells(fit)
    return PoststratifiedEstimate(
        national=poststratify(pred, census, "national", fit.labels),
        per_region=poststratify(pred, census, "region", fit.labels),
        per_cell=pred,
    )


def estimates_table(users: pd.DataFrame, outcome: str, post: PoststratifiedEstimate,
                    labels: Labels | None = None) -> pd.DataFrame:
    """``level,key,disaggregated,mrp`` rows: one national, then one per region."""
    labels = labels or Labels()
    dis_reg = disaggregated_estimate(users, outcome, "region", labels)
    rows = [("national", "all", disaggregated_estimate(users, outcome, "national", labels), post.national)]
    rows += [("region", r, dis_reg[r], post.per_region[r]) for r in labels.regions]
    return pd.DataFrame(rows, columns=["level", "key", "disaggregated", "mrp"])


def write_estimates(table: pd.DataFrame, path: str | Path) -> None:
    out = table.copy()
    for col in ("disaggregated", "mrp"):
        out[col] = ["" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v)) for v in out[col]]
    out.to_csv(path, index=False, lineterminator="\n")


def read_estimates(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"level": str, "key": str})


def write_fit(fit: MrpFit, path: str | Path, metadata: dict | None = None) -> None:
    doc = fit.to_dict()
    if metadata is not None:
        doc["metadata"] = metadata
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

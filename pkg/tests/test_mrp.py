import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from conftest import full_census, random_users
from oracles import central_difference_gradient, logistic_irls
from trace_mrp import mrp
from trace_mrp.frame import collapse
from trace_mrp.labels import Labels
from trace_mrp.mrp import MrpFit, MrpSpec, SeparationError

NO_RANDOM = dict(sigma_age=0.0, sigma_region=0.0)


def simulate_users(seed, labels, n=20000, b0=-0.4, b_male=0.5, s_age=0.4, s_reg=0.6):
    rng = np.random.default_rng(seed)
    users = random_users(rng, labels, n)
    a_age = dict(zip(labels.age_groups, rng.normal(0, s_age, 4)))
    a_reg = dict(zip(labels.regions, rng.normal(0, s_reg, 12)))
    eta = (b0 + b_male * (users["gender"] == "male")
           + users["age_group"].map(a_age) + users["region"].map(a_reg))
    users["dummy"] = (rng.random(n) < expit(eta.to_numpy())).astype(int)
    return users


def test_intercept_only_equals_logit_of_share(labels):
    rng = np.random.default_rng(0)
    y = (rng.random(777) < 0.3).astype(int)
    users = random_users(rng, labels, 777, y)
    f = mrp.fit(MrpSpec(gender_effect=False, **NO_RANDOM), users, labels=labels)
    assert f.beta0 == pytest.approx(logit(y.mean()), abs=1e-9)
    assert f.converged


@pytest.mark.parametrize("seed", range(3))
def test_zero_sigma_matches_plain_logistic_regression(seed, labels):
    users = simulate_users(seed, labels, n=5000)
    f = mrp.fit(MrpSpec(**NO_RANDOM), users, labels=labels)
    X = np.column_stack([np.ones(len(users)), (users["gender"] == "male").to_numpy(float)])
    ref = logistic_irls(X, users["dummy"].to_numpy())
    assert abs(f.beta0 - ref[0]) < 1e-6
    assert abs(f.beta_male - ref[1]) < 1e-6


@pytest.mark.parametrize("kind", ["binary", "continuous"])
def test_gradient_matches_central_differences(kind, labels):
    rng = np.random.default_rng(5)
    users = random_users(rng, labels, 3000, outcome=rng.integers(0, 2, 3000) if kind == "binary" else rng.random(3000))
    data = mrp.cell_data(users, "dummy", labels)
    params = rng.normal(0, 0.5, 2 + 16)
    args = (data, 0.4, 0.7, 0.3, kind)
    g = mrp.penalized_gradient(params, *args)
    num = central_difference_gradient(lambda x: mrp.penalized_loglik(x, *args), params)
    rel = np.linalg.norm(g - num) / np.linalg.norm(num)
    assert rel < 1e-5


def test_gradient_vanishes_at_the_fit(labels):
    users = simulate_users(1, labels, n=8000)
    f = mrp.fit(MrpSpec(), users, labels=labels)
    data = mrp.cell_data(users, "dummy", labels)
    params = np.r_[f.beta0, f.beta_male, f.a_age, f.a_region]
    g = mrp.penalized_gradient(params, data, f.sigma_age, f.sigma_region)
    assert np.max(np.abs(g)) < 1e-6


def test_shrinkage_grows_as_sigma_shrinks(labels):
    users = simulate_users(2, labels, n=4000)
    norms = []
    for s in (2.0, 0.5, 0.1, 0.01):
        f = mrp.fit(MrpSpec(sigma_age=s, sigma_region=s), users, labels=labels)
        norms.append(np.abs(np.r_[f.a_age, f.a_region]).max())
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_partial_pooling_lies_between_pooled_and_raw(labels):
    # one grouping only, balanced design: fitted group rates sit between the
    # pooled rate and each group's raw rate
    rng = np.random.default_rng(9)
    rows = []
    for j, age in enumerate(labels.age_groups):
        p = [0.2, 0.35, 0.5, 0.7][j]
        y = (rng.random(150) < p).astype(int)
        rows.append(pd.DataFrame({"gender": "female", "age_group": age, "region": "TR1", "dummy": y}))
    users = pd.concat(rows, ignore_index=True)
    f = mrp.fit(MrpSpec(gender_effect=False, sigma_region=0.0), users, labels=labels)
    pooled = users["dummy"].mean()
    raw = users.groupby("age_group", sort=False)["dummy"].mean()
    fitted = expit(f.beta0 + f.a_age)
    for j, age in enumerate(labels.age_groups):
        lo, hi = sorted((pooled, raw[age]))
        assert lo - 1e-12 <= fitted[j] <= hi + 1e-12
    assert 0 < f.sigma_age < 10


def test_small_sigma_limit_matches_complete_pooling(labels):
    users = simulate_users(3, labels, n=5000)
    zero = mrp.predict_cells(mrp.fit(MrpSpec(**NO_RANDOM), users, labels=labels))
    tiny = mrp.predict_cells(mrp.fit(MrpSpec(sigma_age=1e-6, sigma_region=1e-6), users, labels=labels))
    assert np.max(np.abs(zero - tiny)) < 1e-4


def test_saturated_model_reproduces_sample_mean(labels):
    users = simulate_users(4, labels, n=3000)
    data = mrp.cell_data(users, "dummy", labels)
    pred = mrp.saturated_predictions(data)
    ok = data.n > 0
    est = mrp.poststratify(np.where(ok, pred, 0.0), data.n.astype(float), "national", labels)
    assert abs(est - users["dummy"].mean()) < 1e-9


def test_uniform_census_gives_plain_average(labels):
    pred = np.random.default_rng(0).random(96)
    est = mrp.poststratify(pred, full_census(labels, 250), "national", labels)
    assert est == pytest.approx(pred.mean(), abs=1e-12)


def test_poststratify_small_example():
    assert mrp.poststratify([0.2, 0.6], [100, 300]) == pytest.approx(0.5, abs=1e-15)


def test_poststratify_regions_with_empty_population(labels):
    census = full_census(labels, 10)
    census.loc[census["region"] == "TR5", "population"] = 0
    pred = np.full(96, 0.25)
    out = mrp.poststratify(pred, census, "region", labels)
    assert len(out) == 12
    assert out["TR5"] is None
    assert all(v == pytest.approx(0.25) for k, v in out.items() if k != "TR5")


def test_predict_cells_examples(labels):
    f = MrpFit("binary", labels, beta0=0.0, beta_male=0.0, a_age=np.zeros(4), a_region=np.zeros(12),
               sigma_age=0.0, sigma_region=0.0, converged=True, iterations=0, final_deviance=0.0)
    np.testing.assert_allclose(mrp.predict_cells(f), 0.5)
    f.beta_male = math.log(3.0)
    pred = mrp.predict_cells(f)
    assert pred[labels.cell_index(["male"], ["<=18"], ["TR1"])[0]] == pytest.approx(0.75)
    assert pred[labels.cell_index(["female"], ["<=18"], ["TR1"])[0]] == pytest.approx(0.5)


def test_fit_is_deterministic_and_order_free(labels):
    users = simulate_users(6, labels, n=6000)
    a = mrp.fit(MrpSpec(), users, labels=labels).to_dict()
    b = mrp.fit(MrpSpec(), users.iloc[::-1].reset_index(drop=True), labels=labels).to_dict()
    assert a == b


def test_fit_round_trips_through_dict(labels):
    f = mrp.fit(MrpSpec(), simulate_users(7, labels, n=3000), labels=labels)
    assert MrpFit.from_dict(f.to_dict()).to_dict() == f.to_dict()


def test_separation_is_reported(labels):
    rng = np.random.default_rng(8)
    users = random_users(rng, labels, 2000)
    users["dummy"] = (users["gender"] == "male").astype(int)
    with pytest.raises(SeparationError, match="separated"):
        mrp.fit(MrpSpec(**NO_RANDOM), users, labels=labels)


def test_single_observed_region_fixes_its_sigma(labels):
    rng = np.random.default_rng(10)
    users = random_users(rng, labels, 3000)
    users["region"] = "TR7"
    users["dummy"] = (rng.random(3000) < 0.4).astype(int)
    f = mrp.fit(MrpSpec(), users, labels=labels)
    assert f.sigma_region == 0.0
    assert np.all(f.a_region == 0.0)
    assert any("region grouping" in w for w in f.warnings)


def test_outer_iteration_cap_reports_non_convergence(labels):
    f = mrp.fit(MrpSpec(outer_max_iter=1), simulate_users(11, labels, n=3000), labels=labels)
    assert not f.converged
    assert f.iterations == 1
    assert any("did not converge" in w for w in f.warnings)


def test_degenerate_outcome_rejected(labels):
    users = random_users(np.random.default_rng(0), labels, 100, outcome=1)
    with pytest.raises(ValueError, match="two distinct"):
        mrp.fit(MrpSpec(), users, labels=labels)
    users["dummy"] = 0.5
    with pytest.raises(ValueError, match="0/1"):
        mrp.fit(MrpSpec(), users, labels=labels)


def test_continuous_model_recovers_effects(labels):
    rng = np.random.default_rng(12)
    users = random_users(rng, labels, 40000)
    a_age = rng.normal(0, 0.05, 4)
    a_reg = rng.normal(0, 0.08, 12)
    codes = labels.cell_codes()[labels.cell_index(users.gender, users.age_group, users.region)]
    mean = 0.4 + 0.05 * (codes[:, 0] == 1) + a_age[codes[:, 1]] + a_reg[codes[:, 2]]
    users["score"] = np.clip(mean + rng.normal(0, 0.1, len(users)), 0, 1)
    f = mrp.fit(MrpSpec(outcome_kind="continuous"), users, "score", labels)
    assert f.extension is not None
    assert f.converged
    assert f.beta_male == pytest.approx(0.05, abs=0.01)
    assert f.sigma_residual == pytest.approx(0.1, abs=0.01)
    np.testing.assert_allclose(f.a_region - f.a_region.mean(), a_reg - a_reg.mean(), atol=0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_poststratified_estimate_is_a_probability(seed):
    labels = Labels()
    users = simulate_users(seed, labels, n=1500)
    f = mrp.fit(MrpSpec(), users, labels=labels)
    rng = np.random.default_rng(seed)
    census = full_census(labels, rng.integers(0, 1000, 96))
    census.loc[0, "population"] = 1
    post = mrp.estimate(f, collapse(users, "dummy", census, labels))
    assert 0.0 <= post.national <= 1.0
    cells = mrp.predict_cells(f)
    assert cells.min() - 1e-12 <= post.national <= cells.max() + 1e-12

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import full_census, random_users
from trace_mrp.frame import NoOverlapError, align, collapse, read_cells, write_cells
from trace_mrp.labels import Labels


def test_collapse_shape_and_counts(labels):
    rng = np.random.default_rng(1)
    users = random_users(rng, labels, 500, outcome=rng.integers(0, 2, 500))
    cells = collapse(users, "dummy", full_census(labels, 7), labels)
    assert len(cells) == 96
    assert cells["count"].sum() == 500
    assert (cells["census_population"] == 7).all()
    empty = cells["count"] == 0
    assert cells.loc[empty, "mean"].isna().all()
    assert cells.loc[~empty, "mean"].between(0, 1).all()


def test_collapse_small_example(labels):
    users = pd.DataFrame({
        "gender": ["male", "male", "female"],
        "age_group": ["30-39", "30-39", "<=18"],
        "region": ["TR1", "TR1", "TRC"],
        "dummy": [1, 0, 1],
    })
    cells = collapse(users, "dummy", labels=labels)
    row = cells[(cells.gender == "male") & (cells.age_group == "30-39") & (cells.region == "TR1")].iloc[0]
    assert (row["mean"], row["count"]) == (0.5, 2)
    assert cells["census_population"].sum() == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2**32 - 1))
def test_weighted_cell_means_recover_overall_mean(n, seed):
    labels = Labels()
    rng = np.random.default_rng(seed)
    users = random_users(rng, labels, n, outcome=rng.random(n))
    cells = collapse(users, "dummy", labels=labels)
    ok = cells["count"] > 0
    weighted = (cells.loc[ok, "mean"] * cells.loc[ok, "count"]).sum() / cells["count"].sum()
    assert abs(weighted - users["dummy"].mean()) < 1e-12

    shuffled = users.sample(frac=1.0, random_state=seed % 1000).reset_index(drop=True)
    pd.testing.assert_frame_equal(collapse(shuffled, "dummy", labels=labels), cells, check_exact=True)


def test_align_full_partial_and_empty(labels):
    rng = np.random.default_rng(3)
    a = collapse(random_users(rng, labels, 5000, rng.random(5000)), "dummy", labels=labels)
    b = collapse(random_users(rng, labels, 5000, rng.random(5000)), "dummy", labels=labels)
    assert len(align(a, b).keys) == 96

    b.loc[:5, "mean"] = np.nan
    res = align(a, b)
    assert len(res.keys) == 90
    assert res.excluded == labels.cells()[:6]

    b["mean"] = np.nan
    with pytest.raises(NoOverlapError):
        align(a, b)


def test_cells_round_trip(tmp_path, labels):
    rng = np.random.default_rng(4)
    cells = collapse(random_users(rng, labels, 60, rng.random(60)), "dummy", full_census(labels), labels)
    write_cells(cells, tmp_path / "cells.csv")
    back = read_cells(tmp_path / "cells.csv")
    assert list(back.columns) == list(cells.columns)
    np.testing.assert_array_equal(back["count"], cells["count"])
    np.testing.assert_allclose(back["mean"], cells["mean"], rtol=0, atol=0, equal_nan=True)

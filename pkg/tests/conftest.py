import datetime as dt
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from trace_mrp.labels import Labels

FIXTURE_DIR = Path(__file__).parent / "data" / "fixture"
REF_DATE = dt.date(2022, 6, 1)


@pytest.fixture
def labels():
    return Labels()


@pytest.fixture
def fixture_dir():
    return FIXTURE_DIR


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def full_census(labels: Labels, population=1000) -> pd.DataFrame:
    keys = labels.cells()
    pop = np.broadcast_to(np.asarray(population), (len(keys),))
    return pd.DataFrame({
        "gender": [k[0] for k in keys],
        "age_group": [k[1] for k in keys],
        "region": [k[2] for k in keys],
        "population": np.asarray(pop, dtype=np.int64),
    })


def random_users(rng, labels: Labels, n: int, outcome=None) -> pd.DataFrame:
    cells = rng.integers(0, labels.n_cells, size=n)
    codes = labels.cell_codes()[cells]
    df = pd.DataFrame({
        "user_id": [f"u{i:06d}" for i in range(n)],
        "gender": np.array(labels.genders, dtype=object)[codes[:, 0]],
        "age_group": np.array(labels.age_groups, dtype=object)[codes[:, 1]],
        "region": np.array(labels.regions, dtype=object)[codes[:, 2]],
    })
    if outcome is not None:
        df["dummy"] = outcome
    return df


# --- acceptance summary -----------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one criterion outcome; the terminal summary prints them in order."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str):
        results[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

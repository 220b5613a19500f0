import datetime as dt

import numpy as np
import pytest

from conftest import write_text
from trace_mrp.config import ConfigError, load_config, parse_kv
from trace_mrp.labels import Labels


def test_canonical_cell_order(labels):
    cells = labels.cells()
    assert len(cells) == 96
    assert cells[0] == ("female", "<=18", "TR1")
    assert cells[1] == ("female", "<=18", "TR2")
    assert cells[12] == ("female", "19-29", "TR1")
    assert cells[48] == ("male", "<=18", "TR1")
    idx = labels.cell_index([c[0] for c in cells], [c[1] for c in cells], [c[2] for c in cells])
    np.testing.assert_array_equal(idx, np.arange(96))
    np.testing.assert_array_equal(labels.cell_codes()[idx], labels.cell_codes())


def test_label_validation():
    with pytest.raises(ValueError, match="exactly 12"):
        Labels(regions=("A", "B"))
    with pytest.raises(ValueError, match="duplicate"):
        Labels(genders=("x", "x"))
    with pytest.raises(KeyError, match="'TR0'"):
        Labels().code("region", ["TR1", "TR0"])


def test_male_index():
    assert Labels().male_index == 1
    assert Labels(genders=("m", "f")).male_index == 1
    assert Labels(genders=("male", "female")).male_index == 0


def test_parse_kv():
    assert parse_kv("# c\n a = 1 \n\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv("nonsense")


def test_load_config_resolves_paths_and_overrides(tmp_path):
    cfg_path = write_text(tmp_path / "run.cfg",
                          "tweets = in/t.csv\nreference_date = 2022-06-01\nthreshold = 0.6\n"
                          "survey_metrics = fasting, praying\nnote = hello\n")
    cfg = load_config(cfg_path, threshold=0.7, output_dir=tmp_path / "out")
    assert cfg.tweets == tmp_path / "in" / "t.csv"
    assert cfg.reference_date == dt.date(2022, 6, 1)
    assert cfg.threshold == 0.7
    assert cfg.survey_metrics == ("fasting", "praying")
    assert cfg.extra == {"note": "hello"}


def test_config_digest_is_stable():
    a = load_config(threshold=0.5, reference_date="2022-06-01")
    b = load_config(reference_date="2022-06-01", threshold=0.5)
    assert a.digest() == b.digest()
    assert a.digest() != load_config(threshold=0.6).digest()


@pytest.mark.parametrize("kwargs", [{"threshold": 1.5}, {"outcome": "mean"}, {"window_months": 0}, {"bogus": 1}])
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        load_config(**kwargs)

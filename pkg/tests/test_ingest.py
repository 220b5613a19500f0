import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REF_DATE, write_text
from trace_mrp import ingest
from trace_mrp.ingest import IngestError, RejectedRowsError, SurveyResponse

TWEET_HEADER = "user_id,kind,timestamp,prob\n"


def test_parse_tweet_row(tmp_path):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER + "u1,original,2022-06-01T00:00:00Z,0.70\n")
    df = ingest.parse_tweets(p, REF_DATE)
    rec = ingest.tweet_records(df)[0]
    assert rec.user_id == "u1"
    assert rec.kind == "original"
    assert rec.timestamp == dt.datetime(2022, 6, 1, tzinfo=dt.timezone.utc)
    assert rec.prob == 0.70
    assert rec.in_window


def test_prob_out_of_range_rejected(tmp_path):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER
                   + "u1,original,2022-01-01T00:00:00Z,1.2\n"
                   + "u2,reply,2022-01-01T00:00:00Z,0.3\n"
                   + "u3,quote,2022-01-01T00:00:00Z,-0.1\n")
    with pytest.raises(RejectedRowsError) as err:
        ingest.parse_tweets(p, REF_DATE)
    assert err.value.rejected == 2
    assert err.value.accepted == 1
    assert err.value.first_line == 2

    df = ingest.parse_tweets(p, REF_DATE, on_invalid="drop")
    assert list(df["user_id"]) == ["u2"]
    assert df.attrs["rejected"] + df.attrs["accepted"] == 3


def test_unknown_kind(tmp_path):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER + "u1,like,2022-01-01T00:00:00Z,0.3\n")
    with pytest.raises(IngestError, match="unknown engagement kind 'like'") as err:
        ingest.parse_tweets(p, REF_DATE)
    assert err.value.line == 2 and err.value.field == "kind"


@pytest.mark.parametrize(
    "row, field",
    [
        ("u1,original,yesterday,0.3", "timestamp"),
        ("u1,original,2022-01-01T00:00:00Z,abc", "prob"),
        ("u1,original,2022-01-01T00:00:00Z,", "prob"),
        ("u1,original,2023-01-01T00:00:00Z,0.3", "timestamp"),
    ],
)
def test_malformed_rows_name_line_and_field(tmp_path, row, field):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER + "u0,reply,2022-01-01T00:00:00Z,0.1\n" + row + "\n")
    with pytest.raises(IngestError) as err:
        ingest.parse_tweets(p, REF_DATE)
    assert err.value.line == 3
    assert err.value.field == field
    assert "line 3" in str(err.value)


def test_extra_field_reports_line(tmp_path):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER + "u0,reply,2022-01-01T00:00:00Z,0.1\nu1,reply,2022-01-01T00:00:00Z,0.1,9\n")
    with pytest.raises(IngestError) as err:
        ingest.parse_tweets(p, REF_DATE)
    assert err.value.line == 3


def test_bad_header(tmp_path):
    p = write_text(tmp_path / "t.csv", "user,kind,timestamp,prob\n")
    with pytest.raises(IngestError, match="header"):
        ingest.parse_tweets(p, REF_DATE)


def test_out_of_window_flagged_not_dropped(tmp_path):
    p = write_text(tmp_path / "t.csv", TWEET_HEADER
                   + "u1,original,2020-05-01T00:00:00Z,0.9\n"     # 25 months old
                   + "u1,original,2020-06-01T00:00:00Z,0.9\n"     # exactly at the edge
                   + "u1,original,2020-05-31T23:59:59Z,0.9\n")
    df = ingest.parse_tweets(p, REF_DATE)
    assert list(df["in_window"]) == [False, True, False]


def test_parse_users(tmp_path, labels):
    header = "user_id,gender,age_group,region\n"
    df = ingest.parse_users(write_text(tmp_path / "u.csv", header + "u1,male,30-39,TR1\n"), labels)
    assert df.to_dict("records") == [{"user_id": "u1", "gender": "male", "age_group": "30-39", "region": "TR1"}]

    with pytest.raises(IngestError, match="'other'"):
        ingest.parse_users(write_text(tmp_path / "u2.csv", header + "u2,other,30-39,TR1\n"), labels)

    df = ingest.parse_users(
        write_text(tmp_path / "u3.csv", header + "u1,male,30-39,TR1\nu2,female,>=40,TR2\nu1,female,19-29,TR3\n"),
        labels,
    )
    assert len(df) == 2
    assert df.attrs["duplicates"] == 1
    assert df.set_index("user_id").loc["u1", "region"] == "TR3"  # last wins


def _census_text(labels, rows=None):
    lines = ["gender,age_group,region,population"]
    for g, a, r in rows or labels.cells():
        lines.append(f"{g},{a},{r},100")
    return "\n".join(lines) + "\n"


def test_parse_census(tmp_path, labels):
    df = ingest.parse_census(write_text(tmp_path / "c.csv", _census_text(labels)), labels)
    assert len(df) == 96

    dup = _census_text(labels) + "female,<=18,TR1,5\n"
    with pytest.raises(IngestError, match="duplicate"):
        ingest.parse_census(write_text(tmp_path / "d.csv", dup), labels)

    neg = "gender,age_group,region,population\nfemale,<=18,TR1,-5\n"
    with pytest.raises(IngestError, match="negative"):
        ingest.parse_census(write_text(tmp_path / "n.csv", neg), labels)

    partial = ingest.parse_census(write_text(tmp_path / "p.csv", _census_text(labels, labels.cells()[:10])), labels)
    assert len(partial) == 10


def test_parse_survey_metrics(tmp_path, labels):
    text = ("respondent_id,gender,age_group,region,religiosity_level,fasting,praying\n"
            "r1,male,30-39,TR1,4,1,0.5\n"
            "r2,female,>=40,TR2,0,,0\n")
    df = ingest.parse_survey(write_text(tmp_path / "s.csv", text), labels, ("fasting", "praying"))
    assert list(df["religiosity_level"]) == [4, 0]
    assert np.isnan(df["fasting"].iat[1])

    with pytest.raises(IngestError, match="undeclared"):
        ingest.parse_survey(tmp_path / "s.csv", labels, ("fasting",))
    bad = text.replace("r1,male,30-39,TR1,4,1,0.5", "r1,male,30-39,TR1,5,1,0.5")
    with pytest.raises(IngestError, match="religiosity_level"):
        ingest.parse_survey(write_text(tmp_path / "b.csv", bad), labels, ("fasting", "praying"))
    bad = text.replace("r1,male,30-39,TR1,4,1,0.5", "r1,male,30-39,TR1,4,1.5,0.5")
    with pytest.raises(IngestError, match="fasting"):
        ingest.parse_survey(write_text(tmp_path / "b2.csv", bad), labels, ("fasting", "praying"))


@pytest.mark.parametrize("level, dummy, score", [(4, 1, 1.0), (3, 1, 0.75), (2, 0, 0.5), (1, 0, 0.25), (0, 0, 0.0)])
def test_survey_recoding(level, dummy, score):
    r = SurveyResponse("r", "male", "30-39", "TR1", level)
    assert ingest.survey_dummy(r) == dummy
    assert ingest.survey_score(r) == score


@given(st.lists(st.integers(0, 4), min_size=1))
def test_recodings_consistent(levels):
    lv = np.array(levels)
    d = ingest.survey_dummy(lv)
    s = ingest.survey_score(lv)
    assert np.all(s[d == 1] >= 0.75)
    assert 0 <= d.mean() <= 1 and 0 <= s.mean() <= 1


row = st.tuples(
    st.text(alphabet="abcdefghij0123456789", min_size=1, max_size=8),
    st.sampled_from(ingest.KINDS),
    st.datetimes(min_value=dt.datetime(2019, 1, 1), max_value=dt.datetime(2022, 5, 31, 23, 59, 59)),
    st.floats(0.0, 1.0, allow_nan=False),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(row, min_size=1, max_size=30))
def test_tweets_round_trip(tmp_path_factory, rows):
    tmp = tmp_path_factory.mktemp("rt")
    df = pd.DataFrame(rows, columns=["user_id", "kind", "timestamp", "prob"])
    df["timestamp"] = pd.to_datetime(df["timestamp"]).dt.floor("s").dt.tz_localize("UTC")
    first = tmp / "a.csv"
    ingest.write_tweets(df, first)
    parsed = ingest.parse_tweets(first, REF_DATE)
    second = tmp / "b.csv"
    ingest.write_tweets(parsed, second)
    assert first.read_bytes() == second.read_bytes()
    assert parsed["prob"].tolist() == df["prob"].tolist()
    assert parsed.attrs["accepted"] + parsed.attrs["rejected"] == len(rows)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.5, 1.5, allow_nan=False), min_size=1, max_size=40))
def test_rejected_plus_accepted_is_row_count(tmp_path_factory, probs):
    tmp = tmp_path_factory.mktemp("rj")
    lines = [f"u{i},reply,2022-01-01T00:00:00Z,{p!r}" for i, p in enumerate(probs)]
    p = write_text(tmp / "t.csv", TWEET_HEADER + "\n".join(lines) + "\n")
    df = ingest.parse_tweets(p, REF_DATE, on_invalid="drop")
    assert df.attrs["accepted"] + df.attrs["rejected"] == len(probs)
    assert len(df) == df.attrs["accepted"]

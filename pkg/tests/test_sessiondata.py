import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import small_dataset
from rmtl.backbones import FeatureSchema
from rmtl.errors import ParseError, ValidationError
from rmtl.sessiondata import (
    InteractionRow,
    Standardizer,
    SyntheticConfig,
    binarize_play_duration,
    csv_header,
    format_schema,
    gen_synthetic,
    gini,
    gini_gain,
    gini_rank_features,
    load_sessions,
    parse_schema,
    save_sessions,
    split_by_time,
    split_counts,
)

SCHEMA = FeatureSchema(categorical=(("user_id", 10), ("item_id", 10), ("color", 3)), numerical=("price",))


def write_csv(path, rows):
    lines = [",".join(csv_header(SCHEMA))] + [",".join(str(x) for x in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_header_only_file_is_empty_dataset(tmp_path):
    ds = load_sessions(write_csv(tmp_path / "e.csv", []), SCHEMA)
    assert ds.n_sessions == 0 and ds.n_rows == 0


def test_three_rows_two_sessions(tmp_path):
    rows = [("b", 20, 1, 2, 0, 1.5, 1, 0), ("a", 10, 3, 4, 2, 0.5, 0, 0), ("b", 15, 1, 5, 1, 2.5, 1, 1)]
    ds = load_sessions(write_csv(tmp_path / "d.csv", rows), SCHEMA)
    assert ds.n_sessions == 2 and ds.n_rows == 3
    a, b = ds.sessions
    assert a.session_id == "a" and b.session_id == "b"
    assert list(b.timestamps) == [15, 20]
    assert list(b.item_ids) == [5, 2]
    assert b.labels.tolist() == [[1, 1], [1, 0]]
    assert b.feats.cat.tolist() == [[1, 5, 1], [1, 2, 0]]


def test_convert_without_click_is_rejected(tmp_path):
    with pytest.raises(ValidationError, match="y_convert=1 with y_click=0"):
        load_sessions(write_csv(tmp_path / "x.csv", [("a", 1, 0, 0, 0, 0.0, 0, 1)]), SCHEMA)
    with pytest.raises(ValidationError):
        InteractionRow("a", 1, 0, 0, (), (), 0, 1)


def test_load_errors_name_offending_lines(tmp_path):
    with pytest.raises(ValidationError, match="line 3"):
        load_sessions(write_csv(tmp_path / "v.csv", [("a", 1, 0, 0, 0, 0.0, 0, 0), ("a", 2, 0, 10, 0, 0.0, 0, 0)]),
                      SCHEMA)
    with pytest.raises(ParseError, match="line 2"):
        load_sessions(write_csv(tmp_path / "p.csv", [("a", "x", 0, 0, 0, 0.0, 0, 0)]), SCHEMA)
    with pytest.raises(ValidationError, match="duplicate timestamp"):
        load_sessions(write_csv(tmp_path / "t.csv", [("a", 1, 0, 0, 0, 0.0, 0, 0), ("a", 1, 0, 1, 0, 0.0, 0, 0)]),
                      SCHEMA)
    bad = tmp_path / "h.csv"
    bad.write_text("session_id,foo\n", encoding="utf-8")
    with pytest.raises(ParseError, match="header"):
        load_sessions(bad, SCHEMA)


def test_csv_round_trip_is_exact(tmp_path):
    ds, _ = small_dataset(30)
    save_sessions(tmp_path / "s.csv", ds)
    back = load_sessions(tmp_path / "s.csv", ds.schema)
    assert back.n_sessions == ds.n_sessions
    for x, y in zip(ds.sessions, back.sessions):
        assert x.session_id == y.session_id
        assert np.array_equal(x.feats.cat, y.feats.cat)
        assert x.feats.num.tobytes() == y.feats.num.tobytes()
        assert np.array_equal(x.labels, y.labels)


def test_schema_text_round_trip_and_errors():
    assert parse_schema(format_schema(SCHEMA)) == SCHEMA
    with pytest.raises(ParseError, match="line 2"):
        parse_schema("version=1\ncolor=ordinal\n")
    with pytest.raises(ParseError):
        parse_schema("version=9\n")
    with pytest.raises(ParseError):
        parse_schema("user_id=numerical\n")


@pytest.mark.parametrize("n,expected", [(10, [6, 2, 2]), (7, [4, 1, 2]), (5, [3, 1, 1]), (2000, [1200, 400, 400])])
def test_cumulative_floor_split(n, expected):
    assert split_counts(n) == expected


@given(st.integers(0, 10_000), st.lists(st.integers(1, 9), min_size=1, max_size=5))
@settings(max_examples=200, deadline=None)
def test_split_counts_partition(n, ratios):
    counts = split_counts(n, ratios)
    assert sum(counts) == n and min(counts) >= 0


def test_split_by_time_is_session_atomic_and_ordered():
    ds, _ = small_dataset(10)
    tr, va, te = split_by_time(ds)
    assert (tr.n_sessions, va.n_sessions, te.n_sessions) == (6, 2, 2)
    starts = [int(s.timestamps[0]) for part in (tr, va, te) for s in part.sessions]
    assert starts == sorted(starts)
    assert tr.n_rows + va.n_rows + te.n_rows == ds.n_rows
    with pytest.raises(ValidationError):
        split_by_time(type(ds)(ds.schema, ds.sessions[:1]))


def test_standardizer_uses_train_statistics():
    ds, _ = small_dataset(40)
    tr, va, _ = split_by_time(ds)
    std = Standardizer.fit(tr)
    z = std.apply(tr).features().num
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1.0)
    raw = va.features().num
    assert np.allclose(std.apply(va).features().num, (raw - tr.features().num.mean(0)) / tr.features().num.std(0))


def test_gini_examples():
    assert gini([1, 1, 0, 0]) == 0.5
    assert gini_gain(["a", "a", "b", "b"], [1, 1, 0, 0]) == 0.5
    assert gini_gain(["a", "a", "a", "b"], [1, 1, 0, 0]) == pytest.approx(1 / 6, abs=1e-15)
    assert gini_gain(["a"] * 4, [1, 0, 1, 0]) == 0.0


def test_gini_ranking_orders_by_gain_then_name(tmp_path):
    # user ids pair up rows of opposite label (no gain); item and color both separate labels
    rows = [(f"s{i}", i, (i // 2) % 10, i % 10, i % 2, 0.0, i % 2, 0) for i in range(40)]
    ds = load_sessions(write_csv(tmp_path / "g.csv", rows), SCHEMA)
    ranking = gini_rank_features(ds, "y_click")
    assert [n for n, _ in ranking] == ["color", "item_id", "user_id"]
    assert [g for _, g in ranking] == pytest.approx([0.5, 0.5, 0.0], abs=1e-15)
    with pytest.raises(ValidationError):
        gini_rank_features(ds, "y_other")


@pytest.mark.parametrize("frac,expected", [(0.2, (0, 0)), (0.5, (1, 0)), (0.9, (1, 1)), (0.3, (0, 0)), (0.7, (1, 0))])
def test_play_duration_binarization(frac, expected):
    assert binarize_play_duration(frac) == expected


def test_play_duration_rejects_negative():
    with pytest.raises(ValidationError):
        binarize_play_duration(-0.1)


def test_synthetic_is_deterministic_and_consistent():
    a, ta = small_dataset(50, seed=4)
    b, tb = small_dataset(50, seed=4)
    assert np.array_equal(a.labels(), b.labels())
    assert np.array_equal(ta.p_click, tb.p_click)
    y = a.labels()
    assert np.sum((y[:, 1] == 1) & (y[:, 0] == 0)) == 0
    assert a.n_rows == len(ta.p_click)


def test_synthetic_ctr_matches_model_mean():
    ds, truth = gen_synthetic(SyntheticConfig(n_sessions=20_000, seed=11))
    y = ds.labels()[:, 0]
    assert len(y) >= 100_000
    mean = truth.p_click.mean()
    sigma = math.sqrt(np.sum(truth.p_click * (1 - truth.p_click))) / len(y)
    assert abs(y.mean() - mean) <= 3 * sigma
    cvr_rows = y == 1
    conv = ds.labels()[cvr_rows, 1]
    pv = truth.p_convert_given_click[cvr_rows]
    assert abs(conv.mean() - pv.mean()) <= 3 * math.sqrt(np.sum(pv * (1 - pv))) / len(pv)


def test_synthetic_tasks_are_correlated():
    ds, truth = gen_synthetic(SyntheticConfig(n_sessions=3000, seed=2))
    pc, pv = truth.p_click, truth.p_convert_given_click
    assert np.corrcoef(np.log(pc / (1 - pc)), np.log(pv / (1 - pv)))[0, 1] > 0.2

import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ultrlab.data import (
    Dataset,
    LabelRangeError,
    LetorParseError,
    Query,
    format_letor,
    generate_synthetic,
    normalize_features,
    parse_letor,
    split_dataset,
    write_letor,
)


def _one_feature(values, split="train"):
    qs = tuple(Query(str(i), (f"d{i}",), np.array([[v]]), np.array([0])) for i, v in enumerate(values))
    return Dataset(qs, 1, split)


def test_parse_single_line():
    ds = parse_letor("2 qid:10 1:0.5 3:1.0 # d7\n")
    assert len(ds) == 1 and ds.feature_dim == 3
    q = ds[0]
    assert q.query_id == "10" and q.doc_ids == ("d7",)
    assert q.labels.tolist() == [2]
    assert q.features[0].tolist() == [0.5, 0.0, 1.0]


def test_shared_qid_keeps_file_order():
    ds = parse_letor(io.StringIO("1 qid:10 1:1 # a\n0 qid:10 1:2 # b\n3 qid:11 2:1\n"))
    assert [q.query_id for q in ds] == ["10", "11"]
    assert ds[0].doc_ids == ("a", "b")
    assert ds[0].features[:, 0].tolist() == [1.0, 2.0]
    assert ds[1].doc_ids == ("11-0",)


def test_label_out_of_range():
    with pytest.raises(LabelRangeError):
        parse_letor("7 qid:1 1:0.1")


@pytest.mark.parametrize(
    "text, line",
    [("1 qid:1 1:0.1\n1 1:0.2\n", 2), ("1 qid:1 x:0.1", 1), ("1 qid:1 0:3", 1), ("a qid:1 1:1", 1), ("\n\n1 qid:1 1:zz", 3)],
)
def test_malformed_lines_report_line_number(text, line):
    with pytest.raises(LetorParseError) as exc:
        parse_letor(text)
    assert exc.value.line_no == line
    assert f"line {line}" in str(exc.value)


def test_empty_stream():
    with pytest.raises(LetorParseError):
        parse_letor("   \n# only a comment\n")


def test_whitespace_runs_are_separators():
    ds = parse_letor("1   qid:4    2:3.5\t1:1\n")
    assert ds[0].features[0].tolist() == [1.0, 3.5]


def test_query_invariants():
    with pytest.raises(ValueError):
        Query("q", ("a", "a"), np.zeros((2, 1)), np.array([0, 1]))
    with pytest.raises(ValueError):
        Query("q", (), np.zeros((0, 1)), np.array([], dtype=int))
    with pytest.raises(ValueError):
        Dataset((Query("q", ("a",), np.zeros((1, 2)), [0]),), 3)
    q = Query("q", ("a",), np.zeros((1, 1)), [0])
    with pytest.raises(ValueError):
        Dataset((q, q), 1)


def test_synthetic_is_deterministic():
    a = generate_synthetic(1, 5, 2, 7)
    b = generate_synthetic(1, 5, 2, 7)
    assert a == b
    assert generate_synthetic(1, 5, 2, 8) != a


def test_synthetic_label_histogram():
    ds = generate_synthetic(1000, 25, 20, 1)
    labels = np.concatenate([q.labels for q in ds])
    frac = np.bincount(labels, minlength=5) / len(labels)
    assert np.all(np.abs(frac - 0.2) <= 0.02)


@pytest.mark.parametrize("args", [(0, 5, 2, 1), (3, 0, 2, 1), (3, 5, 0, 1)])
def test_synthetic_rejects_empty_sizes(args):
    with pytest.raises(ValueError):
        generate_synthetic(*args)


def test_minmax_examples():
    train = _one_feature([0.0, 5.0, 10.0])
    test = _one_feature([12.0], "test")
    tr, te = normalize_features(train, test)
    assert [q.features[0, 0] for q in tr] == [0.0, 0.5, 1.0]
    assert te[0].features[0, 0] == pytest.approx(1.2)


def test_constant_column_maps_to_zero():
    train = _one_feature([3.0, 3.0])
    test = _one_feature([7.0], "test")
    tr, te = normalize_features(train, test)
    assert all(q.features[0, 0] == 0.0 for q in tr)
    assert te[0].features[0, 0] == 0.0


def test_normalize_dimension_mismatch():
    with pytest.raises(ValueError, match="feature_dim"):
        normalize_features(generate_synthetic(2, 3, 2, 0), generate_synthetic(2, 3, 3, 0))


def test_normalize_idempotent_on_train():
    (tr,) = normalize_features(generate_synthetic(20, 6, 4, 3))
    (again,) = normalize_features(tr)
    for a, b in zip(tr, again):
        np.testing.assert_allclose(a.features, b.features, atol=1e-12)


def test_split_sizes_and_tags():
    parts = split_dataset(generate_synthetic(50, 3, 2, 0))
    assert [len(p) for p in parts] == [40, 5, 5]
    assert [p.split_tag for p in parts] == ["train", "valid", "test"]


def test_write_then_parse(tmp_path):
    ds = generate_synthetic(4, 3, 5, 9)
    write_letor(ds, tmp_path / "x.txt")
    assert parse_letor(tmp_path / "x.txt") == ds


labels = st.integers(0, 4)
values = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def datasets(draw):
    dim = draw(st.integers(1, 4))
    n_q = draw(st.integers(1, 4))
    queries = []
    for qi in range(n_q):
        n = draw(st.integers(1, 4))
        x = np.array(draw(st.lists(st.lists(values, min_size=dim, max_size=dim), min_size=n, max_size=n)))
        y = np.array(draw(st.lists(labels, min_size=n, max_size=n)))
        queries.append(Query(f"q{qi}", tuple(f"q{qi}-d{i}" for i in range(n)), x, y))
    return Dataset(tuple(queries), dim)


@given(datasets())
def test_round_trip_property(ds):
    assert parse_letor(format_letor(ds)) == ds

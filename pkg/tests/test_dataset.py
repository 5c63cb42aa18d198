import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from owlsnm.dataset import (
    Dataset,
    ParseError,
    RangeError,
    SparseExample,
    make_synthetic,
    parse_xc,
    sample_positive,
    synthetic_prototypes,
    write_xc,
)


def write(tmp_path, text, name="d.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_example(tmp_path):
    ds = parse_xc(write(tmp_path, "2 10 5\n1,4 0:0.5 7:1.25\n3\n"))
    ex = ds[0]
    assert ex.labels.tolist() == [1, 4]
    assert ex.features == [(0, 0.5), (7, 1.25)]
    assert ds[1].features == [] and ds[1].labels.tolist() == [3]
    assert (ds.n_examples, ds.n_features, ds.n_labels) == (2, 10, 5)


@pytest.mark.parametrize(
    "body, err, line",
    [
        ("1 10 5\n 0:0.5\n", ParseError, 2),  # empty label field
        ("1 10 5\n0:0.5\n", ParseError, 2),
        ("1 10 5\n5 0:0.5\n", RangeError, 2),
        ("1 10 5\n1 10:0.5\n", RangeError, 2),
        ("1 10 5\n1 3:0.5 2:1\n", ParseError, 2),
        ("1 10 5\n1 3:0.5 3:1\n", ParseError, 2),
        ("1 10 5\n1 3:abc\n", ParseError, 2),
        ("1 10 5\n1 3:nan\n", ParseError, 2),
        ("1 10 5\n1 3\n", ParseError, 2),
        ("2 10 5\n1 3:1\n", ParseError, None),  # fewer rows than declared
        ("1 10 5\n1 3:1\n2 4:1\n", ParseError, 3),
        ("1 10\n", ParseError, 1),
        ("", ParseError, 1),
    ],
)
def test_parse_errors(tmp_path, body, err, line):
    with pytest.raises(err) as exc:
        parse_xc(write(tmp_path, body))
    assert exc.value.line == line


def test_blank_lines_are_skipped(tmp_path):
    ds = parse_xc(write(tmp_path, "2 4 3\n0 1:1\n\n2 0:2\n"))
    assert ds.n_examples == 2


example_st = st.builds(
    lambda feats, labels: (sorted(feats.items()), sorted(labels)),
    st.dictionaries(st.integers(0, 19), st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False), max_size=6),
    st.sets(st.integers(0, 6), min_size=1, max_size=3),
)


@given(st.lists(example_st, max_size=12))
def test_round_trip(tmp_path_factory, rows):
    exs = [SparseExample(np.array([i for i, _ in f], dtype=np.int64), np.array([v for _, v in f], dtype=float),
                         np.array(lab, dtype=np.int64)) for f, lab in rows]
    ds = Dataset.from_examples(exs, 20, 7)
    path = tmp_path_factory.mktemp("rt") / "d.txt"
    write_xc(ds, path)
    back = parse_xc(path)
    assert back.n_examples == ds.n_examples and back.n_labels == 7 and back.n_features == 20
    for a, b in zip(ds, back):
        assert a.features == b.features
        assert a.labels.tolist() == b.labels.tolist()
    write_xc(back, path.with_suffix(".2"))
    assert path.read_text() == path.with_suffix(".2").read_text()


def test_parser_streams_a_million_lines(tmp_path):
    n = 10**6
    p = tmp_path / "big.txt"
    with open(p, "w") as fh:
        fh.write(f"{n} 100 50\n")
        fh.writelines(f"{i % 50} {i % 97}:0.5 99:1.25\n" for i in range(n))
    tracemalloc.start()
    try:
        ds = parse_xc(p)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    X = ds.X
    out = X.data.nbytes + X.indices.nbytes + X.indptr.nbytes + ds.label_ids.nbytes + ds.label_indptr.nbytes
    assert ds.n_examples == n and X.nnz == 2 * n
    # holding the lines themselves would add well over 60 MB on top of the output
    assert peak < 2 * out


def test_sample_positive(rng):
    single = SparseExample(np.array([0]), np.array([1.0]), np.array([3]))
    assert sample_positive(single, rng) == 3
    pair = SparseExample(np.array([0]), np.array([1.0]), np.array([1, 2]))
    n = 10**5
    draws = np.array([sample_positive(pair, rng) for _ in range(n)])
    assert set(draws.tolist()) <= {1, 2}
    assert abs(np.mean(draws == 1) - 0.5) <= 3 * math.sqrt(0.25 / n)


def test_vectorised_positive_sampling_is_uniform(rng):
    ds = Dataset.from_examples(
        [SparseExample(np.array([0]), np.array([1.0]), np.array([0, 2, 5]))] * 30000, 1, 6
    )
    pos = ds.sample_positives(rng)
    assert set(pos.tolist()) == {0, 2, 5}
    assert chisquare(np.bincount(pos, minlength=6)[[0, 2, 5]]).pvalue > 1e-4


def test_synthetic_shapes_and_determinism():
    tr, te = make_synthetic(20, 30, 500, 0.3, seed=4)
    assert (tr.n_examples, te.n_examples) == (400, 100)
    assert tr.n_features == 30 and tr.n_labels == 20
    tr2, te2 = make_synthetic(20, 30, 500, 0.3, seed=4)
    assert (tr.X != tr2.X).nnz == 0 and np.array_equal(te.label_ids, te2.label_ids)
    tr3, _ = make_synthetic(20, 30, 500, 0.3, seed=5)
    assert not np.array_equal(tr.label_ids, tr3.label_ids)
    # every row has at most d/10 nonzeros and unit norm
    assert np.diff(tr.X.indptr).max() <= 3
    np.testing.assert_allclose(np.sqrt(tr.X.multiply(tr.X).sum(axis=1)).A1, 1.0)


def test_noise_free_examples_are_prototypes():
    K, d = 40, 50
    tr, te = make_synthetic(K, d, 1000, 0.0, seed=2)
    P = synthetic_prototypes(K, d, seed=2)
    S = te.X @ P.T
    assert np.array_equal(np.argmax(S, axis=1), te.label_ids)


def test_label_marginals_uniform():
    tr, _ = make_synthetic(25, 20, 20000, 0.3, seed=0)
    assert chisquare(np.bincount(tr.label_ids, minlength=25)).pvalue > 1e-4


def test_example_validation():
    with pytest.raises(ValueError):
        SparseExample(np.array([2, 1]), np.array([1.0, 1.0]), np.array([0]))
    with pytest.raises(ValueError):
        SparseExample(np.array([1]), np.array([1.0]), np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        SparseExample(np.array([1]), np.array([np.inf]), np.array([0]))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsemarkov.data import Dataset, TASKS, folds, generate, load_csv, write_csv
from sparsemarkov.errors import DataError, LikelihoodDomainError
from sparsemarkov.likelihoods import BernoulliLogit, Gaussian
from sparsemarkov.metrics import error_rate, evaluate, nlpd, rmse, summarize

from oracles import quad_expectation


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_small_file(tmp_path):
    data = load_csv(write(tmp_path, "x,y\n0,1\n1,0\n2,1\n"))
    assert data.N == 3
    np.testing.assert_array_equal(data.y, [1, 0, 1])


def test_unsorted_input_is_sorted_with_invertible_permutation(tmp_path):
    data = load_csv(write(tmp_path, "x,y\n2,20\n0,0\n1,10\n"))
    np.testing.assert_array_equal(data.x, [0, 1, 2])
    x, y, _ = data.unsorted()
    np.testing.assert_array_equal(x, [2, 0, 1])
    np.testing.assert_array_equal(y, [20, 0, 10])


def test_nan_row_names_line(tmp_path):
    with pytest.raises(DataError) as info:
        load_csv(write(tmp_path, "x,y\n0,1\nnan,0\n"))
    assert info.value.line == 3


@pytest.mark.parametrize("text,line", [("x,y\n0,1\n1\n", 3), ("x,y\n0,a\n", 2), ("a,b\n0,1\n", 1), ("", 1)])
def test_malformed_files(tmp_path, text, line):
    with pytest.raises(DataError) as info:
        load_csv(write(tmp_path, text))
    assert info.value.line == line


def test_domain_violation(tmp_path):
    with pytest.raises(LikelihoodDomainError):
        load_csv(write(tmp_path, "x,y\n0,1\n1,2\n"), BernoulliLogit())


def test_spatial_columns_roundtrip(tmp_path):
    data = generate("banana-like-2d", 50, 3)
    path = tmp_path / "b.csv"
    write_csv(path, data)
    again = load_csv(path)
    np.testing.assert_array_equal(again.x, data.x)
    np.testing.assert_array_equal(again.r, data.r)
    np.testing.assert_array_equal(again.y, data.y)


@pytest.mark.parametrize("task", TASKS)
def test_generators_are_deterministic(task):
    a, b = generate(task, 200, 11), generate(task, 200, 11)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert np.all(np.diff(a.x) >= 0)
    assert not np.array_equal(generate(task, 200, 12).y, a.y)


def test_binary_sign_scale():
    data = generate("binary-sign", 10000, 0)
    assert data.N == 10000
    assert set(np.unique(data.y)) == {0.0, 1.0}
    assert 0.3 < data.y.mean() < 0.7


def test_poisson_counts_are_nonnegative_integers():
    y = generate("poisson-cox", 500, 1).y
    assert np.all(y >= 0) and np.all(y == np.round(y))


def test_unknown_task():
    with pytest.raises(DataError):
        generate("mnist", 10, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(2, 12), st.integers(0, 2 ** 32))
def test_folds_partition(n, k, seed):
    if k > n:
        with pytest.raises(DataError):
            folds(n, k, seed)
        return
    parts = folds(n, k, seed)
    tests = np.concatenate([te for _, te in parts])
    assert len(parts) == k
    np.testing.assert_array_equal(np.sort(tests), np.arange(n))
    for tr, te in parts:
        assert np.intersect1d(tr, te).size == 0
        assert tr.size + te.size == n
        assert np.all(np.diff(te) == 1)


def test_subset_keeps_original_rows():
    data = Dataset([3.0, 1.0, 2.0], [30.0, 10.0, 20.0])
    sub = data.subset([0, 2])
    np.testing.assert_array_equal(sub.perm, [1, 0])


def test_perfect_gaussian_prediction():
    y = np.array([0.3, -1.2, 2.0])
    metrics, _, _ = evaluate(Gaussian(1.0), y, y[:, None], np.full((3, 1, 1), 1e-12))
    assert metrics["rmse"] == pytest.approx(0.0, abs=1e-12)
    assert metrics["nlpd"] == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-9)


def test_bernoulli_point_mass_at_zero():
    metrics, _, y_mean = evaluate(BernoulliLogit(), np.array([1.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 1, 1)))
    assert metrics["nlpd"] == pytest.approx(np.log(2.0), abs=1e-12)
    np.testing.assert_allclose(y_mean, 0.5)


def test_nlpd_matches_quadrature_oracle():
    rng = np.random.default_rng(0)
    mean, var = rng.normal(0, 1.5, 20), rng.uniform(0.1, 2.0, 20)
    y = (rng.uniform(size=20) < 0.5).astype(float)
    metrics, log_pred, _ = evaluate(BernoulliLogit(), y, mean[:, None], var[:, None, None])
    for i in range(20):
        sign = 2 * y[i] - 1
        p = quad_expectation(lambda f: 1 / (1 + np.exp(-sign * f)), mean[i], var[i], order=200)
        assert log_pred[i] == pytest.approx(np.log(p), abs=1e-8)
    assert metrics["nlpd"] == pytest.approx(nlpd(log_pred))


def test_metric_helpers():
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    assert error_rate([1, 0, 1, 0], [0.9, 0.6, 0.2, 0.1]) == 0.5
    out = summarize([{"a": 1.0}, {"a": 3.0}])
    assert out == {"a": {"mean": 2.0, "std": 1.0}}

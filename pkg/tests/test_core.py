import numpy as np
import pytest
from numpy.testing import assert_allclose

from gapkit.core import (
    IncompleteMatrix,
    SeedSpec,
    read_matrix_csv,
    rmse_missing,
    sep,
    split_column,
    write_mask_csv,
    write_matrix_csv,
)


def test_incomplete_matrix_validation():
    with pytest.raises(ValueError):
        IncompleteMatrix(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        IncompleteMatrix(np.zeros((2, 2)), np.full((2, 2), 0.5))
    X = IncompleteMatrix([[1.0, 2.0]], [[1, 0]])
    assert np.isnan(X.values[0, 1])  # sentinel poisons the hidden entry
    assert X.n_missing() == 1


def test_incomplete_matrix_rejects_nan_observed():
    with pytest.raises(ValueError):
        IncompleteMatrix([[np.nan, 1.0]], [[1, 1]])


def test_split_column_fully_observed():
    X = IncompleteMatrix([[2.0], [3.0], [5.0]], np.ones((3, 1)))
    s = split_column(X, 0)
    assert len(s.missing_idx) == 0
    assert_allclose(s.x_o, [2.0, 3.0, 5.0])


def test_split_column_fully_missing():
    X = IncompleteMatrix(np.zeros((3, 1)), np.zeros((3, 1)))
    s = split_column(X, 0)
    assert len(s.observed_idx) == 0
    assert s.x_o.size == 0


def test_split_column_mixed():
    X = IncompleteMatrix([[2.0], [0.0], [5.0]], [[1], [0], [1]])
    s = split_column(X, 0)
    assert list(s.observed_idx) == [0, 2]
    assert list(s.missing_idx) == [1]
    assert_allclose(s.x_o, [2.0, 5.0])


def test_split_column_out_of_range():
    X = IncompleteMatrix(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(IndexError):
        split_column(X, 2)


def test_split_reassembly_reproduces_mask():
    rng = np.random.default_rng(0)
    mask = (rng.random((6, 9)) < 0.6).astype(int)
    X = IncompleteMatrix(rng.standard_normal((6, 9)), mask)
    rebuilt = np.zeros_like(mask)
    for j in range(X.n):
        s = split_column(X, j)
        rebuilt[s.observed_idx, j] = 1
    assert np.array_equal(rebuilt, mask)


def test_rmse_zero_when_equal():
    M = np.array([[1, 0], [0, 1]])
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert rmse_missing(X, X, M) == 0.0


def test_rmse_single_entry():
    M = np.array([[1, 0]])
    assert rmse_missing(np.array([[0.0, 3.0]]), np.zeros((1, 2)), M) == 3.0


def test_rmse_hand_value():
    # errors (3, 4) on the two masked entries: sqrt((9 + 16) / 2)
    M = np.array([[0, 0, 1]])
    Xhat = np.array([[3.0, 4.0, 99.0]])
    assert_allclose(rmse_missing(Xhat, np.zeros((1, 3)), M), np.sqrt(12.5))


def test_rmse_ignores_observed_positions():
    rng = np.random.default_rng(1)
    M = (rng.random((4, 5)) < 0.5).astype(int)
    M[0, 0] = 0  # ensure nonempty
    Xtrue = rng.standard_normal((4, 5))
    Xhat = Xtrue + np.where(M == 0, 0.3, 0.0)
    base = rmse_missing(Xhat, Xtrue, M)
    Xhat2 = Xhat + np.where(M == 1, rng.standard_normal((4, 5)), 0.0)
    assert rmse_missing(Xhat2, Xtrue, M) == base


def test_rmse_empty_evaluation_set():
    with pytest.raises(ValueError, match="empty evaluation set"):
        rmse_missing(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))


def test_sep_identical():
    U = np.linalg.qr(np.random.default_rng(2).standard_normal((5, 2)))[0]
    assert sep(U, U) < 1e-12


def test_sep_orthogonal_complement():
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    assert_allclose(sep(e1, e2), 1.0)


def test_sep_half_angle():
    e1 = np.array([[1.0], [0.0]])
    mid = np.array([[1.0], [1.0]]) / np.sqrt(2)
    assert_allclose(sep(mid, e1), 0.5)


def test_sep_basis_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        U = rng.standard_normal((7, 3))
        V = rng.standard_normal((7, 3))
        Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        assert_allclose(sep(U @ Q, V), sep(U, V), atol=1e-12)
        assert_allclose(sep(U, V @ Q), sep(U, V), atol=1e-12)
        assert 0.0 <= sep(U, V) <= 1.0


def test_sep_rank_deficient():
    U = np.zeros((4, 2))
    U[:, 0] = 1.0
    U[:, 1] = 1.0
    with pytest.raises(ValueError, match="rank"):
        sep(U, np.eye(4)[:, :2])


def test_seedspec_reproducible():
    a = SeedSpec(42, 7).rng().standard_normal(5)
    b = SeedSpec(42, 7).rng().standard_normal(5)
    c = SeedSpec(42, 8).rng().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert SeedSpec(42, 7).substream(1) == SeedSpec(42, 8)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    vals = rng.standard_normal((3, 5))
    mask = (rng.random((3, 5)) < 0.7).astype(int)
    X = IncompleteMatrix(vals, mask)
    path = tmp_path / "m.csv"
    write_matrix_csv(path, X.values, X.mask)
    back = read_matrix_csv(path)
    assert np.array_equal(back.mask, mask)
    assert_allclose(back.values[mask == 1], vals[mask == 1], rtol=0, atol=0)


def test_csv_sidecar_mask(tmp_path):
    vals = np.arange(6.0).reshape(2, 3)
    mask = np.array([[1, 0, 1], [1, 1, 0]])
    write_matrix_csv(tmp_path / "v.csv", vals)
    write_mask_csv(tmp_path / "m.csv", mask)
    X = read_matrix_csv(tmp_path / "v.csv", tmp_path / "m.csv")
    assert np.array_equal(X.mask, mask)
    assert np.isnan(X.values[0, 1])

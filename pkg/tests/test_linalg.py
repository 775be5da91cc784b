import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gauss_determinant, normal_equations_pinv, normal_equations_solve
from starnet.errors import InsufficientData, RankDeficient, ShapeMismatch
from starnet.linalg import (
    LeastSquares,
    StreamingLeastSquares,
    column_rank_ok,
    ensure_matrix,
    least_squares,
    pseudoinverse,
)


def test_orthogonal_complement_case():
    a = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    rep = least_squares(a, np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(rep.solution[:, 0], [1.0, 2.0], atol=1e-14)
    assert rep.residual_norms[0] == pytest.approx(3.0, abs=1e-14)


def test_mean_of_targets():
    rep = least_squares(np.array([[1.0], [1.0]]), np.array([[0.0], [2.0]]))
    assert rep.solution[0, 0] == pytest.approx(1.0, abs=1e-14)
    assert rep.residual_norms[0] == pytest.approx(np.sqrt(2.0), abs=1e-14)


def test_consistent_random_system_matches_normal_equations():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 3))
    b = a @ np.array([1.0, 2.0, 3.0])
    rep = least_squares(a, b[:, None])
    np.testing.assert_allclose(rep.solution[:, 0], [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(rep.solution[:, 0], normal_equations_solve(a, b), atol=1e-10)
    assert rep.residual_norms[0] <= 1e-10


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        least_squares(np.eye(3), np.ones((2, 1)))


def test_rank_deficient_rejected():
    a = np.ones((5, 2))
    with pytest.raises(RankDeficient):
        least_squares(a, np.ones((5, 1)))
    with pytest.raises(RankDeficient):
        pseudoinverse(np.ones((2, 3)))


@pytest.mark.parametrize("n", [1, 2, 5])
def test_pseudoinverse_of_identity(n):
    np.testing.assert_allclose(pseudoinverse(np.eye(n)), np.eye(n), atol=1e-15)


def test_pseudoinverse_scalar():
    assert pseudoinverse(np.array([[2.0]]))[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_pseudoinverse_random_tall():
    a = np.random.default_rng(7).standard_normal((5, 3))
    p = pseudoinverse(a)
    assert np.abs(p @ a - np.eye(3)).max() < 1e-8
    np.testing.assert_allclose(p, normal_equations_pinv(a), atol=1e-10)


def test_column_rank_ok_cases():
    assert column_rank_ok(np.eye(4), 1e-10)
    dup = np.random.default_rng(0).standard_normal((6, 3))
    dup[:, 2] = dup[:, 0]
    assert not column_rank_ok(dup, 1e-10)
    assert not column_rank_ok(np.ones((2, 3)), 1e-10)


def test_column_rank_ok_gaussian_against_gram_determinant():
    a = np.random.default_rng(11).standard_normal((16, 8))
    gram = a.T @ a
    det = gauss_determinant(gram)
    # well-conditioned Gram matrix: positive determinant, not tiny relative to its scale
    assert det > 0 and det > 1e-10 * np.prod(np.diag(gram))
    assert column_rank_ok(a, 1e-10)


def test_ensure_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        ensure_matrix(np.array([[1.0, np.nan]]))
    with pytest.raises(ShapeMismatch):
        ensure_matrix(np.ones(3))


@st.composite
def tall_systems(draw):
    m = draw(st.integers(2, 12))
    n = draw(st.integers(1, m))
    k = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, n)), rng.standard_normal((m, k)) * draw(st.floats(0.1, 10.0))


@settings(max_examples=60, deadline=None)
@given(tall_systems())
def test_least_squares_properties(system):
    a, b = system
    if np.linalg.cond(a) > 1e4:
        return
    rep = least_squares(a, b)
    r = a @ rep.solution - b
    scale = np.abs(a).max() * np.abs(b).max()
    assert np.abs(a.T @ r).max() < 1e-8 * scale
    oracle = normal_equations_solve(a, b)
    assert np.abs(rep.solution - oracle).max() <= 1e-8 * max(1.0, np.abs(oracle).max())
    np.testing.assert_allclose(rep.residual_norms, np.linalg.norm(r, axis=0), rtol=1e-9, atol=1e-12)
    # pseudoinverse applied to each column gives the same solution
    np.testing.assert_allclose(pseudoinverse(a) @ b, rep.solution, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(tall_systems())
def test_consistent_systems_are_exact(system):
    a, b = system
    if np.linalg.cond(a) > 1e4:
        return
    x = np.random.default_rng(1).standard_normal((a.shape[1], b.shape[1]))
    rhs = a @ x
    rep = least_squares(a, rhs)
    assert np.all(np.linalg.norm(a @ rep.solution - rhs, axis=0) < 1e-9 * np.linalg.norm(rhs, axis=0) + 1e-300)


def test_rows_are_partition_invariant_bitwise():
    rng = np.random.default_rng(5)
    sys_ = LeastSquares(rng.standard_normal((40, 12)))
    t = rng.standard_normal((700, 40))
    x_all, n_all = sys_.solve_rows(t)
    x_par, n_par = sys_.solve_rows(t, workers=3)
    pieces = [sys_.solve_rows(t[i:i + 1]) for i in range(0, 700, 97)]
    assert np.array_equal(x_all, x_par) and np.array_equal(n_all, n_par)
    for i, (x1, n1) in zip(range(0, 700, 97), pieces):
        assert np.array_equal(x1[0], x_all[i]) and n1[0] == n_all[i]


def test_streaming_matches_direct():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((500, 7))
    b = rng.standard_normal((500, 3))
    s = StreamingLeastSquares(7, 3)
    for i in range(0, 500, 37):
        s.update(a[i:i + 37], b[i:i + 37])
    rep = s.finish()
    direct = least_squares(a, b)
    np.testing.assert_allclose(rep.solution, direct.solution, atol=1e-10)
    np.testing.assert_allclose(rep.residual_norms, direct.residual_norms, rtol=1e-9)


def test_streaming_small_blocks_and_insufficient():
    s = StreamingLeastSquares(3, 1)
    s.update(np.eye(3)[:2], np.ones((2, 1)))
    with pytest.raises(InsufficientData):
        s.finish()
    s.update(np.eye(3)[2:], np.ones((1, 1)))
    rep = s.finish()
    np.testing.assert_allclose(rep.solution[:, 0], 1.0, atol=1e-14)
    assert rep.residual_norms[0] < 1e-14

import math

import numpy as np
import pytest

from shapereg.errors import DataError, IndexRangeError, SchemaError, ShapeError
from shapereg.problem import (
    ActiveSet, Box, Dataset, LipschitzBall, Monotone, NoShape, PerPointBall, ProblemInstance, adjoint_scatter,
    block_ranges, build_instance, constraint_values, dump_shape, linear_index, mirror_shape, pair_index,
    parse_shape, scan_blocks, standardize,
)

from conftest import dense_operators, random_dataset


def _line_instance(xs=(0.0, 1.0)):
    return ProblemInstance(Dataset(np.array([list(xs)]), np.zeros(len(xs))))


def test_linear_index_examples():
    # 1-based (1,1),(2,1),(3,4) shifted to 0-based
    assert linear_index(0, 0, 5) == 0
    assert linear_index(1, 0, 2) == 2
    assert linear_index(2, 3, 10) == 23
    assert pair_index(23, 10) == (2, 3)


def test_linear_index_round_trip_exhaustive():
    for n in range(1, 21):
        ks = [linear_index(i, j, n) for i in range(n) for j in range(n)]
        assert ks == list(range(n * n))
        assert all(linear_index(*pair_index(k, n), n) == k for k in ks)


@pytest.mark.parametrize("args", [(-1, 0, 3), (0, 3, 3), (3, 0, 3)])
def test_linear_index_out_of_range(args):
    with pytest.raises(IndexRangeError):
        linear_index(*args)
    with pytest.raises(IndexError):
        linear_index(*args)


def test_pair_index_out_of_range():
    with pytest.raises(IndexRangeError):
        pair_index(9, 3)


def test_constraint_values_hand_examples():
    prob = _line_instance()
    vals = constraint_values(prob, [0.0, 0.0], [[1.0], [-1.0]])
    np.testing.assert_allclose(vals, [0.0, -1.0, -1.0, 0.0])
    # affine interpolant has zero slack everywhere
    np.testing.assert_allclose(constraint_values(prob, [0.0, 1.0], [[1.0], [1.0]]), np.zeros(4))


def test_constant_function_is_feasible(small_instance):
    n, d = small_instance.n, small_instance.d
    vals = constraint_values(small_instance, np.full(n, 3.7), np.zeros((n, d)))
    np.testing.assert_array_equal(vals, np.zeros(n * n))


def test_adjoint_hand_example():
    prob = _line_instance()
    u = np.zeros(4)
    u[linear_index(0, 1, 2)] = 1.0
    at, bt = adjoint_scatter(prob, u)
    np.testing.assert_allclose(at, [-1.0, 1.0])
    np.testing.assert_allclose(bt.ravel(), [-1.0, 0.0])
    at, bt = adjoint_scatter(prob, np.zeros(4))
    assert not at.any() and not bt.any()


@pytest.mark.parametrize("n,d", [(3, 1), (5, 2), (8, 3)])
def test_operators_match_dense(n, d, rng):
    prob = ProblemInstance(random_dataset(n, d, seed=n))
    A, B = dense_operators(prob)
    theta = rng.standard_normal(n)
    xi = rng.standard_normal((n, d))
    u = rng.standard_normal(n * n)
    np.testing.assert_allclose(constraint_values(prob, theta, xi), A @ theta + B @ xi.ravel(), atol=1e-12)
    at, bt = adjoint_scatter(prob, u)
    np.testing.assert_allclose(at, A.T @ u, atol=1e-12)
    np.testing.assert_allclose(bt.ravel(), B.T @ u, atol=1e-12)
    lhs = (A @ theta + B @ xi.ravel()) @ u
    assert lhs == pytest.approx(theta @ at + np.sum(xi * bt), abs=1e-12 * max(1.0, abs(lhs)))
    # A^T A = 2n I - 2 e e^T
    at_theta, _ = adjoint_scatter(prob, constraint_values(prob, theta, np.zeros((n, d))))
    np.testing.assert_allclose(at_theta, 2 * n * theta - 2 * theta.sum(), atol=1e-12)
    assert prob.norm_A(theta) == pytest.approx(np.linalg.norm(A @ theta), rel=1e-10)
    assert prob.norm_B(xi) == pytest.approx(np.linalg.norm(B @ xi.ravel()), rel=1e-10)


def test_diagonal_rows_are_zero(small_instance, rng):
    n, d = small_instance.n, small_instance.d
    vals = constraint_values(small_instance, rng.standard_normal(n), rng.standard_normal((n, d))).reshape(n, n)
    np.testing.assert_array_equal(np.diag(vals), np.zeros(n))
    diag = ActiveSet(n, [0, n + 1, 5 * (n + 1), 1])
    vals = constraint_values(small_instance, rng.standard_normal(n), rng.standard_normal((n, d)), diag)
    np.testing.assert_array_equal(vals[[0, 2, 3]], np.zeros(3))  # rows sort to 0, 1, n + 1, 5(n + 1)


def test_subset_and_complement_recover_full(small_instance, rng):
    n, d = small_instance.n, small_instance.d
    theta, xi = rng.standard_normal(n), rng.standard_normal((n, d))
    rows = np.sort(rng.choice(n * n, size=40, replace=False))
    rest = np.setdiff1d(np.arange(n * n), rows)
    merged = np.empty(n * n)
    merged[rows] = constraint_values(small_instance, theta, xi, rows)
    merged[rest] = constraint_values(small_instance, theta, xi, rest)
    np.testing.assert_allclose(merged, constraint_values(small_instance, theta, xi), atol=1e-14)


def test_reduced_adjoint_matches_dense(small_instance, rng, dense_ops):
    n = small_instance.n
    A, B = dense_ops(small_instance)
    active = ActiveSet(n, rng.choice(n * n, size=30, replace=False))
    u = rng.standard_normal(active.size)
    at, bt = active.adjoint(small_instance, u)
    np.testing.assert_allclose(at, A[active.rows].T @ u, atol=1e-12)
    np.testing.assert_allclose(bt.ravel(), B[active.rows].T @ u, atol=1e-12)


def test_gram_blocks_match_dense(small_instance, rng, dense_ops):
    n, d = small_instance.n, small_instance.d
    _, B = dense_ops(small_instance)
    for active in (ActiveSet.full(n), ActiveSet(n, rng.choice(n * n, size=50, replace=False))):
        G = small_instance.gram_blocks(active)
        Bi = B if active.is_full else np.where(np.isin(np.arange(n * n), active.rows)[:, None], B, 0.0)
        for i in range(n):
            blk = Bi[:, i * d:(i + 1) * d]
            np.testing.assert_allclose(G[i], blk.T @ blk, atol=1e-12)


def test_active_set_union_and_remap():
    n = 3
    off = [k for k in range(9) if k // 3 != k % 3]
    part = ActiveSet(n, off[:4])
    u = np.arange(1.0, 5.0)
    grown = part.union(np.array(off[4:5]))
    assert grown.size == 5 and not grown.is_full
    np.testing.assert_array_equal(part.remap(u, grown)[:4], u)
    full = grown.union(np.array(off[5:]))
    assert full.is_full
    carried = part.remap(u, full)
    np.testing.assert_array_equal(carried[off[:4]], u)
    assert carried.sum() == u.sum()


def test_active_set_rejects_out_of_range():
    with pytest.raises(IndexRangeError):
        ActiveSet(3, [9])


def test_scan_blocks_order_independent_of_threads():
    ranges = block_ranges(101, 7)
    assert ranges[0][0] == 0 and ranges[-1][1] == 101
    one = scan_blocks(lambda a, b: (a, b), 101, 7, threads=1)
    many = scan_blocks(lambda a, b: (a, b), 101, 7, threads=4)
    assert one == many == ranges


def test_standardize_example():
    ds = Dataset(np.array([[0.0, 1.0, 3.0]]), np.array([1.0, 2.0, 3.0]))
    inst, rec = standardize(ds)
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(inst.Y, [-s, 0.0, s])
    assert np.linalg.norm(inst.points[:, 0]) == pytest.approx(1.0)
    assert rec.y_mean == pytest.approx(2.0)


def test_standardize_is_idempotent_on_normalized_rows():
    ds = Dataset(np.array([[-1.0, 0.0, 1.0]]) / math.sqrt(2), np.array([-1.0, 0.0, 1.0]) / math.sqrt(2))
    inst, _ = standardize(ds)
    np.testing.assert_allclose(inst.Y, ds.Y, atol=1e-15)
    np.testing.assert_allclose(inst.dataset.X, ds.X, atol=1e-15)


def test_standardize_rejects_zero_variance():
    with pytest.raises(DataError, match="zero variance"):
        standardize(Dataset(np.array([[0.0, 1.0, 2.0]]), np.array([5.0, 5.0, 5.0])))
    with pytest.raises(DataError):
        standardize(Dataset(np.array([[1.0, 1.0, 1.0]]), np.array([1.0, 2.0, 3.0])))


def test_standardize_restore_round_trip(small_dataset, rng):
    inst, rec = standardize(small_dataset)
    theta, xi = rng.standard_normal(inst.n), rng.standard_normal((inst.n, inst.d))
    th0, xi0 = rec.restore(theta, xi)
    # slacks scale by y_norm under the restore map
    raw = ProblemInstance(small_dataset)
    np.testing.assert_allclose(constraint_values(raw, th0, xi0), rec.y_norm * constraint_values(inst, theta, xi), atol=1e-10)


def test_box_is_rescaled_with_the_data(small_dataset):
    inst = build_instance(small_dataset, Box(L=[0.0, None], U=[1.0, 2.0]))
    f = np.array(inst.record.row_norms) / inst.record.y_norm
    assert isinstance(inst.shape, Box)
    np.testing.assert_allclose(inst.shape.upper, [f[0], 2 * f[1]])
    assert inst.shape.L[1] is None


def test_balls_are_fitted_on_raw_scale(small_dataset):
    inst = build_instance(small_dataset, LipschitzBall(q=2, L=1.0))
    assert not inst.standardized


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.array([[0.0, np.nan]]), np.array([1.0, 2.0]))
    with pytest.raises(DataError):
        Dataset(np.array([[0.0, 1.0]]), np.array([1.0]))


def test_shape_json_parsing():
    assert parse_shape('{"kind": "box", "L": [0, null], "U": [1, 2]}') == Box(L=[0.0, None], U=[1.0, 2.0])
    ball = parse_shape({"kind": "lipschitz", "q": "inf", "L": 2})
    assert ball.q == math.inf
    assert dump_shape(ball) == {"kind": "lipschitz", "q": "inf", "L": 2.0}
    assert parse_shape({"kind": "none"}) == NoShape()


@pytest.mark.parametrize("data", [
    {"kind": "monotone", "K1": [0], "K2": [0]},
    {"kind": "box", "L": [2.0], "U": [1.0]},
    {"kind": "lipschitz", "q": 3, "L": 1.0},
    {"kind": "lipschitz", "q": 2, "L": 0.0},
    {"kind": "per_point", "q": 1, "L": [1.0, -1.0]},
    {"kind": "ellipse"},
])
def test_invalid_shapes(data):
    with pytest.raises(SchemaError):
        parse_shape(data)


def test_shape_dimension_checks(small_dataset):
    with pytest.raises(ShapeError):
        ProblemInstance(small_dataset, Monotone(K1=[5]))
    with pytest.raises(ShapeError):
        ProblemInstance(small_dataset, PerPointBall(q=2, L=[1.0, 2.0]))


def test_mirror_shape():
    assert mirror_shape(Monotone(K1=[0], K2=[1])) == Monotone(K1=[1], K2=[0])
    assert mirror_shape(Box(L=[0.0], U=[1.0])) == Box(L=[-1.0], U=[-0.0])
    ball = LipschitzBall(q=1, L=3.0)
    assert mirror_shape(ball) is ball

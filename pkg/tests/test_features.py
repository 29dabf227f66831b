import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poirot.equivariant import softmax
from poirot.errors import EmptyError, ShapeError, SizeError, UnrepresentablePointError
from poirot.features import (
    AttentionGate,
    FeatureField,
    GlobalPool,
    affine_coords,
    attention_combine,
    deform,
    global_pool,
    interpolate,
    interpolation_matrix,
    mean_iou,
    neighbor_indices,
    random_deform_params,
)
from poirot.geometry import PointCloud, random_rotation

seeds = st.integers(0, 2**31 - 1)
TETRA = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


# -- affine coordinates ------------------------------------------------------


def test_affine_coords_vertex_and_centroid():
    cloud = PointCloud(np.vstack([TETRA, TETRA.mean(axis=0)]))
    c = affine_coords(cloud, [0, 1, 2, 3]).coords
    np.testing.assert_allclose(c[2], [0, 0, 1, 0], atol=1e-12)
    np.testing.assert_allclose(c[4], [0.25] * 4, atol=1e-12)


def _kkt_oracle(A, b):
    # min |c|^2 subject to A c = b through the KKT system
    m, n = A.shape
    K = np.block([[2 * np.eye(n), A.T], [A, np.zeros((m, m))]])
    return np.linalg.solve(K, np.concatenate([np.zeros(n), b]))[:n]


def test_affine_coords_cube_matches_constrained_oracle(rng):
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    inner = rng.uniform(0.05, 0.95, size=(10, 3))
    cloud = PointCloud(np.vstack([corners, inner]))
    c = affine_coords(cloud, np.arange(8)).coords
    A = np.vstack([corners.T, np.ones(8)])
    for i in range(8, 18):
        oracle = _kkt_oracle(A, np.append(cloud.points[i], 1.0))
        np.testing.assert_allclose(c[i], oracle, atol=1e-9)
    np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(c @ corners, cloud.points, atol=1e-9)


@given(seeds)
def test_affine_coords_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 40))
    cloud = PointCloud(rng.normal(size=(n, 3)))
    S = rng.choice(n, size=int(rng.integers(4, n)), replace=False)
    moved = cloud.transformed(random_rotation(rng), rng.normal(size=3) * 3)
    a = affine_coords(cloud, S).coords
    b = affine_coords(moved, S).coords
    np.testing.assert_allclose(a, b, atol=1e-9)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a @ cloud.points[S], cloud.points, atol=1e-6 * cloud.diameter)


def test_affine_coords_degenerate_subset():
    pts = np.vstack([TETRA[:3], [[0.5, 0.5, 0.0]], [[0, 0, 2.0]]])
    c = affine_coords(PointCloud(pts[:4]), [0, 1, 2]).coords  # planar subset, planar cloud
    np.testing.assert_allclose(c @ pts[:3], pts[:4], atol=1e-12)
    with pytest.raises(UnrepresentablePointError):
        affine_coords(PointCloud(pts), [0, 1, 2])
    with pytest.raises(EmptyError):
        affine_coords(PointCloud(pts), [])


# -- interpolation -----------------------------------------------------------


def test_interpolate_examples():
    cloud = PointCloud([[0.0, 0, 0], [2, 0, 0], [1, 0, 0], [5, 5, 5]])
    feats = FeatureField(np.array([[1.0, 10.0], [3.0, 30.0]]))
    out = interpolate(feats, cloud, [0, 1], 2).values
    np.testing.assert_array_equal(out[0], [1.0, 10.0])
    np.testing.assert_array_equal(out[1], [3.0, 30.0])
    np.testing.assert_allclose(out[2], [2.0, 20.0], rtol=1e-15)
    with pytest.raises(SizeError):
        interpolate(feats, cloud, [0, 1], 3)
    with pytest.raises(ShapeError):
        interpolate(feats, cloud, [0, 1, 2], 2)


def test_interpolate_matches_loop_oracle(rng):
    pts = rng.normal(size=(30, 3))
    S = rng.choice(30, size=8, replace=False)
    f = rng.normal(size=(8, 4))
    out = interpolate(FeatureField(f), PointCloud(pts), S, 3).values
    for i, x in enumerate(pts):
        d = [float(np.linalg.norm(x - pts[s])) for s in S]
        nearest = sorted(range(8), key=lambda j: (d[j], j))[:3]
        if d[nearest[0]] < 1e-12:
            expect = f[nearest[0]]
        else:
            w = np.array([1.0 / d[j] ** 2 for j in nearest])
            expect = sum(wj * f[j] for wj, j in zip(w / w.sum(), nearest))
        np.testing.assert_allclose(out[i], expect, rtol=1e-12, atol=1e-12)


@given(seeds)
def test_interpolation_rigid_covariance(seed):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.normal(size=(20, 3)))
    S = rng.choice(20, size=6, replace=False)
    moved = cloud.transformed(random_rotation(rng), rng.normal(size=3))
    M = interpolation_matrix(cloud, S, 3)
    np.testing.assert_allclose(interpolation_matrix(moved, S, 3), M, atol=1e-10)
    np.testing.assert_allclose(M.sum(axis=1), 1.0, rtol=1e-14)


def test_neighbor_indices(rng):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0], [0.5, 0, 0]])
    np.testing.assert_array_equal(neighbor_indices(PointCloud(pts), 2), [[0, 3], [1, 3], [2, 1], [3, 0]])
    with pytest.raises(SizeError):
        neighbor_indices(PointCloud(pts), 5)


# -- attention ---------------------------------------------------------------


def _setup(rng, n=12, d=3, s=5):
    cloud = PointCloud(rng.normal(size=(n, 3)))
    return cloud, FeatureField(rng.normal(size=(n, d))), rng.normal(size=(n, s))


def test_attention_equal_logits(rng):
    cloud, local, glob = _setup(rng)
    gate = AttentionGate(3, 4, rng=0)
    gate.children["head"].params["weight"].value[...] = 0.0
    out, p = attention_combine(local, glob, cloud, 4, gate)
    np.testing.assert_array_equal(p, 0.5)
    np.testing.assert_allclose(out.values, 0.5 * np.hstack([local.values, glob]), rtol=1e-15)
    assert out.role == "combined" and out.values.shape == (12, 8)


def test_attention_local_limit(rng):
    cloud, local, glob = _setup(rng)
    gate = AttentionGate(3, 4, rng=0)
    gate.children["head"].params["weight"].value[...] = 0.0
    gate.children["head"].params["bias"].value[...] = [800.0, -800.0]
    out, p = attention_combine(local, glob, cloud, 4, gate)
    np.testing.assert_array_equal(out.values[:, :3], local.values)
    np.testing.assert_array_equal(out.values[:, 3:], 0.0)


def test_attention_matches_composition(rng):
    cloud, local, glob = _setup(rng)
    gate = AttentionGate(3, 4, rng=1)
    out, p = attention_combine(local, glob, cloud, 4, gate)
    nb = neighbor_indices(cloud, 4)
    W1, b1 = gate.children["embed"].params["weight"].value, gate.children["embed"].params["bias"].value
    W2, b2 = gate.children["head"].params["weight"].value, gate.children["head"].params["bias"].value
    rows = []
    for i in range(12):
        # shared map on each neighbor, then the mean
        z = np.mean([local.values[j] @ W1 + b1 for j in nb[i]], axis=0)
        q = softmax(np.maximum(z, 0.0) @ W2 + b2)
        rows.append(np.concatenate([q[0] * local.values[i], q[1] * glob[i]]))
    np.testing.assert_allclose(out.values, rows, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p > 0) & (p < 1))


def test_attention_shape_errors(rng):
    cloud, local, glob = _setup(rng)
    with pytest.raises(ShapeError):
        attention_combine(local, glob[:5], cloud, 4, AttentionGate(3, rng=0))
    with pytest.raises(ShapeError):
        attention_combine(local, glob, cloud, 4, AttentionGate(2, rng=0))


# -- pooling -----------------------------------------------------------------


def test_global_pool_examples(rng):
    row = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(global_pool(FeatureField(row)), row[0])
    rows = rng.normal(size=(6, 3))
    for perm in itertools.permutations(range(6)):
        np.testing.assert_array_equal(global_pool(rows[list(perm)]), rows.max(axis=0))
    with pytest.raises(EmptyError):
        global_pool(np.zeros((0, 3)))


def test_global_pool_conv1_oracle(rng):
    rows = rng.normal(size=(7, 3))
    pool = GlobalPool("conv1", 3, 5, rng=0)
    W = pool.children["map"].params["weight"].value
    b = pool.children["map"].params["bias"].value
    expect = np.max([r @ W + b for r in rows], axis=0)
    np.testing.assert_allclose(global_pool(rows, params=pool), expect, rtol=1e-12)


def test_global_pool_backward_routes_to_argmax():
    rows = np.array([[1.0, 5.0], [3.0, 2.0]])
    pool = GlobalPool()
    pool.forward(rows)
    np.testing.assert_array_equal(pool.backward(np.array([7.0, 9.0])), [[0, 9.0], [7.0, 0]])


# -- deformation -------------------------------------------------------------


def test_deform_identity_cases(rng):
    cloud = PointCloud(rng.normal(size=(10, 3)), labels=np.arange(10))
    assert deform(cloud, random_deform_params(0, 0.0)) is cloud
    same = deform(cloud, random_deform_params(0, 0.3, zero_last=True))
    np.testing.assert_array_equal(same.points, cloud.points)
    np.testing.assert_array_equal(same.labels, cloud.labels)


def test_deform_displacement_bound(rng):
    eps = 0.05
    x = rng.uniform(-3, 3, size=(20_000, 3))
    params = random_deform_params(3, eps)
    moved = deform(PointCloud(x), params).points
    disp = np.linalg.norm(moved - x, axis=1)
    assert disp.max() <= eps * np.sqrt(3)
    assert np.all(np.abs(moved - x) <= eps)
    with pytest.raises(ValueError):
        random_deform_params(0, -1.0)


# -- metrics -----------------------------------------------------------------


def test_mean_iou_hand_case():
    pred = [0, 0, 1, 1]
    truth = [0, 1, 1, 1]
    # part 0: 1/2, part 1: 2/3
    assert abs(mean_iou(pred, truth) - (0.5 + 2 / 3) / 2) < 1e-15
    assert mean_iou([1, 1], [1, 1], parts=[0, 1]) == 1.0
    with pytest.raises(ShapeError):
        mean_iou([0], [0, 1])


def test_feature_field_validation():
    with pytest.raises(ShapeError):
        FeatureField(np.zeros(3))
    with pytest.raises(ValueError):
        FeatureField(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        FeatureField(np.zeros((1, 1)), role="other")

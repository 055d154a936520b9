import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_knn
from saliency_kp.errors import DegenerateConfiguration, EmptyCloud, ShapeMismatch
from saliency_kp.geometry import (ExactKnn, PointCloud, RigidTransform, apply_transform, build_index,
                                  compose, invert, median_center, nearest, radial_distances,
                                  random_transform, rotation_about_axis, umeyama_fit)

coords = st.floats(-100, 100, allow_nan=False, width=64)


def clouds(min_n=1, max_n=60):
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def pairwise(p):
    return np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))


# -- containers and transforms -------------------------------------------------

def test_point_cloud_rejects_bad_input():
    with pytest.raises(EmptyCloud):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ShapeMismatch):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud([[0.0, np.nan, 1.0]])


def test_point_cloud_is_read_only():
    c = PointCloud(np.ones((3, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


def test_rigid_transform_rejects_reflection():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_identity_transform_leaves_cloud_unchanged(rng):
    p = rng.normal(size=(20, 3))
    assert np.array_equal(apply_transform(p, RigidTransform.identity()), p)


def test_quarter_turn_about_z():
    t = RigidTransform(rotation_about_axis([0, 0, 1], 90.0), np.zeros(3))
    np.testing.assert_allclose(apply_transform([[1.0, 0.0, 0.0]], t), [[0.0, 1.0, 0.0]], atol=1e-15)


def test_apply_keeps_container_kind(rng):
    t = random_transform(rng)
    assert isinstance(apply_transform(PointCloud(rng.normal(size=(3, 3))), t), PointCloud)
    assert isinstance(apply_transform(rng.normal(size=(3, 3)), t), np.ndarray)


def test_invert_pure_translation():
    inv = invert(RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
    assert np.array_equal(inv.translation, [-1.0, -2.0, -3.0])
    assert np.array_equal(inv.rotation, np.eye(3))
    ident = invert(RigidTransform.identity())
    assert np.array_equal(ident.matrix(), np.eye(4))


@pytest.mark.parametrize("seed", range(10))
def test_compose_with_inverse_is_identity(seed):
    t = random_transform(np.random.default_rng(seed), max_translation=10.0)
    np.testing.assert_allclose(compose(t, invert(t)).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose((invert(t) @ t).matrix(), np.eye(4), atol=1e-12)
    p = np.random.default_rng(seed).normal(size=(30, 3)) * 5
    np.testing.assert_allclose(apply_transform(apply_transform(p, t), invert(t)), p, atol=1e-12)


def test_compose_matches_matrix_product(rng):
    a, b = random_transform(rng), random_transform(rng)
    np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-14)


@given(clouds(2, 40), st.integers(0, 2**32 - 1))
def test_transform_is_isometry(p, seed):
    t = random_transform(np.random.default_rng(seed), max_translation=50.0)
    np.testing.assert_allclose(pairwise(apply_transform(p, t)), pairwise(p), atol=1e-9)


# -- neighbour search ----------------------------------------------------------

def test_single_point_index():
    idx = build_index([[1.0, 2.0, 3.0]])
    assert nearest(idx, [100.0, -5.0, 0.0])[0] == 0


def test_collinear_middle():
    idx = build_index([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    assert nearest(idx, [1.1, 0.3, 0.0]) == (1, pytest.approx(np.hypot(0.1, 0.3)))


def test_nearest_matches_brute_force_200(rng):
    p = rng.uniform(-10, 10, (200, 3))
    q = rng.uniform(-12, 12, (300, 3))
    idx, dist = build_index(p).nearest_all(q)
    bi, bd = brute_knn(p, q, 1)
    assert np.array_equal(idx, bi[:, 0])
    assert np.array_equal(dist, bd[:, 0])


def test_ties_break_to_lowest_index():
    p = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    i, d = build_index(p).nearest([0.0, 0.0, 0.0])
    assert (i, d) == (0, 1.0)
    idx, _ = build_index(p).knn([0.0, 0.0, 0.0], 4)
    assert idx.tolist() == [0, 1, 2, 3]


@given(clouds(1, 80), clouds(1, 10), st.integers(1, 12))
def test_knn_equals_brute_force(p, q, k):
    k = min(k, len(p))
    idx, dist = build_index(p).knn_all(q, k)
    bi, bd = brute_knn(p, q, k)
    assert np.array_equal(idx, bi)
    assert np.array_equal(dist, bd)


@given(st.integers(0, 2**32 - 1), st.integers(1, 500))
def test_knn_tie_heavy_grid(seed, n):
    # integer coordinates produce many exactly equal distances
    rng = np.random.default_rng(seed)
    p = rng.integers(-3, 4, (n, 3)).astype(float)
    q = rng.integers(-4, 5, (20, 3)).astype(float)
    k = min(9, n)
    idx, dist = build_index(p).knn_all(q, k)
    bi, bd = brute_knn(p, q, k)
    assert np.array_equal(idx, bi) and np.array_equal(dist, bd)


def test_exact_knn_in_descriptor_space(rng):
    ref = rng.normal(size=(150, 8))
    q = rng.normal(size=(40, 8))
    idx, _ = ExactKnn(ref).query(q, 3)
    d = np.sqrt(((q[:, None] - ref[None]) ** 2).sum(-1))
    oracle = np.lexsort((np.broadcast_to(np.arange(150), d.shape), d), axis=-1)[:, :3]
    assert np.array_equal(idx, oracle)


def test_radius_query_inclusive(rng):
    p = rng.uniform(-2, 2, (100, 3))
    q = np.zeros(3)
    got = build_index(p).radius(q, 1.0)
    d = np.sqrt((p ** 2).sum(1))
    expect = np.lexsort((np.arange(100), d))
    expect = expect[d[expect] <= 1.0]
    assert np.array_equal(got, expect)


# -- robust statistics ---------------------------------------------------------

def test_median_odd_and_even():
    assert np.array_equal(median_center([[0, 0, 0], [2, 0, 0], [10, 0, 0]]), [2, 0, 0])
    assert np.array_equal(median_center([[0, 0, 0], [4, 0, 0]]), [2, 0, 0])


def sort_median(p):
    s = np.sort(p, axis=0)
    n = len(s)
    return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2


def test_median_matches_sort_oracle_101(rng):
    p = rng.normal(size=(101, 3))
    assert np.array_equal(median_center(p), sort_median(p))


@given(clouds(1, 50))
def test_median_matches_sort_oracle(p):
    np.testing.assert_allclose(median_center(p), sort_median(p), rtol=0, atol=1e-12)


@given(clouds(1, 50), arrays(np.float64, 3, elements=coords))
def test_median_translation_equivariant(p, t):
    np.testing.assert_allclose(median_center(p + t), median_center(p) + t, atol=1e-12)


def test_radial_distances_examples(rng):
    assert radial_distances([[1.0, 1.0, 1.0]], [1.0, 1.0, 1.0])[0] == 0.0
    assert radial_distances([[3.0, 4.0, 0.0]], np.zeros(3))[0] == 5.0
    p, c = rng.normal(size=(50, 3)), rng.normal(size=3)
    oracle = np.array([np.sqrt(sum((p[i, j] - c[j]) ** 2 for j in range(3))) for i in range(50)])
    np.testing.assert_allclose(radial_distances(p, c), oracle, rtol=1e-15)


@given(clouds(1, 30), st.integers(0, 2**32 - 1))
def test_radial_distances_rigid_invariant(p, seed):
    t = random_transform(np.random.default_rng(seed), max_translation=20.0)
    c = median_center(p)
    got = radial_distances(apply_transform(p, t), apply_transform(c, t)[0])
    np.testing.assert_allclose(got, radial_distances(p, c), atol=1e-9)


# -- rigid fitting -------------------------------------------------------------

def test_umeyama_identity(rng):
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose(umeyama_fit(p, p).matrix(), np.eye(4), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_umeyama_recovers_forward_generated_transform(seed):
    rng = np.random.default_rng(seed)
    t = random_transform(rng, max_translation=10.0)
    src = rng.normal(size=(3, 3)) * 3
    est = umeyama_fit(src, apply_transform(src, t))
    np.testing.assert_allclose(est.rotation, t.rotation, atol=1e-9)
    np.testing.assert_allclose(est.translation, t.translation, atol=1e-9)


def test_umeyama_corrects_reflection(rng):
    # a planar set mirrored through its plane has a reflection as best orthogonal fit
    src = np.c_[rng.normal(size=(6, 2)), np.zeros(6)]
    dst = src * [1, 1, -1]
    est = umeyama_fit(src, dst)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0)


@pytest.mark.parametrize("src", [
    [[0, 0, 0], [1, 1, 1], [2, 2, 2]],
    [[1, 2, 3]] * 4,
    [[0, 0, 0], [1, 0, 0]],
])
def test_umeyama_degenerate(src):
    src = np.asarray(src, float)
    with pytest.raises(DegenerateConfiguration):
        umeyama_fit(src, src)


@given(st.integers(0, 2**32 - 1), st.integers(3, 30))
def test_umeyama_property(seed, n):
    rng = np.random.default_rng(seed)
    t = random_transform(rng, max_translation=10.0)
    src = rng.normal(size=(n, 3)) * 2
    est = umeyama_fit(src, apply_transform(src, t))
    d = est.rotation.T @ t.rotation
    angle = np.arccos(np.clip((np.trace(d) - 1) / 2, -1, 1))
    assert angle < 1e-7
    assert np.linalg.norm(est.translation - t.translation) < 1e-9

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import assert_fd_close, brute_knn, central_fd, smooth_instances
from saliency_kp.descriptor import (DescriptorModel, describe, fit_pca, init_descriptor,
                                    input_gradient, layer_activations, load_descriptor, load_pca,
                                    neighborhoods, project_pca, reconstruct_pca, save_descriptor,
                                    save_pca, zero_descriptor)
from saliency_kp.errors import (BadLayerIndex, CloudTooSmall, DegenerateCovariance,
                                DimensionMismatch)


def forward_oracle(model, pts, layer):
    """Point-by-point re-evaluation of the stage chain with its own neighbour search."""
    p = model.params
    nbr, _ = brute_knn(pts, pts, model.k)
    rows = []
    for i in range(len(pts)):
        nb = pts[nbr[i]]
        u = np.tanh((pts[i] - nb.mean(axis=0)) @ p["W1"] + p["b1"])
        if layer == 1:
            rows.append(u)
            continue
        v = np.max([np.tanh((q - pts[i]) @ p["Wn"] + p["bn"]) for q in nb], axis=0)
        h = np.concatenate([u, v])
        if layer == 2:
            rows.append(h)
            continue
        h3 = np.tanh(h @ p["W3"] + p["b3"])
        rows.append(h3 if layer == 3 else h3 @ p["W4"] + p["b4"])
    return np.array(rows)


@pytest.fixture
def cloud(rng):
    return rng.uniform(-3, 3, (40, 3))


def test_zero_weights_give_zero_features_and_gradient(cloud):
    m = zero_descriptor()
    assert not describe(m, cloud).any()
    for layer in range(1, 5):
        assert not input_gradient(m, cloud, layer).values.any()


@pytest.mark.parametrize("layer", [1, 2, 3, 4])
def test_forward_matches_oracle(cloud, layer):
    m = init_descriptor(5)
    np.testing.assert_allclose(layer_activations(m, cloud, layer).values,
                               forward_oracle(m, cloud, layer), rtol=1e-12, atol=1e-13)


def test_last_layer_is_describe(cloud):
    m = init_descriptor(2)
    assert np.array_equal(layer_activations(m, cloud, 4).values, describe(m, cloud))
    assert describe(m, cloud).shape == (40, m.dim)
    assert [layer_activations(m, cloud, l).values.shape[1] for l in range(1, 5)] == m.layer_dims()


def test_layer_one_single_point_zero_bias():
    m = init_descriptor(0, k=1)
    m.params["b1"][:] = 0.0
    assert not layer_activations(m, [[0.0, 0.0, 0.0]], 1).values.any()


@pytest.mark.parametrize("layer", [0, 5, -1])
def test_bad_layer(cloud, layer):
    with pytest.raises(BadLayerIndex):
        layer_activations(init_descriptor(), cloud, layer)
    with pytest.raises(BadLayerIndex):
        input_gradient(init_descriptor(), cloud, layer)


def test_cloud_too_small():
    with pytest.raises(CloudTooSmall):
        describe(init_descriptor(k=8), np.zeros((7, 3)))


def test_shape_mismatch_rejected():
    m = init_descriptor()
    bad = dict(m.params, W3=np.zeros((5, 16)))
    with pytest.raises(DimensionMismatch):
        DescriptorModel(bad)


@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (30, 3))
    perm = rng.permutation(30)
    m = init_descriptor(seed % 7)
    for layer in (1, 2, 3, 4):
        a = layer_activations(m, pts, layer).values
        b = layer_activations(m, pts[perm], layer).values
        assert np.array_equal(a[perm], b)


@given(st.integers(0, 2**32 - 1))
def test_translation_invariance_dyadic(seed):
    # on a dyadic grid every subtraction is exact, so invariance is bitwise
    rng = np.random.default_rng(seed)
    pts = rng.integers(-4096, 4096, (30, 3)) / 1024.0
    t = rng.integers(-2**20, 2**20, 3) / 8.0
    m = init_descriptor(seed % 5)
    assert np.array_equal(describe(m, pts), describe(m, pts + t))


@given(st.integers(0, 2**32 - 1))
def test_translation_invariance_general(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, (30, 3))
    t = rng.uniform(-100, 100, 3)
    m = init_descriptor(seed % 5)
    np.testing.assert_allclose(describe(m, pts + t), describe(m, pts), atol=1e-9)


@pytest.mark.parametrize("seed,model,pts", smooth_instances(6, start=100))
def test_input_gradient_matches_finite_differences(seed, model, pts):
    for layer in (1, 2, 3, 4):
        g = input_gradient(model, pts, layer).values
        x = pts.copy()
        fd = central_fd(lambda: layer_activations(model, x, layer).values.sum(), x, 1e-5)
        assert_fd_close(g, fd)


def test_duplicate_points_share_gradient_rows():
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-3, 3, (30, 3))
        pts[7] = pts[3]
        nbr = neighborhoods(pts, 8)
        # a neighbourhood holding only one copy is a kNN tie, where symmetry cannot hold
        if np.any(np.isin(nbr, 3).any(1) != np.isin(nbr, 7).any(1)):
            continue
        checked += 1
        m = init_descriptor(seed)
        for layer in (1, 2, 3, 4):
            g = input_gradient(m, pts, layer).values
            np.testing.assert_allclose(g[3], g[7], rtol=1e-12, atol=1e-14)
    assert checked >= 10


def test_descriptor_checkpoint_bit_exact(tmp_path, cloud):
    m = init_descriptor(9, k=6)
    save_descriptor(m, tmp_path / "d.npz")
    back = load_descriptor(tmp_path / "d.npz")
    assert back.k == 6
    for n, v in m.params.items():
        assert v.tobytes() == back.params[n].tobytes()


# -- PCA ---------------------------------------------------------------------

def test_pca_rank_one_line(rng):
    direction = np.array([1.0, 2.5, -2.0, 0.5]) / np.linalg.norm([1.0, 2.5, -2.0, 0.5])
    s = rng.normal(size=200)
    X = np.outer(s, direction) + 3.0
    p = fit_pca(X, 0.9)
    assert p.n_components == 1
    proj = project_pca(p, X)[:, 0]
    oracle = (X - X.mean(0)) @ direction
    np.testing.assert_allclose(np.abs(proj), np.abs(oracle), atol=1e-9)
    np.testing.assert_allclose(proj * np.sign(direction[np.argmax(np.abs(direction))]), oracle, atol=1e-9)


def test_pca_isotropic_needs_all_axes():
    X = np.random.default_rng(0).normal(size=(20000, 4))
    p = fit_pca(X, 0.9)
    assert p.n_components == 4
    share = p.eigenvalues / p.eigenvalues.sum()
    np.testing.assert_allclose(share, 0.25, atol=0.02)


def test_pca_complete_basis_reconstructs(rng):
    X = rng.normal(size=(50, 6)) @ rng.normal(size=(6, 6))
    p = fit_pca(X, 1.0)
    assert p.n_components == 6
    np.testing.assert_allclose(reconstruct_pca(p, project_pca(p, X)), X, atol=1e-9)


def test_pca_mean_rows_project_to_zero(rng):
    X = rng.normal(size=(30, 5))
    p = fit_pca(X, 0.9)
    np.testing.assert_allclose(project_pca(p, np.tile(p.mean, (4, 1))), 0.0, atol=1e-15)


def test_pca_errors(rng):
    with pytest.raises(DegenerateCovariance):
        fit_pca(np.ones((5, 3)), 0.9)
    p = fit_pca(rng.normal(size=(10, 3)), 0.9)
    with pytest.raises(DimensionMismatch):
        project_pca(p, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        fit_pca(rng.normal(size=(10, 3)), 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_pca_properties(seed, target):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 6)) * rng.uniform(0.1, 3.0, 6)
    p = fit_pca(X, target)
    np.testing.assert_allclose(p.basis.T @ p.basis, np.eye(p.n_components), atol=1e-9)
    assert p.explained_fraction >= target * (1 - 1e-12)
    cum = np.cumsum(p.eigenvalues) / p.eigenvalues.sum()
    assert np.all(np.diff(cum) >= -1e-15)
    if p.n_components > 1:
        assert cum[p.n_components - 2] < target * (1 - 1e-12)
    lead = np.argmax(np.abs(p.basis), axis=0)
    assert np.all(p.basis[lead, np.arange(p.n_components)] > 0)


def test_pca_checkpoint_round_trip(tmp_path, rng):
    p = fit_pca(rng.normal(size=(30, 5)), 0.8)
    save_pca(p, tmp_path / "p.npz")
    q = load_pca(tmp_path / "p.npz")
    assert q.basis.tobytes() == p.basis.tobytes() and q.explained_fraction == p.explained_fraction

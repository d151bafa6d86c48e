import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from gridpost.errors import ConfigError, DimensionError
from gridpost.pca import pca_decode, pca_encode, pca_fit, reconstruction_mse, sign_convention


def _eig_oracle(x):
    """Brute-force covariance eigendecomposition, descending."""
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(xc.T @ xc / len(x))
    order = np.argsort(w)[::-1]
    return w[order], v[:, order].T


def test_line_in_3d_exact():
    t = np.linspace(-2, 3, 12)
    x = np.outer(t, [1.0, -2.0, 0.5]) + np.array([4.0, 0.0, 1.0])
    m = pca_fit(x, 1)
    assert reconstruction_mse(m, x) < 1e-28
    np.testing.assert_allclose(np.abs(m.components[0]), np.abs([1.0, -2.0, 0.5]) / np.sqrt(5.25), atol=1e-12)


def test_toy_matrix_matches_eigendecomposition(rng):
    x = rng.normal(size=(6, 4))
    w, v = _eig_oracle(x)
    m = pca_fit(x, 3)
    np.testing.assert_allclose(m.eigenvalues, w[:3], atol=1e-8)
    np.testing.assert_allclose(m.components, sign_convention(v[:3]), atol=1e-8)
    assert m.tail_variance == pytest.approx(w[3:].sum(), abs=1e-10)


def test_full_rank_recovery(rng):
    x = rng.normal(size=(8, 5)) @ rng.normal(size=(5, 20))
    m = pca_fit(x, 5)  # centred rank is 5 because N=8 > 5
    assert reconstruction_mse(m, x) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_subspace_matches_oracle(seed, h):
    x = np.random.default_rng(seed).normal(size=(8, 6))
    w, v = _eig_oracle(x)
    m = pca_fit(x, h)
    # the leading-h subspace is only defined when eigenvalues h and h+1 are separated
    if h < 6 and abs(w[h - 1] - w[h]) < 1e-6:
        return
    assert np.max(subspace_angles(m.components.T, v[:h].T)) < 1e-6
    assert m.train_mse() == pytest.approx(w[h:].sum() / 6, abs=1e-8)


def test_training_mse_is_tail_eigenvalue_sum(rng):
    x = rng.random((40, 9, 9))
    m = pca_fit(x, 4)
    w, _ = _eig_oracle(x.reshape(40, -1))
    assert reconstruction_mse(m, x) == pytest.approx(w[4:].sum() / 81, abs=1e-10)
    assert m.train_mse() == pytest.approx(reconstruction_mse(m, x), abs=1e-12)


def test_mse_strictly_decreasing_in_h(rng):
    x = rng.random((30, 50))
    mses = [reconstruction_mse(pca_fit(x, h), x) for h in range(1, 12)]
    assert all(a > b for a, b in zip(mses, mses[1:]))


def test_beats_random_projections(rng):
    x = rng.random((60, 30)) + np.outer(rng.normal(size=60), rng.normal(size=30))
    h = 3
    best = reconstruction_mse(pca_fit(x, h), x)
    xc = x - x.mean(axis=0)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(30, h)))
        rec = xc @ q @ q.T
        assert best <= np.mean((xc - rec) ** 2) + 1e-15


def test_encode_mean_is_zero(rng):
    x = rng.random((20, 7))
    m = pca_fit(x, 3)
    np.testing.assert_allclose(pca_encode(m, m.mean), 0.0, atol=1e-14)


def test_encode_component_direction(rng):
    m = pca_fit(rng.random((20, 7)), 3)
    code = pca_encode(m, m.mean + 2.5 * m.components[1])
    np.testing.assert_allclose(code, [0.0, 2.5, 0.0], atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_projection_idempotent(seed):
    g = np.random.default_rng(seed)
    m = pca_fit(g.random((15, 10)), 4)
    x = g.random(10)
    c = pca_encode(m, x)
    np.testing.assert_allclose(pca_encode(m, pca_decode(m, c)), c, atol=1e-10)


def test_components_orthonormal(rng):
    m = pca_fit(rng.random((25, 16)), 5)
    np.testing.assert_allclose(m.components @ m.components.T, np.eye(5), atol=1e-12)
    assert np.all(np.diff(m.eigenvalues) <= 0)


def test_sign_convention_stable(rng):
    x = rng.random((25, 16))
    a = pca_fit(x, 4).components
    b = pca_fit(x[::-1], 4).components
    np.testing.assert_allclose(a, b, atol=1e-10)
    idx = np.argmax(np.abs(a), axis=1)
    assert np.all(a[np.arange(4), idx] > 0)


def test_field_shape_roundtrip(rng):
    x = rng.random((12, 5, 4))
    m = pca_fit(x, 2)
    assert m.field_shape == (5, 4)
    assert pca_encode(m, x[0]).shape == (2,)
    assert pca_decode(m, pca_encode(m, x)).shape == (12, 5, 4)


def test_validation(rng):
    x = rng.random((5, 3))
    with pytest.raises(ConfigError):
        pca_fit(x, 0)
    with pytest.raises(ConfigError):
        pca_fit(x, 5)
    with pytest.raises(ConfigError):
        pca_fit(rng.random((10, 3)), 4)
    m = pca_fit(x, 2)
    with pytest.raises(DimensionError):
        pca_decode(m, np.zeros(3))
    with pytest.raises(DimensionError):
        pca_encode(m, np.zeros(4))

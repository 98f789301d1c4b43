import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from specflow import kinematics as kin, manifold as M, synth


def affine_plane_data(n=50, seed=0):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=160)
    u, v = rng.normal(size=(2, 160))
    ab = rng.normal(size=(n, 2)) * [3.0, 0.5]
    return (mu + ab[:, :1] * u + ab[:, 1:] * v).reshape(n, 80, 2)


def test_exact_low_rank_reconstruction():
    x = affine_plane_data()
    b = M.fit(x, 2)
    rec = M.reconstruct(b, M.project(b, x))
    assert np.max(np.abs(rec - x)) < 1e-9


def test_rank_deficiency_rejected():
    with pytest.raises(M.RankDeficiencyError):
        M.fit(affine_plane_data(), 3)


def test_isotropic_gaussian_ratios():
    x = np.random.default_rng(1).standard_normal((20000, 2, 2))
    b = M.fit(x, 4)
    np.testing.assert_allclose(b.explained_variance_ratio, 0.25, atol=0.01)
    assert b.explained_variance_ratio.sum() == pytest.approx(1.0)


def test_fit_preconditions():
    x = np.random.default_rng(2).standard_normal((5, 80, 2))
    with pytest.raises(ValueError):
        M.fit(x, 5)  # needs k + 1 samples
    with pytest.raises(ValueError):
        M.fit(x, 0)
    with pytest.raises(ValueError):
        M.fit(x, 161)


def test_basis_invariants(small_basis):
    b = small_basis
    np.testing.assert_allclose(b.basis @ b.basis.T, np.eye(b.k), atol=1e-7)
    assert np.all(b.scales > 0)
    evr = b.explained_variance_ratio
    assert np.all((evr > 0) & (evr <= 1)) and np.all(np.diff(evr) <= 0)


def test_project_mean_and_unit_mode(small_basis):
    b = small_basis
    np.testing.assert_allclose(M.project(b, b.mean.reshape(80, 2)), 0.0, atol=1e-12)
    x = (b.mean + b.scales[0] * b.basis[0]).reshape(80, 2)
    expected = np.zeros(b.k)
    expected[0] = 1.0
    np.testing.assert_allclose(M.project(b, x), expected, atol=1e-9)


def test_reconstruct_zero_is_mean(small_basis):
    np.testing.assert_allclose(M.reconstruct(small_basis, np.zeros(6)).ravel(), small_basis.mean)


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_round_trip_on_manifold(zs):
    b = _basis_cache()
    z = np.array(zs)
    np.testing.assert_allclose(M.project(b, M.reconstruct(b, z)), z, atol=1e-9)


_CACHE = {}


def _basis_cache():
    if "b" not in _CACHE:
        x = np.array([synth.generate_expert(i).future for i in range(200)])
        _CACHE["b"] = M.fit(x, 6)
    return _CACHE["b"]


def test_whitened_training_variance(small_dataset, small_basis):
    z = M.project(small_basis, np.array([s.future for s in small_dataset.train]))
    np.testing.assert_allclose(z.var(axis=0, ddof=1), 1.0, atol=0.05)


def test_reconstruction_error_monotone_in_k(small_dataset):
    train = np.array([s.future for s in small_dataset.train])
    val = np.array([s.future for s in small_dataset.val if s.anomaly_tag == "nominal"])
    mean, vals, vecs = M.spectrum(train)
    errs = []
    for k in (1, 2, 4, 6, 8, 12):
        b = M.basis_from_spectrum(mean, vals, vecs, k)
        errs.append(np.mean(np.linalg.norm((M.reconstruct(b, M.project(b, val)) - val).reshape(len(val), -1), axis=1)))
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))


def test_reconstruction_residual_equals_truncation(small_dataset):
    x = np.array([s.future for s in small_dataset.train[:20]]).reshape(20, -1)
    mean, vals, vecs = M.spectrum(np.array([s.future for s in small_dataset.train]))
    b = M.basis_from_spectrum(mean, vals, vecs, 4)
    rec = M.reconstruct(b, M.project(b, x)).reshape(20, -1)
    xc = x - mean
    resid = xc - (xc @ vecs[:, :4]) @ vecs[:, :4].T
    np.testing.assert_allclose(rec - x, -resid, atol=1e-10)


def test_full_rank_complete_basis():
    x = np.random.default_rng(3).standard_normal((400, 80, 2))
    b = M.fit(x, 160)
    assert np.max(np.abs(M.reconstruct(b, M.project(b, x)) - x)) < 1e-7


def test_traverse_identity(small_basis):
    (t,) = M.traverse(small_basis, 0, [0.0])
    np.testing.assert_allclose(t.ravel(), small_basis.mean)
    with pytest.raises(IndexError):
        M.traverse(small_basis, 6, [0.0])


def test_traverse_fixed_offsets(small_basis):
    fixed = np.arange(6) * 0.1
    (t,) = M.traverse(small_basis, 2, [1.5], fixed)
    z = M.project(small_basis, t)
    np.testing.assert_allclose(z, [0.0, 0.1, 1.5, 0.3, 0.4, 0.5], atol=1e-9)


def test_pc1_is_progress_mode(small_basis):
    offs = np.linspace(-2, 2, 9)
    lengths = [np.sum(kin.segment_lengths(t * 50)) for t in M.traverse(small_basis, 0, offs)]
    assert spearmanr(offs, lengths).statistic == pytest.approx(1.0)


def test_pc2_is_curvature_mode(small_basis):
    lo, hi = M.traverse(small_basis, 1, [-2.0, 2.0])
    h_lo, h_hi = kin.headings(lo * 50)[-1], kin.headings(hi * 50)[-1]
    assert h_lo * h_hi < 0


def test_truncation_smooths_jitter(small_dataset, small_basis):
    experts = [s for s in small_dataset.val if s.anomaly_tag == "nominal"][:30]
    noisy = np.array([synth.inject_anomaly(s, "jitter", seed=i).future for i, s in enumerate(experts)])
    rec = M.reconstruct(small_basis, M.project(small_basis, noisy))
    jerk = lambda a: np.mean([np.mean(np.linalg.norm(kin.jerk_vectors(t * 50), axis=1)) for t in a])
    assert jerk(rec) <= jerk(noisy)


def test_digest_changes_with_content(small_basis):
    other = M.SpectralBasis(small_basis.mean + 1e-12, small_basis.basis, small_basis.scales, small_basis.explained_variance_ratio)
    assert other.digest() != small_basis.digest()
    assert len(small_basis.digest()) == 64

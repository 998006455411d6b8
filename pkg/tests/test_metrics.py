import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crfgan.errors import FingerprintError, ParameterError
from crfgan.metrics import FeatureExtractor, FeatureSet, extract_features, fid, median_bandwidth, mmd
from crfgan.volume import PhantomSpec, Volume3D, make_phantom


def standardized(x):
    return (x - x.mean()) / x.std(ddof=1)


class TestFid:
    def test_identity(self, rng):
        a = FeatureSet(rng.normal(size=(200, 16)))
        assert fid(a, a) <= 1e-6

    def test_analytic_gaussians(self, rng):
        a = standardized(rng.normal(size=10_000))
        b = standardized(rng.normal(size=10_000)) + 3.0
        assert fid(FeatureSet(a), FeatureSet(b)) == pytest.approx(9.0, abs=1e-9)

    def test_multivariate_closed_form(self, rng):
        # diagonal covariances: FID = |mu|^2 + sum (sa - sb)^2
        x = rng.normal(size=(4000, 3))
        x = (x - x.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(x, rowvar=False))).T
        sa, sb = np.array([1.0, 2.0, 0.5]), np.array([3.0, 1.0, 0.5])
        mu = np.array([1.0, -2.0, 0.0])
        ref = mu @ mu + np.sum((sa - sb) ** 2)
        assert fid(FeatureSet(x * sa), FeatureSet(x * sb + mu)) == pytest.approx(ref, rel=1e-9)

    def test_symmetric_and_permutation_invariant(self, rng):
        a = FeatureSet(rng.normal(size=(100, 8)))
        b = FeatureSet(rng.normal(size=(120, 8)) * 1.3 + 0.2)
        assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)
        perm = FeatureSet(b.features[rng.permutation(120)])
        assert fid(a, perm) == pytest.approx(fid(a, b), abs=1e-9)

    def test_monotone_along_mean_path(self, rng):
        a = rng.normal(size=(500, 4))
        b = rng.normal(size=(500, 4)) + 2.0
        shift = a.mean(0) - b.mean(0)
        vals = [fid(FeatureSet(a), FeatureSet(b + t * shift)) for t in np.linspace(0, 1, 11)]
        assert all(y < x for x, y in zip(vals, vals[1:]))

    def test_errors(self, rng):
        with pytest.raises(FingerprintError):
            fid(FeatureSet(rng.normal(size=(5, 2)), "x"), FeatureSet(rng.normal(size=(5, 2)), "y"))
        with pytest.raises(ParameterError):
            fid(FeatureSet(np.zeros((1, 2))), FeatureSet(np.zeros((5, 2))))
        with pytest.raises(ParameterError):
            FeatureSet(np.array([[np.nan]]))


class TestMmd:
    def test_identity(self, rng):
        a = FeatureSet(rng.normal(size=(300, 5)))
        assert mmd(a, a) <= 1e-9

    @pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
    def test_singletons(self, t):
        a, b = FeatureSet(np.zeros((1, 2))), FeatureSet(np.array([[t, 0.0]]))
        # pooled median distance is t itself
        assert mmd(a, b) == pytest.approx(2 - 2 * np.exp(-0.5), abs=1e-12)
        assert mmd(a, b, bandwidth=2.0) == pytest.approx(2 - 2 * np.exp(-t * t / 8), abs=1e-12)

    def test_separation(self, rng):
        a = FeatureSet(rng.normal(size=(200, 3)))
        near = FeatureSet(rng.normal(size=(200, 3)) + 0.1)
        far = FeatureSet(rng.normal(size=(200, 3)) + 10.0)
        assert mmd(a, far) > mmd(a, near)

    def test_permutation_invariant(self, rng):
        a = rng.normal(size=(50, 3))
        b = rng.normal(size=(60, 3)) + 1
        v = mmd(FeatureSet(a), FeatureSet(b))
        assert mmd(FeatureSet(a[::-1]), FeatureSet(b[rng.permutation(60)])) == pytest.approx(v, abs=1e-12)

    def test_median_subsample_on_large_sets(self, rng):
        z = rng.normal(size=(9000, 2))
        assert median_bandwidth(z) == pytest.approx(np.sqrt(2 * 2 * np.log(2)) * 1.0, rel=0.05)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
    def test_nonnegative(self, m, n, seed):
        r = np.random.default_rng(seed)
        assert mmd(FeatureSet(r.normal(size=(m, 3))), FeatureSet(r.normal(size=(n, 3)))) >= 0.0


class TestExtractor:
    def test_deterministic_rows(self):
        v = make_phantom(PhantomSpec(shape=(32, 32, 32), seed=1))
        f = extract_features([v, v], FeatureExtractor(0, 32)).features
        assert f.shape == (2, 32)
        np.testing.assert_array_equal(f[0], f[1])

    def test_fingerprints(self):
        assert FeatureExtractor(0).fingerprint != FeatureExtractor(1).fingerprint
        assert FeatureExtractor(3).fingerprint == FeatureExtractor(3).fingerprint

    def test_finite_on_extremes(self):
        vols = [Volume3D(np.full((32, 32, 32), s, np.float32)) for s in (-1.0, 1.0)]
        assert np.isfinite(extract_features(vols, FeatureExtractor(0)).features).all()

    def test_mixed_shapes(self):
        with pytest.raises(ParameterError):
            extract_features([Volume3D(np.zeros((8, 8, 8), np.float32)),
                              Volume3D(np.zeros((16, 8, 8), np.float32))], FeatureExtractor(0))

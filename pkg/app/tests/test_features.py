import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from app.models.model import SynthConfig
from app.models.spectral import FdaProjection, GaussianStats, SignatureSet
from app.services import features, synth
from app.utils.errors import ConfigurationError, DimensionMismatchError, InsufficientDataError, LabelError


def _gaussian(mean, cov, n=100):
    return GaussianStats(mean=np.asarray(mean, dtype=float), covariance=np.asarray(cov, dtype=float), sample_count=n)


def _random_gaussian(seed, d=4):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    return _gaussian(rng.normal(0, 3, d), a @ a.T + 0.1 * np.eye(d))


class TestRegularization:
    def test_well_conditioned_matrix_is_untouched(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        out, applied = features.regularize_covariance(cov)
        assert not applied
        np.testing.assert_array_equal(out, cov)

    def test_singular_matrix_gets_trace_scaled_ridge(self):
        cov = np.array([[4.0, 2.0], [2.0, 1.0]])
        out, applied = features.regularize_covariance(cov)
        assert applied
        np.testing.assert_allclose(out, cov + 1e-6 * 2.5 * np.eye(2))
        assert np.linalg.eigvalsh(out)[0] > 0

    def test_zero_matrix_uses_unit_scale(self):
        out, applied = features.regularize_covariance(np.zeros((3, 3)))
        assert applied
        np.testing.assert_allclose(out, 1e-6 * np.eye(3))


class TestGaussianFit:
    def test_sample_moments(self, rng):
        values = rng.normal(5.0, 2.0, size=(500, 3))
        stats = features.fit_gaussian(SignatureSet(values, trials=0, classes=0))
        np.testing.assert_allclose(stats.mean, values.mean(axis=0))
        np.testing.assert_allclose(stats.covariance, np.cov(values, rowvar=False, ddof=1))
        assert stats.sample_count == 500
        assert not stats.regularized

    def test_identical_signatures_are_regularized(self):
        stats = features.fit_gaussian(SignatureSet(np.ones((5, 3)), trials=0, classes=0))
        assert stats.regularized
        np.testing.assert_allclose(stats.covariance, 1e-6 * np.eye(3))

    def test_too_few_samples(self):
        with pytest.raises(InsufficientDataError):
            features.fit_gaussian(SignatureSet(np.ones((1, 3)), trials=0, classes=0))


class TestBhattacharyya:
    def test_identical_gaussians(self):
        g = _random_gaussian(3)
        feature = features.bhattacharyya(g, g)
        assert feature.d_b1 == 0.0
        assert feature.d_b2 == pytest.approx(0.0, abs=1e-12)
        assert feature.d_b == pytest.approx(0.0, abs=1e-12)

    def test_mean_shift_term(self):
        feature = features.bhattacharyya(_gaussian([2.0], [[1.0]]), _gaussian([0.0], [[1.0]]))
        assert feature.d_b1 == pytest.approx(0.5)
        assert feature.d_b2 == pytest.approx(0.0, abs=1e-15)

    def test_covariance_term(self):
        feature = features.bhattacharyya(_gaussian([0.0], [[1.0]]), _gaussian([0.0], [[4.0]]))
        assert feature.d_b1 == 0.0
        assert feature.d_b2 == pytest.approx(0.5 * np.log(2.5 / 2.0))

    def test_matches_closed_form(self):
        a, b = _random_gaussian(1), _random_gaussian(2)
        pooled = (a.covariance + b.covariance) / 2
        diff = a.mean - b.mean
        expected = diff @ np.linalg.solve(pooled, diff) / 8 + 0.5 * np.log(
            np.linalg.det(pooled) / np.sqrt(np.linalg.det(a.covariance) * np.linalg.det(b.covariance))
        )
        assert features.bhattacharyya(a, b).d_b == pytest.approx(expected, rel=1e-9)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
    def test_symmetric_and_nonnegative(self, seed_a, seed_b):
        a, b = _random_gaussian(seed_a), _random_gaussian(seed_b)
        forward = features.bhattacharyya(a, b)
        backward = features.bhattacharyya(b, a)
        assert forward.d_b1 >= 0 and forward.d_b2 >= 0
        assert forward.d_b == pytest.approx(backward.d_b, rel=1e-9, abs=1e-12)

    def test_unit_mean_shift_in_one_dimension(self):
        feature = features.bhattacharyya(_gaussian([1.0], [[1.0]]), _gaussian([0.0], [[1.0]]))
        assert feature.d_b == pytest.approx(0.125, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_invariant_under_affine_maps(self, seed):
        rng = np.random.default_rng(seed)
        a, b = _random_gaussian(rng.integers(2**32)), _random_gaussian(rng.integers(2**32))
        left, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        right, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        transform = left @ np.diag(rng.uniform(0.5, 2.0, 4)) @ right
        shift = rng.normal(0, 10, 4)

        def moved(g):
            return _gaussian(transform @ g.mean + shift, transform @ g.covariance @ transform.T)

        expected = features.bhattacharyya(a, b).d_b
        assert features.bhattacharyya(moved(a), moved(b)).d_b == pytest.approx(expected, rel=1e-6, abs=1e-9)

    @given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.0, 5.0), min_size=2, max_size=8))
    def test_grows_with_drift_along_a_direction(self, seed, steps):
        rng = np.random.default_rng(seed)
        a, b = _random_gaussian(rng.integers(2**32)), _random_gaussian(rng.integers(2**32))
        direction = rng.standard_normal(4)
        direction /= np.linalg.norm(direction)
        distances = [
            features.bhattacharyya(_gaussian(a.mean + t * direction, a.covariance), _gaussian(a.mean, b.covariance)).d_b
            for t in sorted(steps)
        ]
        assert np.all(np.diff(distances) >= -1e-9)

    def test_heated_classes_move_away_from_pure_oil(self):
        config = SynthConfig(trials=1, covariance_inflation=0.0, seed=6)
        trial = synth.generate(config).trials[0]
        reference = features.fit_gaussian(trial.for_class(0))
        distances = [features.bhattacharyya(features.fit_gaussian(trial.for_class(c)), reference).d_b for c in range(6)]
        assert np.all(np.diff(distances) > 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_no_drift_stays_near_zero(self, seed):
        config = SynthConfig(
            trials=1,
            classes=2,
            signatures_per_class=2000,
            drift_step=0.0,
            covariance_inflation=0.0,
            critical_classes=(),
            seed=seed,
        )
        trial = synth.generate(config).trials[0]
        target, reference = (features.fit_gaussian(trial.for_class(c)) for c in (1, 0))
        assert features.bhattacharyya(target, reference).d_b <= 0.05

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            features.bhattacharyya(_random_gaussian(0, d=3), _random_gaussian(0, d=4))

    def test_ids_are_carried(self):
        g = _random_gaussian(5)
        feature = features.bhattacharyya(g, g, target_id="set-7", reference_id="trial-0")
        assert (feature.target_id, feature.reference_id) == ("set-7", "trial-0")


class TestFda:
    @pytest.fixture
    def separated(self, rng):
        n = 200
        noise = rng.standard_normal((3 * n, 3))
        shift = np.repeat([0.0, 6.0, 12.0], n)
        values = noise + np.outer(shift, [1.0, 0.0, 0.0])
        return SignatureSet(values, trials=0, classes=np.repeat([0, 1, 2], n))

    def test_discriminant_follows_the_class_axis(self, separated):
        projection = features.fit_fda([separated], k=1)
        direction = projection.basis[:, 0] / np.linalg.norm(projection.basis[:, 0])
        assert abs(direction[0]) > 0.99
        assert projection.ratios[0] > 10

    def test_ratios_are_non_increasing(self, separated):
        projection = features.fit_fda([separated], k=2)
        assert projection.output_dim == 2
        assert projection.ratios[0] >= projection.ratios[1] >= 0

    def test_projection_shape(self, separated):
        projection = features.fit_fda([separated], k=2)
        projected = features.project(projection, separated)
        assert projected.values.shape == (len(separated), 2)
        np.testing.assert_array_equal(projected.classes, separated.classes)

    @pytest.mark.parametrize("k", [0, 3])
    def test_dimension_out_of_range(self, separated, k):
        with pytest.raises(ConfigurationError):
            features.fit_fda([separated], k=k)

    def test_needs_labels(self):
        unlabelled = SignatureSet(np.random.default_rng(0).standard_normal((10, 2)), trials=0, classes=-1)
        with pytest.raises(LabelError):
            features.fit_fda([unlabelled], k=1)

    def test_project_dimension_mismatch(self):
        projection = FdaProjection(basis=np.eye(3)[:, :1], ratios=np.ones(1))
        with pytest.raises(DimensionMismatchError):
            features.project(projection, SignatureSet(np.ones((2, 4)), trials=0, classes=0))


class TestReferences:
    def test_single_reference_mixture_is_identity(self):
        g = _random_gaussian(9)
        assert features.reference_mixture([g], [1.0]) is g

    def test_moment_matched_mixture(self):
        mixed = features.reference_mixture([_gaussian([0.0], [[1.0]]), _gaussian([2.0], [[1.0]])], [0.5, 0.5])
        np.testing.assert_allclose(mixed.mean, [1.0])
        np.testing.assert_allclose(mixed.covariance, [[2.0]])
        assert mixed.sample_count == 200

    def test_trial_references_skip_trials_without_pure_oil(self, rng):
        values = rng.standard_normal((12, 2))
        signatures = SignatureSet(values, trials=[0] * 6 + [1] * 6, classes=[0, 0, 0, 1, 1, 1] + [0, 1, 1, 1, 1, 1])
        references = features.trial_references(signatures)
        assert list(references) == [0]
        np.testing.assert_allclose(references[0].mean, values[:3].mean(axis=0))

    def test_mixed_reference_needs_every_trial(self):
        with pytest.raises(LabelError, match="trial"):
            features.mixed_reference({0: _random_gaussian(0)}, {0: 0.5, 3: 0.5})

    def test_set_distance_in_projected_space(self, rng):
        signatures = SignatureSet(rng.standard_normal((50, 3)) + [4.0, 0.0, 0.0], trials=0, classes=1)
        projection = FdaProjection(basis=np.array([[1.0], [0.0], [0.0]]), ratios=np.ones(1))
        reference = _gaussian([0.0], [[1.0]])
        distance = features.set_distance(signatures, reference, projection)
        direct = features.bhattacharyya(features.fit_gaussian(features.project(projection, signatures)), reference)
        assert distance == pytest.approx(direct.d_b)
        assert distance > 1.0

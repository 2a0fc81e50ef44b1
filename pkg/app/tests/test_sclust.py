import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.metrics import adjusted_rand_score

from app.models.model import ClusterConfig, KMeansSettings, SynthConfig
from app.models.spectral import SignatureSet, SweepResult
from app.services import sclust, synth
from app.utils.errors import (
    ClusteringError,
    ConfigurationError,
    EigensolverError,
    InsufficientDataError,
    LabelError,
)
from app.utils.linalg import symmetric_eigvalsh


def _planted(rng, groups=3, per_group=40, spread=0.3, separation=20.0):
    """Blobs at (separation/sqrt(2)) e_i, pairwise ``separation`` apart, labelled and listed blob by blob."""
    centres = (separation / np.sqrt(2.0)) * np.eye(groups)
    values = np.vstack([c + rng.normal(0, spread, (per_group, groups)) for c in centres])
    return SignatureSet(values, trials=0, classes=np.repeat(np.arange(groups), per_group))


def _chains(rng):
    """1-D points in chains of 2-5; links within a chain are at most 2 apart, chains at least 60 apart."""
    sizes = rng.integers(2, 6, size=int(rng.integers(1, 6)))
    positions, start = [], 0.0
    for size in sizes:
        chain = start + np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 2.0, size - 1))])
        positions.extend(chain)
        start = chain[-1] + rng.uniform(60.0, 120.0)
    return rng.permutation(np.asarray(positions))[:, None], sizes.size


def _union_find_components(weights):
    parent = list(range(weights.shape[0]))

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(*np.nonzero(weights), strict=True):
        parent[root(int(i))] = root(int(j))
    return len({root(i) for i in range(len(parent))})


def _sweep(g3, g4, sigmas=(1.0, 2.0, 3.0, 4.0, 5.0)):
    """Sweep whose two searched modes have the given gap curves."""
    g3, g4 = np.asarray(g3, dtype=float), np.asarray(g4, dtype=float)
    zeros = np.zeros_like(g3)
    eigenvalues = np.column_stack([zeros, zeros, zeros, g3, g3 + g4])
    return SweepResult(sigmas=np.asarray(sigmas), eigenvalues=eigenvalues, modes=(3, 4))


class TestGraph:
    def test_laplacian_properties(self, rng):
        graph = sclust.build_graph(SignatureSet(rng.standard_normal((15, 3)), trials=0, classes=0), sigma=1.5)
        assert np.all(np.diag(graph.weights) == 0)
        np.testing.assert_allclose(graph.weights, graph.weights.T)
        np.testing.assert_allclose(graph.degrees, graph.weights.sum(axis=1))
        values, vectors = np.linalg.eigh(graph.laplacian)
        assert values[0] == pytest.approx(0.0, abs=1e-10)
        assert values[-1] <= 2.0 + 1e-10
        expected = np.sqrt(graph.degrees) / np.linalg.norm(np.sqrt(graph.degrees))
        np.testing.assert_allclose(np.abs(vectors[:, 0]), expected, atol=1e-8)

    def test_isolated_signature(self):
        far_apart = SignatureSet(np.array([[0.0], [1000.0]]), trials=0, classes=0)
        with pytest.raises(ClusteringError, match="zero degree"):
            sclust.build_graph(far_apart, sigma=1.0)

    def test_one_zero_eigenvalue_per_component(self):
        values = np.array([[0.0], [0.5], [1000.0], [1000.4], [2000.0], [2000.3], [2000.1]])
        sweep = sclust.sigma_sweep(SignatureSet(values, trials=0, classes=0), sigmas=[1.0], modes=(3,))
        np.testing.assert_allclose(sweep.eigenvalues[0, :3], 0.0, atol=1e-8)
        assert sweep.eigenvalues[0, 3] > 0.5
        assert sweep.gaps[0, 0] == pytest.approx(sweep.eigenvalues[0, 3] - sweep.eigenvalues[0, 2])

    def test_zero_eigenvalues_count_connected_components(self):
        for seed in range(200):
            values, chains = _chains(np.random.default_rng(seed))
            graph = sclust.build_graph(SignatureSet(values, trials=0, classes=0), sigma=1.0)
            components = _union_find_components(graph.weights > 0)
            eigenvalues = symmetric_eigvalsh(graph.laplacian)
            assert components == chains
            assert int(np.sum(eigenvalues < 1e-8)) == components, f"seed {seed}"


class TestSigmaSweep:
    def test_shapes_and_default_grid(self, rng):
        signatures = SignatureSet(rng.standard_normal((20, 2)), trials=0, classes=0)
        sweep = sclust.sigma_sweep(signatures)
        assert sweep.sigmas.size == 60
        assert sweep.sigmas[0] == pytest.approx(1.0)
        assert sweep.sigmas[-1] == pytest.approx(100.0)
        assert sweep.eigenvalues.shape == (60, 7)
        assert sweep.gaps.shape == (60, 4)
        assert np.all(np.diff(sweep.eigenvalues, axis=1) >= -1e-12)

    def test_solvers_agree(self, rng):
        signatures = SignatureSet(rng.standard_normal((24, 3)), trials=0, classes=0)
        sigmas = [1.0, 2.0, 5.0]
        jacobi = sclust.sigma_sweep(signatures, sigmas, solver="jacobi")
        lapack = sclust.sigma_sweep(signatures, sigmas, solver="lapack")
        np.testing.assert_allclose(jacobi.eigenvalues, lapack.eigenvalues, atol=1e-8)

    @pytest.mark.parametrize("sigmas", [[], [0.5, 1.0], [2.0, 1.5]])
    def test_invalid_grid(self, rng, sigmas):
        signatures = SignatureSet(rng.standard_normal((10, 2)), trials=0, classes=0)
        with pytest.raises(ConfigurationError):
            sclust.sigma_sweep(signatures, sigmas)

    def test_too_few_signatures_for_modes(self, rng):
        with pytest.raises(InsufficientDataError):
            sclust.sigma_sweep(SignatureSet(rng.standard_normal((5, 2)), trials=0, classes=0), [1.0])

    def test_eigensolver_failure_names_sigma(self, rng, monkeypatch):
        def broken(*args, **kwargs):
            raise EigensolverError("no convergence")

        monkeypatch.setattr(sclust, "symmetric_eigvalsh", broken)
        with pytest.raises(EigensolverError) as info:
            sclust.sigma_sweep(SignatureSet(rng.standard_normal((10, 2)), trials=0, classes=0), [3.0])
        assert info.value.sigma == 3.0
        assert "sigma=3" in str(info.value)


class TestModeSelection:
    def test_lgv_takes_the_tallest_gap(self):
        sweep = _sweep([0.125, 0.875, 0.125, 0.125, 0.125], [0.625, 0.625, 0.625, 0.625, 0.25])
        assert sclust.select_lgv(sweep) == (3, 2.0)

    def test_lbw_takes_the_widest_half_max_span(self):
        sweep = _sweep([0.125, 0.875, 0.125, 0.125, 0.125], [0.625, 0.625, 0.625, 0.625, 0.25])
        np.testing.assert_allclose(sclust.lbw_bandwidths(sweep), [1.0, 3.5])
        assert sclust.select_lbw(sweep) == (4, 1.0)

    def test_lbw_counts_weak_modes_by_default(self):
        sweep = _sweep([0.125, 0.875, 0.125, 0.125, 0.125], [0.375] * 5)
        np.testing.assert_allclose(sclust.lbw_bandwidths(sweep), [1.0, 4.0])
        assert sclust.select_lbw(sweep) == (4, 1.0)

    def test_low_flat_mode_outlasts_a_tall_spike(self):
        sweep = _sweep([0.2] * 6, [0.0, 0.9, 0.0, 0.0, 0.0, 0.0], sigmas=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0))
        np.testing.assert_allclose(sclust.lbw_bandwidths(sweep), [5.0, 1.0])
        assert sclust.select_lbw(sweep) == (3, 1.0)
        assert sclust.select_mode(sweep, "LBW", ClusterConfig().lbw_peak_floor).mode == 3

    def test_peak_floor_is_opt_in(self):
        spike = _sweep([0.2] * 6, [0.0, 0.9, 0.0, 0.0, 0.0, 0.0], sigmas=(1.0, 2.0, 3.0, 4.0, 5.0, 6.0))
        np.testing.assert_allclose(sclust.lbw_bandwidths(spike, peak_floor=0.5), [0.0, 1.0])
        assert sclust.select_lbw(spike, peak_floor=0.5) == (4, 2.0)
        weak = _sweep([0.125, 0.875, 0.125, 0.125, 0.125], [0.375] * 5)
        np.testing.assert_allclose(sclust.lbw_bandwidths(weak, peak_floor=0.5), [1.0, 0.0])
        assert sclust.select_lbw(weak, peak_floor=0.5)[0] == 3

    def test_select_mode_records_choice(self):
        sweep = sclust.select_mode(_sweep([0.125, 0.875, 0.125, 0.125, 0.125], [0.625] * 4 + [0.25]), "LGV")
        assert (sweep.mode, sweep.sigma, sweep.algorithm) == (3, 2.0, "LGV")

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigurationError):
            sclust.select_mode(_sweep([0.125] * 5, [0.125] * 5), "MAX")

    @given(gaps=arrays(np.float64, (6, 3), elements=st.floats(0.0, 1.0)), exponent=st.integers(1, 4))
    def test_selection_follows_a_rescaled_sigma_grid(self, gaps, exponent):
        sigmas = np.array([1.0, 1.5, 2.5, 4.0, 7.0, 11.0])
        eigenvalues = np.column_stack([np.zeros((6, 3)), np.cumsum(gaps, axis=1)])
        base = SweepResult(sigmas=sigmas, eigenvalues=eigenvalues, modes=(3, 4, 5))
        scaled = SweepResult(sigmas=sigmas * 2.0**exponent, eigenvalues=eigenvalues, modes=(3, 4, 5))
        for select in (sclust.select_lgv, sclust.select_lbw):
            mode, sigma = select(base)
            assert select(scaled) == (mode, sigma * 2.0**exponent)


class TestSpectralCluster:
    def test_recovers_planted_partition(self, rng):
        signatures = _planted(rng)
        report = sclust.spectral_cluster(signatures, k=3, sigma=2.0, seed=5)
        np.testing.assert_array_equal(report.assignments, signatures.classes)
        assert report.majorities == {0: 0, 1: 1, 2: 2}
        assert report.purities == {0: 1.0, 1: 1.0, 2: 1.0}
        assert report.critical == frozenset({1, 2})

    def test_same_seed_same_assignments(self, rng):
        signatures = _planted(rng, groups=4, per_group=15, spread=2.0)
        first = sclust.spectral_cluster(signatures, k=4, sigma=3.0, seed=9)
        second = sclust.spectral_cluster(signatures, k=4, sigma=3.0, seed=9)
        np.testing.assert_array_equal(first.assignments, second.assignments)

    def test_unlabelled_signatures_have_no_critical_set(self, rng):
        planted = _planted(rng)
        report = sclust.spectral_cluster(SignatureSet(planted.values, trials=0, classes=-1), k=3, sigma=2.0)
        assert report.critical == frozenset()
        assert report.majorities == {}

    def test_cluster_count_bounds(self, rng):
        signatures = _planted(rng, per_group=2)
        with pytest.raises(ConfigurationError):
            sclust.spectral_cluster(signatures, k=1, sigma=2.0)
        with pytest.raises(InsufficientDataError):
            sclust.spectral_cluster(signatures, k=7, sigma=2.0)

    @given(order=st.permutations(range(36)))
    def test_row_order_does_not_change_the_partition(self, order):
        signatures = _planted(np.random.default_rng(4), groups=3, per_group=12)
        order = np.asarray(order)
        moved = SignatureSet(signatures.values[order], trials=0, classes=signatures.classes[order])
        base = sclust.spectral_cluster(signatures, k=3, sigma=2.0, seed=1)
        again = sclust.spectral_cluster(moved, k=3, sigma=2.0, seed=1)
        assert adjusted_rand_score(base.assignments[order], again.assignments) == 1.0
        assert again.critical == base.critical

    @pytest.mark.slow
    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_planted_cluster_count_is_recovered(self, k):
        lgv_hits = lbw_hits = exact = 0
        for seed in range(20):
            signatures = _planted(np.random.default_rng(seed), groups=k, spread=1.0, separation=200.0)
            sweep = sclust.sigma_sweep(signatures, modes=range(2, 7))
            lgv_mode, lgv_sigma = sclust.select_lgv(sweep)
            lgv_hits += lgv_mode == k
            lbw_hits += sclust.select_lbw(sweep)[0] == k
            report = sclust.spectral_cluster(signatures, k=k, sigma=lgv_sigma, seed=seed)
            exact += adjusted_rand_score(signatures.classes, report.assignments) >= 0.99
        assert lgv_hits >= 18
        assert lbw_hits >= 18
        assert exact >= 19

    def test_kmeans_retries_are_bounded(self):
        embedding = np.ones((10, 2))
        with pytest.raises(ClusteringError, match="after 3 attempts"):
            sclust.kmeans_rows(embedding, 2, np.random.default_rng(0), KMeansSettings(n_init=1, retries=3))

    def test_canonical_labels(self):
        np.testing.assert_array_equal(sclust.canonical_labels([5, 5, 2, 9, 2]), [0, 0, 1, 2, 1])


class TestCriticalClasses:
    def test_transitions_between_majority_clusters(self):
        assert sclust.critical_from_majorities([0, 0, 1, 1, 2]) == {2, 4}
        assert sclust.critical_from_majorities({0: 3, 1: 3, 2: 3}) == set()

    def test_classes_must_be_contiguous(self):
        with pytest.raises(LabelError):
            sclust.critical_from_majorities({0: 0, 2: 1})

    def test_tie_keeps_previous_cluster(self):
        majorities, purities = sclust.majority_clusters(np.array([0, 0, 0, 1]), np.array([0, 0, 1, 1]))
        assert majorities == {0: 0, 1: 0}
        assert purities == {0: 1.0, 1: 0.5}

    def test_tie_without_previous_cluster_takes_smallest_id(self):
        majorities, _ = sclust.majority_clusters(np.array([0, 0, 2, 1]), np.array([0, 0, 1, 1]))
        assert majorities[1] == 1

    def test_critical_from_report_with_other_labels(self, rng):
        signatures = _planted(rng)
        report = sclust.spectral_cluster(signatures, k=3, sigma=2.0)
        merged = np.where(signatures.classes == 2, 1, signatures.classes)
        assert sclust.critical_classes(report) == {1, 2}
        assert sclust.critical_classes(report, class_labels=merged) == {1}

    @pytest.mark.parametrize(
        ("predicted", "reference", "expected"),
        [(set(), set(), 1.0), ({1, 4}, {1, 4}, 1.0), ({1, 4}, {1}, 0.5), ({2}, {3}, 0.0)],
    )
    def test_agreement(self, predicted, reference, expected):
        assert sclust.agreement(predicted, reference) == expected
        assert sclust.agreement(predicted, reference, classes=6) == expected

    @pytest.mark.parametrize(
        ("predicted", "reference", "classes"),
        [({0, 1}, {1}, None), ({1}, {-2}, None), ({1, 6}, {1}, 6), ({2}, {5}, 5)],
    )
    def test_agreement_rejects_non_heated_classes(self, predicted, reference, classes):
        with pytest.raises(LabelError, match="critical classes"):
            sclust.agreement(predicted, reference, classes)


class TestTrialAnalysis:
    def test_subsample_is_seeded_and_capped(self, small_dataset):
        signatures = small_dataset.trials[0]
        first = sclust.subsample_per_class(signatures, 10, seed=3)
        second = sclust.subsample_per_class(signatures, 10, seed=3)
        np.testing.assert_array_equal(first.values, second.values)
        assert np.bincount(first.classes).tolist() == [10, 10, 10, 10]
        assert sclust.subsample_per_class(signatures, None) is signatures

    @pytest.mark.slow
    def test_lbw_finds_planted_critical_classes(self):
        hits = 0
        for seed in range(20):
            config = SynthConfig(trials=1, signatures_per_class=64, critical_classes=(1, 4), boost=10.0, seed=seed)
            signatures = synth.generate(config).trials[0]
            sweep, report = sclust.analyze_trial(signatures, ClusterConfig(algorithm="LBW"), seed=seed, trial=0)
            hits += sweep.mode == 3 and sclust.agreement(report.critical, {1, 4}) == 1.0
        assert hits >= 18

    @pytest.mark.slow
    def test_lgv_finds_planted_critical_classes(self):
        hits = 0
        for seed in range(20):
            config = SynthConfig(trials=1, signatures_per_class=64, critical_classes=(1, 2, 4), boost=10.0, seed=seed)
            signatures = synth.generate(config).trials[0]
            sweep, report = sclust.analyze_trial(signatures, ClusterConfig(algorithm="LGV"), seed=seed, trial=0)
            hits += sweep.mode == 4 and report.critical == frozenset({1, 2, 4})
        assert hits >= 16

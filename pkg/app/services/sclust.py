import warnings
from collections.abc import Mapping, Sequence

import numpy as np
import stamina
import structlog
from scipy.integrate import trapezoid
from scipy.spatial.distance import pdist, squareform
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from app.models.model import ClusterConfig, EigensolverName, KMeansSettings
from app.models.spectral import AffinityGraph, ClusterReport, SelectionAlgorithm, SignatureSet, SweepResult
from app.utils.errors import (
    ClusteringError,
    ConfigurationError,
    EigensolverError,
    EmptyClusterError,
    InsufficientDataError,
    LabelError,
)
from app.utils.linalg import symmetric_eigh, symmetric_eigvalsh

logger = structlog.get_logger(__name__)

DEFAULT_MODES = (3, 4, 5, 6)
LBW_PEAK_FLOOR = 0.0


def default_sigma_grid(points: int = 60, low: float = 1.0, high: float = 100.0) -> np.ndarray:
    return np.geomspace(low, high, points)


# =============================================================================
# AFFINITY GRAPH
# =============================================================================

def _squared_distances(signatures: SignatureSet) -> np.ndarray:
    if len(signatures) < 2:
        raise InsufficientDataError(f"a graph needs at least 2 signatures, got {len(signatures)}")
    signatures.require_finite()
    return squareform(pdist(signatures.values, metric="sqeuclidean"))


def _graph(sq_dist: np.ndarray, sigma: float) -> AffinityGraph:
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    weights = np.exp(-sq_dist / (2.0 * sigma * sigma))
    np.fill_diagonal(weights, 0.0)
    degrees = weights.sum(axis=1)
    isolated = np.flatnonzero(degrees <= 0)
    if isolated.size:
        raise ClusteringError(f"{isolated.size} signature(s) have zero degree at sigma={sigma:g}")

    scale = 1.0 / np.sqrt(degrees)
    laplacian = np.eye(weights.shape[0]) - scale[:, None] * weights * scale[None, :]
    laplacian = (laplacian + laplacian.T) / 2.0
    return AffinityGraph(sigma=float(sigma), weights=weights, degrees=degrees, laplacian=laplacian)


def build_graph(signatures: SignatureSet, sigma: float) -> AffinityGraph:
    """Gaussian affinity, degrees and symmetric normalized Laplacian ``I - D^-1/2 W D^-1/2``."""
    return _graph(_squared_distances(signatures), sigma)


# =============================================================================
# SIGMA SWEEP AND MODE SELECTION
# =============================================================================

def sigma_sweep(
    signatures: SignatureSet,
    sigmas: Sequence[float] | np.ndarray | None = None,
    modes: Sequence[int] = DEFAULT_MODES,
    solver: EigensolverName = "auto",
) -> SweepResult:
    """Lowest ``max(modes) + 1`` Laplacian eigenvalues at every sigma of an ascending grid."""
    sigmas = default_sigma_grid() if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    modes = tuple(sorted(modes))
    if sigmas.size == 0 or sigmas[0] < 1.0 or np.any(np.diff(sigmas) <= 0):
        raise ConfigurationError("sigma grid must be non-empty, strictly ascending and start at or above 1.0")
    if not modes or modes[0] < 1:
        raise ConfigurationError(f"invalid mode range {modes}")

    count = modes[-1] + 1
    sq_dist = _squared_distances(signatures)
    if sq_dist.shape[0] < count:
        raise InsufficientDataError(f"{count} eigenvalues requested from {sq_dist.shape[0]} signatures")

    logger.info("sigma_sweep_starting", points=int(sigmas.size), n=int(sq_dist.shape[0]), modes=list(modes))
    eigenvalues = np.empty((sigmas.size, count))
    for row, sigma in enumerate(sigmas):
        graph = _graph(sq_dist, float(sigma))
        try:
            values = symmetric_eigvalsh(graph.laplacian, solver, count)
        except EigensolverError as e:
            raise EigensolverError(f"sigma sweep failed: {e}", sigma=float(sigma)) from e
        eigenvalues[row] = np.sort(values)

    logger.info("sigma_sweep_complete", points=int(sigmas.size), modes=list(modes))
    return SweepResult(sigmas=sigmas, eigenvalues=eigenvalues, modes=modes)


def select_lgv(sweep: SweepResult) -> tuple[int, float]:
    """Mode with the highest gap anywhere on the grid; sigma at that peak."""
    gaps = sweep.gaps
    peaks = gaps.max(axis=0)
    column = int(np.argmax(peaks))
    row = int(np.argmax(gaps[:, column]))
    return sweep.modes[column], float(sweep.sigmas[row])


def lbw_bandwidths(sweep: SweepResult, peak_floor: float = LBW_PEAK_FLOOR) -> np.ndarray:
    """Sigma span (trapezoidal, linear sigma) over which each mode stays above half its own peak.

    Modes whose peak is below ``peak_floor`` times the strongest peak get zero span.
    """
    gaps = sweep.gaps
    peaks = gaps.max(axis=0)
    strongest = peaks.max()
    widths = np.zeros(len(sweep.modes))
    for column, peak in enumerate(peaks):
        if peak <= 0 or peak < peak_floor * strongest:
            continue
        above = (gaps[:, column] > 0.5 * peak).astype(np.float64)
        widths[column] = trapezoid(above, sweep.sigmas) if sweep.sigmas.size > 1 else 0.0
    return widths


def select_lbw(sweep: SweepResult, peak_floor: float = LBW_PEAK_FLOOR) -> tuple[int, float]:
    """Mode with the widest half-max sigma span; sigma at that mode's peak."""
    widths = lbw_bandwidths(sweep, peak_floor)
    column = int(np.argmax(widths))
    row = int(np.argmax(sweep.gaps[:, column]))
    return sweep.modes[column], float(sweep.sigmas[row])


def select_mode(
    sweep: SweepResult,
    algorithm: SelectionAlgorithm,
    peak_floor: float = LBW_PEAK_FLOOR,
) -> SweepResult:
    if algorithm == "LGV":
        mode, sigma = select_lgv(sweep)
    elif algorithm == "LBW":
        mode, sigma = select_lbw(sweep, peak_floor)
    else:
        raise ConfigurationError(f"unknown selection algorithm {algorithm!r}")
    logger.info("prominent_mode_selected", algorithm=algorithm, mode=mode, sigma=sigma)
    return sweep.with_selection(mode, sigma, algorithm)


# =============================================================================
# SPECTRAL CLUSTERING
# =============================================================================

def canonical_labels(assignments: Sequence[int] | np.ndarray) -> np.ndarray:
    """Relabel clusters 0, 1, ... in order of first occurrence."""
    assignments = np.asarray(assignments)
    _, first = np.unique(assignments, return_index=True)
    order = assignments[np.sort(first)]
    mapping = {int(label): rank for rank, label in enumerate(order)}
    return np.array([mapping[int(a)] for a in assignments], dtype=np.int64)


def njw_embedding(graph: AffinityGraph, k: int, solver: EigensolverName = "auto") -> np.ndarray:
    """k smallest Laplacian eigenvectors with rows scaled to unit length; zero rows stay zero."""
    _, vectors = symmetric_eigh(graph.laplacian, solver, k)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)


def _kmeans_once(embedding: np.ndarray, k: int, seed: int, n_init: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            labels = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit_predict(embedding)
        except ConvergenceWarning as e:
            raise EmptyClusterError(f"k-means found fewer than {k} distinct clusters (seed={seed})") from e
    if np.unique(labels).size < k:
        raise EmptyClusterError(f"k-means left a cluster empty (seed={seed})")
    return labels


def kmeans_rows(embedding: np.ndarray, k: int, rng: np.random.Generator, settings: KMeansSettings) -> np.ndarray:
    """Best-of-``n_init`` k-means++; an empty cluster retries with a fresh seed drawn from ``rng``."""
    try:
        for attempt in stamina.retry_context(
            on=EmptyClusterError,
            attempts=settings.retries,
            timeout=None,
            wait_initial=0.0,
            wait_max=0.0,
            wait_jitter=0.0,
        ):
            with attempt:
                seed = int(rng.integers(2**31 - 1))
                return _kmeans_once(embedding, k, seed, settings.n_init)
    except EmptyClusterError as e:
        raise ClusteringError(f"k-means failed after {settings.retries} attempts: {e}") from e
    raise ClusteringError("k-means made no attempt")


def spectral_cluster(
    signatures: SignatureSet,
    k: int,
    sigma: float,
    seed: int = 0,
    solver: EigensolverName = "auto",
    algorithm: SelectionAlgorithm = "LBW",
    settings: KMeansSettings | None = None,
    trial: int | str = "all",
) -> ClusterReport:
    if k < 2:
        raise ConfigurationError(f"spectral clustering needs k >= 2, got {k}")
    if k > len(signatures):
        raise InsufficientDataError(f"cannot form {k} clusters from {len(signatures)} signatures")
    settings = settings or KMeansSettings()

    graph = build_graph(signatures, sigma)
    embedding = njw_embedding(graph, k, solver)
    labels = canonical_labels(kmeans_rows(embedding, k, np.random.default_rng(seed), settings))

    if np.all(signatures.classes >= 0):
        majorities, purities = majority_clusters(labels, signatures.classes)
        critical = critical_from_majorities(majorities)
    else:
        majorities, purities, critical = {}, {}, set()

    logger.info("spectral_cluster_complete", k=k, sigma=sigma, trial=trial, critical=sorted(critical))
    return ClusterReport(
        assignments=labels,
        class_labels=np.asarray(signatures.classes),
        cluster_count=k,
        sigma=float(sigma),
        algorithm=algorithm,
        majorities=majorities,
        purities=purities,
        critical=frozenset(critical),
        trial=trial,
    )


# =============================================================================
# CRITICAL CLASSES
# =============================================================================

def majority_clusters(
    assignments: np.ndarray,
    class_labels: np.ndarray,
) -> tuple[dict[int, int], dict[int, float]]:
    """Majority cluster and purity per reheat class.

    A tied majority goes to the previous class's cluster when it is among the
    tied ones, otherwise to the smallest cluster id.
    """
    assignments = np.asarray(assignments)
    class_labels = np.asarray(class_labels)
    majorities: dict[int, int] = {}
    purities: dict[int, float] = {}
    for label in sorted(int(c) for c in np.unique(class_labels)):
        clusters, counts = np.unique(assignments[class_labels == label], return_counts=True)
        tied = [int(c) for c in clusters[counts == counts.max()]]
        choice = tied[0]
        if len(tied) > 1:
            previous = majorities.get(label - 1)
            if previous in tied:
                choice = previous
            logger.warning("majority_cluster_tie", reheat_class=label, tied=tied, chosen=choice)
        majorities[label] = choice
        purities[label] = float(counts.max() / counts.sum())
    return majorities, purities


def critical_from_majorities(majorities: Mapping[int, int] | Sequence[int]) -> set[int]:
    """Classes c >= 1 whose majority cluster differs from class c - 1."""
    if not isinstance(majorities, Mapping):
        majorities = dict(enumerate(majorities))
    classes = sorted(majorities)
    if classes != list(range(len(classes))):
        raise LabelError(f"reheat classes must run 0..C-1 without gaps, got {classes}")
    return {c for c in classes[1:] if majorities[c] != majorities[c - 1]}


def critical_classes(report: ClusterReport, class_labels: Sequence[int] | np.ndarray | None = None) -> set[int]:
    """Critical set of a clustering; recomputed from ``class_labels`` when given."""
    if class_labels is None:
        if not report.majorities:
            raise LabelError("cluster report carries no reheat-class majorities")
        return critical_from_majorities(report.majorities)
    majorities, _ = majority_clusters(report.assignments, np.asarray(class_labels))
    return critical_from_majorities(majorities)


def agreement(
    predicted: set[int] | frozenset[int],
    reference: set[int] | frozenset[int],
    classes: int | None = None,
) -> float:
    """Jaccard index of two critical-class sets; two empty sets agree fully.

    Members must be heated classes, 1 and up, and below ``classes`` when it is given.
    """
    upper = classes - 1 if classes is not None else None
    for name, members in (("predicted", predicted), ("reference", reference)):
        bad = sorted(c for c in members if c < 1 or (upper is not None and c > upper))
        if bad:
            bound = f"1..{upper}" if upper is not None else "1 and up"
            raise LabelError(f"{name} critical classes {bad} outside {bound}")
    union = set(predicted) | set(reference)
    if not union:
        return 1.0
    return len(set(predicted) & set(reference)) / len(union)


# =============================================================================
# TRIAL ANALYSIS
# =============================================================================

def subsample_per_class(signatures: SignatureSet, per_class: int | None, seed: int = 0) -> SignatureSet:
    """Seeded uniform draw of at most ``per_class`` signatures per reheat class, in input order."""
    if per_class is None:
        return signatures
    rng = np.random.default_rng(seed)
    keep = []
    for label in signatures.class_labels():
        members = np.flatnonzero(signatures.classes == label)
        if members.size > per_class:
            members = np.sort(rng.choice(members, size=per_class, replace=False))
        keep.append(members)
    return signatures.take(np.sort(np.concatenate(keep)))


def analyze_trial(
    signatures: SignatureSet,
    config: ClusterConfig,
    seed: int = 0,
    trial: int | str = "all",
    algorithm: SelectionAlgorithm | None = None,
) -> tuple[SweepResult, ClusterReport]:
    """Subsample, sweep sigma, pick the prominent mode and cluster at the dominant sigma."""
    algorithm = algorithm or config.algorithm
    sample = subsample_per_class(signatures, config.subsample, seed)
    sweep = sigma_sweep(sample, config.sigmas(), config.modes(), config.eigensolver)
    sweep = select_mode(sweep, algorithm, config.lbw_peak_floor)
    report = spectral_cluster(
        sample,
        sweep.mode,
        sweep.sigma,
        seed=seed,
        solver=config.eigensolver,
        algorithm=algorithm,
        trial=trial,
    )
    return sweep, report

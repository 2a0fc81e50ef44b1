from collections.abc import Mapping, Sequence

import numpy as np
import scipy.linalg
import structlog

from app.models.spectral import BhattacharyyaFeature, FdaProjection, GaussianStats, SignatureSet
from app.utils.errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientDataError,
    LabelError,
    SingularScatterError,
)
from app.utils.linalg import cholesky_logdet

logger = structlog.get_logger(__name__)

RIDGE_FACTOR = 1e-6
MAX_CONDITION = 1e12


def regularize_covariance(matrix: np.ndarray) -> tuple[np.ndarray, bool]:
    """Add ``1e-6 * trace/d * I`` when the matrix is not safely positive definite.

    A zero trace (all samples identical) uses a unit scale instead.
    """
    cov = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    cov = (cov + cov.T) / 2.0
    eigenvalues = np.linalg.eigvalsh(cov)
    smallest, largest = float(eigenvalues[0]), float(eigenvalues[-1])
    if smallest > 0 and largest / smallest <= MAX_CONDITION:
        return cov, False

    d = cov.shape[0]
    trace = float(np.trace(cov))
    scale = trace / d if trace > 0 else 1.0
    return cov + RIDGE_FACTOR * scale * np.eye(d), True


# =============================================================================
# GAUSSIAN FIT
# =============================================================================

def fit_gaussian(signatures: SignatureSet) -> GaussianStats:
    """Sample mean and unbiased covariance, regularized when needed."""
    n, d = signatures.values.shape
    if n < 2:
        raise InsufficientDataError(f"a Gaussian fit needs at least 2 signatures, got {n}")
    signatures.require_finite()
    if n < d + 1:
        logger.warning("gaussian_fit_rank_deficient", samples=n, dim=d)

    mean = signatures.values.mean(axis=0)
    cov = np.atleast_2d(np.cov(signatures.values, rowvar=False, ddof=1))
    cov, applied = regularize_covariance(cov)
    return GaussianStats(mean=mean, covariance=cov, sample_count=n, regularized=applied)


def reference_mixture(references: Sequence[GaussianStats], weights: Sequence[float]) -> GaussianStats:
    """Moment-matched single Gaussian for a weighted mixture of references."""
    if not references or len(references) != len(weights):
        raise ConfigurationError("one weight per reference is required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError("mixture weights must be nonnegative with a positive sum")
    w = w / w.sum()
    if len(references) == 1:
        return references[0]

    dims = {r.dim for r in references}
    if len(dims) != 1:
        raise DimensionMismatchError(f"references disagree on dimension: {sorted(dims)}")
    mean = sum(wi * r.mean for wi, r in zip(w, references, strict=True))
    second = sum(wi * (r.covariance + np.outer(r.mean, r.mean)) for wi, r in zip(w, references, strict=True))
    cov, applied = regularize_covariance(second - np.outer(mean, mean))
    return GaussianStats(
        mean=mean,
        covariance=cov,
        sample_count=sum(r.sample_count for r in references),
        regularized=applied or any(r.regularized for r in references),
    )


# =============================================================================
# FISHER DISCRIMINANT
# =============================================================================

def fit_fda(sets: Sequence[SignatureSet], k: int) -> FdaProjection:
    """Top-k solutions of ``S_b v = lambda S_w v`` over the class labels of the given sets."""
    pooled = SignatureSet.concat(sets)
    pooled.require_finite()
    labels = pooled.class_labels()
    if any(c < 0 for c in labels):
        raise LabelError("FDA needs labelled signatures")
    if len(labels) < 2:
        raise InsufficientDataError(f"FDA needs at least 2 classes, got {len(labels)}")
    d = pooled.dim
    if not 1 <= k <= min(d, len(labels) - 1):
        raise ConfigurationError(f"FDA dimension {k} outside 1..{min(d, len(labels) - 1)}")

    grand_mean = pooled.values.mean(axis=0)
    within = np.zeros((d, d))
    between = np.zeros((d, d))
    for label in labels:
        members = pooled.values[pooled.classes == label]
        if members.shape[0] < 2:
            raise InsufficientDataError(f"class {label} has {members.shape[0]} signature(s); FDA needs 2")
        centered = members - members.mean(axis=0)
        within += centered.T @ centered
        shift = members.mean(axis=0) - grand_mean
        between += members.shape[0] * np.outer(shift, shift)

    within, applied = regularize_covariance(within)
    try:
        ratios, vectors = scipy.linalg.eigh((between + between.T) / 2.0, within)
    except np.linalg.LinAlgError as e:
        raise SingularScatterError("within-class scatter is singular after regularization") from e

    order = np.argsort(ratios, kind="stable")[::-1][:k]
    logger.info("fda_fitted", classes=len(labels), input_dim=d, output_dim=k, regularized=applied)
    return FdaProjection(basis=vectors[:, order], ratios=np.clip(ratios[order], 0.0, None))


def project(projection: FdaProjection, signatures: SignatureSet) -> SignatureSet:
    if signatures.dim != projection.input_dim:
        raise DimensionMismatchError(
            f"projection expects {projection.input_dim}-band signatures, got {signatures.dim}"
        )
    return SignatureSet(signatures.values @ projection.basis, signatures.trials, signatures.classes)


# =============================================================================
# BHATTACHARYYA DISTANCE
# =============================================================================

def bhattacharyya(
    target: GaussianStats,
    reference: GaussianStats,
    target_id: str = "target",
    reference_id: str = "reference",
) -> BhattacharyyaFeature:
    """Mahalanobis-type mean term plus covariance-disparity term, via Cholesky factors."""
    if target.dim != reference.dim:
        raise DimensionMismatchError(f"cannot compare a {target.dim}-D and a {reference.dim}-D Gaussian")

    _, logdet_t = cholesky_logdet(target.covariance)
    _, logdet_r = cholesky_logdet(reference.covariance)
    pooled = (target.covariance + reference.covariance) / 2.0
    factor, logdet_p = cholesky_logdet(pooled)

    diff = target.mean - reference.mean
    solved = scipy.linalg.cho_solve((factor, True), diff)
    d_b1 = max(float(diff @ solved) / 8.0, 0.0)
    d_b2 = max(0.5 * (logdet_p - 0.5 * (logdet_t + logdet_r)), 0.0)
    return BhattacharyyaFeature(d_b1=d_b1, d_b2=d_b2, reference_id=reference_id, target_id=target_id)


def set_distance(
    signatures: SignatureSet,
    reference: GaussianStats,
    projection: FdaProjection | None = None,
) -> float:
    """Distance of one labelled set to its reference, in FDA space when a projection is given."""
    if projection is not None:
        signatures = project(projection, signatures)
    return bhattacharyya(fit_gaussian(signatures), reference).d_b


def trial_references(
    signatures: SignatureSet,
    projection: FdaProjection | None = None,
) -> dict[int, GaussianStats]:
    """Per-trial class-0 Gaussian from the given signatures."""
    if projection is not None:
        signatures = project(projection, signatures)
    references: dict[int, GaussianStats] = {}
    for trial in signatures.trial_labels():
        pure = signatures.for_trial(trial).for_class(0)
        if len(pure) < 2:
            continue
        references[trial] = fit_gaussian(pure)
    return references


def mixed_reference(references: Mapping[int, GaussianStats], weights: Mapping[int, float]) -> GaussianStats:
    missing = [t for t in weights if t not in references]
    if missing:
        raise LabelError(f"no pure-oil reference for trial(s) {missing}")
    trials = sorted(weights)
    return reference_mixture([references[t] for t in trials], [weights[t] for t in trials])

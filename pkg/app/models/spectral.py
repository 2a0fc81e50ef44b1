from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any, Literal

import numpy as np
import structlog

from app.utils.errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientDataError,
    LabelError,
    NonFiniteInputError,
    PixelRangeError,
    WindowBoundsError,
)

logger = structlog.get_logger(__name__)

DEFAULT_PEAKS_NM = (405.0, 430.0, 500.0, 610.0, 660.0, 740.0, 850.0, 890.0, 950.0)
DEFAULT_BIT_DEPTH = 10
DEFAULT_WINDOW_SIDE = 30


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


# =============================================================================
# CUBES AND WINDOWS
# =============================================================================

class Provenance(IntEnum):
    """Preprocessing stage of a cube; the value is the on-disk u8 code."""
    RAW = 0
    DARK_SUBTRACTED = 1
    FILTERED = 2


@dataclass(frozen=True)
class BandPlan:
    """Ordered band index -> peak wavelength (nm)."""
    peaks_nm: tuple[float, ...] = DEFAULT_PEAKS_NM

    def __post_init__(self) -> None:
        peaks = np.asarray(self.peaks_nm, dtype=float)
        if peaks.size == 0 or np.any(peaks <= 0):
            raise ConfigurationError("band peaks must be positive and non-empty")
        if np.any(np.diff(peaks) <= 0):
            raise ConfigurationError("band peaks must be strictly increasing")
        object.__setattr__(self, "peaks_nm", tuple(float(p) for p in peaks))

    @property
    def count(self) -> int:
        return len(self.peaks_nm)


@dataclass(frozen=True)
class SpectralCube:
    """H x W x B stack of band images from one oil sample."""
    pixels: np.ndarray
    band_plan: BandPlan = field(default_factory=BandPlan)
    bit_depth: int = DEFAULT_BIT_DEPTH
    provenance: Provenance = Provenance.RAW

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise DimensionMismatchError(f"cube must be H x W x B, got shape {pixels.shape}")
        if pixels.shape[2] != self.band_plan.count:
            raise DimensionMismatchError(
                f"cube has {pixels.shape[2]} bands but the band plan has {self.band_plan.count}"
            )
        if not np.all(np.isfinite(pixels)):
            raise NonFiniteInputError("cube contains non-finite intensities")
        if np.any(pixels < 0):
            raise PixelRangeError("cube intensities must be nonnegative")
        if self.provenance == Provenance.RAW and np.any(pixels > 2**self.bit_depth - 1):
            raise PixelRangeError(f"raw intensities exceed the {self.bit_depth}-bit range")
        object.__setattr__(self, "pixels", _frozen(pixels))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def band_count(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray, provenance: Provenance) -> "SpectralCube":
        return replace(self, pixels=pixels, provenance=provenance)


@dataclass(frozen=True)
class DarkFrame:
    """Zero-illumination capture subtracted from every band of a cube."""
    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 3:
            raise DimensionMismatchError(f"dark frame must be H x W x B, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or np.any(pixels < 0):
            raise NonFiniteInputError("dark frame intensities must be finite and nonnegative")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class WindowSpec:
    row: int
    col: int
    side: int = DEFAULT_WINDOW_SIDE

    def __post_init__(self) -> None:
        if self.side < 1:
            raise WindowBoundsError("window side must be positive")

    def check_bounds(self, height: int, width: int) -> None:
        if self.row < 0 or self.col < 0 or self.row + self.side > height or self.col + self.side > width:
            raise WindowBoundsError(
                f"window at ({self.row}, {self.col}) side {self.side} exceeds image {height}x{width}"
            )

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.row + self.side), slice(self.col, self.col + self.side)


# =============================================================================
# SIGNATURES
# =============================================================================

@dataclass(frozen=True)
class SignatureSet:
    """N x B per-pixel spectral signatures with trial and reheat-class labels per row."""
    values: np.ndarray
    trials: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2:
            raise DimensionMismatchError(f"signatures must be N x B, got shape {values.shape}")
        n = values.shape[0]
        trials = np.broadcast_to(np.asarray(self.trials, dtype=np.int64), (n,)).copy()
        classes = np.broadcast_to(np.asarray(self.classes, dtype=np.int64), (n,)).copy()
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "trials", _frozen(trials))
        object.__setattr__(self, "classes", _frozen(classes))

    @classmethod
    def concat(cls, sets: Iterable["SignatureSet"]) -> "SignatureSet":
        sets = list(sets)
        if not sets:
            raise InsufficientDataError("cannot concatenate an empty list of signature sets")
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise DimensionMismatchError(f"signature sets disagree on band count: {sorted(dims)}")
        return cls(
            values=np.vstack([s.values for s in sets]),
            trials=np.concatenate([s.trials for s in sets]),
            classes=np.concatenate([s.classes for s in sets]),
        )

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def take(self, indices: np.ndarray) -> "SignatureSet":
        indices = np.asarray(indices)
        return SignatureSet(self.values[indices], self.trials[indices], self.classes[indices])

    def for_class(self, label: int) -> "SignatureSet":
        return self.take(np.flatnonzero(self.classes == label))

    def for_trial(self, trial: int) -> "SignatureSet":
        return self.take(np.flatnonzero(self.trials == trial))

    def class_labels(self) -> list[int]:
        return [int(c) for c in np.unique(self.classes)]

    def trial_labels(self) -> list[int]:
        return [int(t) for t in np.unique(self.trials)]

    def require_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteInputError("signatures contain non-finite values")


# =============================================================================
# STATISTICS
# =============================================================================

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    regularized: bool = False

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError(f"covariance {cov.shape} does not match mean of length {mean.size}")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "covariance", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "sample_count": self.sample_count,
            "regularized": self.regularized,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GaussianStats":
        return cls(
            mean=np.asarray(data["mean"], dtype=float),
            covariance=np.asarray(data["covariance"], dtype=float),
            sample_count=int(data["sample_count"]),
            regularized=bool(data.get("regularized", False)),
        )


@dataclass(frozen=True)
class FdaProjection:
    """d x k Fisher basis with its discriminant ratios (non-increasing)."""
    basis: np.ndarray
    ratios: np.ndarray

    def __post_init__(self) -> None:
        basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        ratios = np.atleast_1d(np.asarray(self.ratios, dtype=np.float64))
        if ratios.size != basis.shape[1]:
            raise DimensionMismatchError("one discriminant ratio per basis column is required")
        object.__setattr__(self, "basis", _frozen(basis))
        object.__setattr__(self, "ratios", _frozen(ratios))

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "basis": self.basis.tolist(),
            "ratios": self.ratios.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FdaProjection":
        return cls(basis=np.asarray(data["basis"], dtype=float), ratios=np.asarray(data["ratios"], dtype=float))


@dataclass(frozen=True)
class BhattacharyyaFeature:
    d_b1: float
    d_b2: float
    reference_id: str = "reference"
    target_id: str = "target"

    @property
    def d_b(self) -> float:
        return self.d_b1 + self.d_b2


# =============================================================================
# CLASSIFICATION
# =============================================================================

@dataclass(frozen=True)
class LabelledFeature:
    value: float
    label: int
    trial_id: int = 0
    set_id: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise NonFiniteInputError(f"feature of set {self.set_id} is not finite")
        if self.label < 0:
            raise LabelError(f"set {self.set_id} has negative reheat class {self.label}")


@dataclass(frozen=True)
class PairwiseMachine:
    """One binary RBF machine of the one-vs-one ensemble.

    ``positive`` is the smaller class index (target +1), ``negative`` the larger.
    Support values are stored in the machine's own standardized coordinates.
    """
    positive: int
    negative: int
    support: np.ndarray
    targets: np.ndarray
    alphas: np.ndarray
    bias: float
    center: float
    scale: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": [self.positive, self.negative],
            "support": self.support.tolist(),
            "targets": self.targets.tolist(),
            "alphas": self.alphas.tolist(),
            "bias": self.bias,
            "center": self.center,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PairwiseMachine":
        positive, negative = data["classes"]
        return cls(
            positive=int(positive),
            negative=int(negative),
            support=np.asarray(data["support"], dtype=float),
            targets=np.asarray(data["targets"], dtype=float),
            alphas=np.asarray(data["alphas"], dtype=float),
            bias=float(data["bias"]),
            center=float(data["center"]),
            scale=float(data["scale"]),
        )


@dataclass(frozen=True)
class SvmModel:
    gamma: float
    cost: float
    classes: tuple[int, ...]
    machines: tuple[PairwiseMachine, ...]
    seed: int = 0
    folds: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma,
            "cost": self.cost,
            "classes": list(self.classes),
            "machines": [m.to_dict() for m in self.machines],
            "seed": self.seed,
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SvmModel":
        return cls(
            gamma=float(data["gamma"]),
            cost=float(data["cost"]),
            classes=tuple(int(c) for c in data["classes"]),
            machines=tuple(PairwiseMachine.from_dict(m) for m in data["machines"]),
            seed=int(data.get("seed", 0)),
            folds=data.get("folds"),
        )


@dataclass(frozen=True)
class GridSearchResult:
    """Pooled cross-validated fraction-correct, rows = gammas, cols = costs."""
    gammas: tuple[float, ...]
    costs: tuple[float, ...]
    accuracy: np.ndarray
    best_gamma: float
    best_cost: float
    folds: int
    seed: int

    @property
    def best_accuracy(self) -> float:
        return float(self.accuracy[self.gammas.index(self.best_gamma), self.costs.index(self.best_cost)])


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DimensionMismatchError("confusion matrix must be square")
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fraction_correct(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0


# =============================================================================
# SPECTRAL CLUSTERING
# =============================================================================

@dataclass(frozen=True)
class AffinityGraph:
    sigma: float
    weights: np.ndarray
    degrees: np.ndarray
    laplacian: np.ndarray


SelectionAlgorithm = Literal["LGV", "LBW"]


@dataclass(frozen=True)
class SweepResult:
    """Ascending Laplacian eigenvalues per sigma plus the eigengap curves of the searched modes.

    ``eigenvalues[i, j]`` is the (j+1)-th smallest eigenvalue at ``sigmas[i]``;
    the gap of mode k is ``eigenvalues[:, k] - eigenvalues[:, k - 1]``.
    """
    sigmas: np.ndarray
    eigenvalues: np.ndarray
    modes: tuple[int, ...]
    mode: int | None = None
    sigma: float | None = None
    algorithm: SelectionAlgorithm | None = None

    @property
    def gaps(self) -> np.ndarray:
        """len(sigmas) x len(modes) eigengap table."""
        return np.column_stack([self.eigenvalues[:, k] - self.eigenvalues[:, k - 1] for k in self.modes])

    def with_selection(self, mode: int, sigma: float, algorithm: SelectionAlgorithm) -> "SweepResult":
        return replace(self, mode=mode, sigma=sigma, algorithm=algorithm)


@dataclass(frozen=True)
class ClusterReport:
    assignments: np.ndarray
    class_labels: np.ndarray
    cluster_count: int
    sigma: float
    algorithm: SelectionAlgorithm
    majorities: dict[int, int]
    purities: dict[int, float]
    critical: frozenset[int]
    trial: int | str = "all"

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial": self.trial,
            "algorithm": self.algorithm,
            "mode": self.cluster_count,
            "sigma": self.sigma,
            "assignments": self.assignments.tolist(),
            "class_labels": self.class_labels.tolist(),
            "majorities": {str(k): v for k, v in self.majorities.items()},
            "purities": {str(k): v for k, v in self.purities.items()},
            "critical": sorted(self.critical),
        }


# =============================================================================
# DATASET REFORMATION
# =============================================================================

Split = Literal["train", "test"]


@dataclass(frozen=True)
class LabelledSet:
    set_id: int
    label: int
    trial: int
    indices: np.ndarray
    split: Split
    trial_weights: dict[int, float] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.indices.size


@dataclass(frozen=True)
class LabelledSetPartition:
    sets: tuple[LabelledSet, ...]

    def by_split(self, split: Split) -> list[LabelledSet]:
        return [s for s in self.sets if s.split == split]

    def for_class(self, label: int) -> list[LabelledSet]:
        return [s for s in self.sets if s.label == label]

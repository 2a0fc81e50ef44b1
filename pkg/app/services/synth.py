from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import structlog

from app.models.model import ChemicalEntry, ChemicalProperty, ChemicalRecord, SynthConfig
from app.models.spectral import LabelledSet, LabelledSetPartition, SignatureSet
from app.storage.tables import read_chemical
from app.utils.errors import (
    ConfigurationError,
    InputDataError,
    InsufficientDataError,
    LabelError,
    NotPositiveDefiniteError,
)
from app.utils.linalg import cholesky_logdet

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class SyntheticDataset:
    trials: dict[int, SignatureSet]
    critical: dict[int, frozenset[int]]
    class_means: dict[int, np.ndarray] = field(default_factory=dict)
    config: SynthConfig = field(default_factory=SynthConfig)

    def pooled(self) -> SignatureSet:
        return SignatureSet.concat(self.trials[t] for t in sorted(self.trials))

    def ground_truth(self) -> dict[str, Any]:
        return {
            "trials": {str(t): sorted(c) for t, c in sorted(self.critical.items())},
            "drift": {
                "step": self.config.drift_step,
                "direction": drift_direction(self.config).tolist(),
                "critical_classes": sorted(self.config.critical_classes),
                "boost": self.config.boost,
                "trial_drift_jitter": self.config.trial_drift_jitter,
                "covariance_inflation": self.config.covariance_inflation,
            },
        }

    def chemical_records(self) -> list[ChemicalRecord]:
        """Ground-truth flags as a chemical table; percentages are class-over-class mean-spectrum shifts."""
        records = []
        for trial, means in sorted(self.class_means.items()):
            entries = []
            for c in range(1, means.shape[0]):
                pct = float(100.0 * np.linalg.norm(means[c] - means[c - 1]) / np.linalg.norm(means[c - 1]))
                flagged = c in self.critical[trial]
                entries.append(
                    ChemicalEntry(
                        trial=trial,
                        reheat_class=c,
                        tbars_pct=round(pct, 4),
                        tbars_sig=flagged,
                        totox_pct=round(pct, 4),
                        totox_sig=flagged,
                    )
                )
            records.append(ChemicalRecord(trial=trial, entries=tuple(entries)))
        return records


# =============================================================================
# GENERATOR
# =============================================================================

def drift_direction(config: SynthConfig) -> np.ndarray:
    """Unit drift direction; by default short bands darken and near-IR brightens."""
    if config.drift_direction is not None:
        u = np.asarray(config.drift_direction, dtype=np.float64)
    else:
        u = np.linspace(-1.0, 1.0, config.bands) if config.bands > 1 else np.ones(1)
    return u / np.linalg.norm(u)


def class_offsets(config: SynthConfig) -> np.ndarray:
    """Cumulative drift per class (C x B); class 0 sits at zero."""
    u = drift_direction(config)
    steps = np.zeros((config.classes, config.bands))
    for c in range(1, config.classes):
        boost = config.boost if c in config.critical_classes else 1.0
        steps[c] = config.drift_step * boost * u
    return np.cumsum(steps, axis=0)


def _base_covariance(config: SynthConfig) -> np.ndarray:
    if config.covariance is None:
        return config.noise_std**2 * np.eye(config.bands)
    cov = np.asarray(config.covariance, dtype=np.float64)
    if not np.allclose(cov, cov.T):
        raise ConfigurationError("synthetic covariance must be symmetric")
    try:
        cholesky_logdet(cov)
    except NotPositiveDefiniteError as e:
        raise ConfigurationError("synthetic covariance is not positive definite") from e
    return cov


def generate(config: SynthConfig) -> SyntheticDataset:
    """Per-trial Gaussian classes whose means drift monotonically from the pure-oil spectrum.

    Each trial draws from its own child of ``SeedSequence(config.seed)``, so
    trials are independent and the whole dataset is reproducible per seed.
    """
    base_cov = _base_covariance(config)
    base_mean = np.linspace(*config.base_level_range, config.bands)
    offsets = class_offsets(config)
    children = np.random.SeedSequence(config.seed).spawn(config.trials)

    logger.info(
        "synth_generate_starting",
        trials=config.trials,
        classes=config.classes,
        per_class=config.signatures_per_class,
        seed=config.seed,
    )
    trials: dict[int, SignatureSet] = {}
    means: dict[int, np.ndarray] = {}
    for trial, child in enumerate(children):
        rng = np.random.default_rng(child)
        magnitude = max(1.0 + config.trial_drift_jitter * rng.standard_normal(), 0.5)
        trial_mean = base_mean + config.trial_offset_scale * rng.standard_normal(config.bands)

        values = []
        trial_means = np.empty((config.classes, config.bands))
        for c in range(config.classes):
            trial_means[c] = trial_mean + magnitude * offsets[c]
            factor, _ = cholesky_logdet(base_cov * (1.0 + config.covariance_inflation * c))
            noise = rng.standard_normal((config.signatures_per_class, config.bands)) @ factor.T
            values.append(trial_means[c] + noise)

        classes = np.repeat(np.arange(config.classes), config.signatures_per_class)
        trials[trial] = SignatureSet(values=np.vstack(values), trials=trial, classes=classes)
        means[trial] = trial_means

    critical = {t: frozenset(config.critical_classes) for t in trials}
    logger.info("synth_generate_complete", signatures=config.total_signatures)
    return SyntheticDataset(trials=trials, critical=critical, class_means=means, config=config)


# =============================================================================
# DATASET REFORMATION
# =============================================================================

def trial_subsets(signatures: SignatureSet) -> dict[int, SignatureSet]:
    """All classes of each trial, keyed by trial id."""
    if np.any(signatures.trials < 0):
        raise LabelError(f"{int(np.sum(signatures.trials < 0))} signature(s) have no trial label")
    return {t: signatures.for_trial(t) for t in signatures.trial_labels()}


def reform_labelled_sets(
    signatures: SignatureSet,
    sets_per_class: int = 60,
    set_size: int = 135,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> LabelledSetPartition:
    """Shuffle each class within its trials, chunk it into equal sets and split the sets train/test.

    Sets are taken contiguously in trial order, so a set may straddle two
    trials; its ``trial`` is the majority trial and ``trial_weights`` the mix.
    """
    if np.any(signatures.trials < 0):
        raise LabelError("labelled sets need a trial label on every signature")
    if np.any(signatures.classes < 0):
        raise LabelError("labelled sets need a reheat class on every signature")
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test fraction {test_fraction} outside (0, 1)")

    needed = sets_per_class * set_size
    test_count = int(round(sets_per_class * test_fraction))
    sets: list[LabelledSet] = []
    for label in signatures.class_labels():
        members = np.flatnonzero(signatures.classes == label)
        if members.size < needed:
            raise InsufficientDataError(
                f"class {label} has {members.size} signatures; {sets_per_class} sets of {set_size} need {needed}"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, label]))
        member_trials = signatures.trials[members]
        ordered = np.concatenate(
            [rng.permutation(members[member_trials == t]) for t in np.unique(member_trials)]
        )[:needed]
        test_ids = set(rng.choice(sets_per_class, size=test_count, replace=False).tolist())

        for k, chunk in enumerate(ordered.reshape(sets_per_class, set_size)):
            trial_ids, counts = np.unique(signatures.trials[chunk], return_counts=True)
            sets.append(
                LabelledSet(
                    set_id=len(sets),
                    label=label,
                    trial=int(trial_ids[np.argmax(counts)]),
                    indices=chunk,
                    split="test" if k in test_ids else "train",
                    trial_weights={int(t): float(n / set_size) for t, n in zip(trial_ids, counts, strict=True)},
                )
            )

    logger.info(
        "labelled_sets_reformed",
        sets=len(sets),
        set_size=set_size,
        test_sets=sum(s.split == "test" for s in sets),
        seed=seed,
    )
    return LabelledSetPartition(sets=tuple(sets))


# =============================================================================
# CHEMICAL GROUND TRUTH
# =============================================================================

def load_chemical(path: Path) -> list[ChemicalRecord]:
    return read_chemical(path)


def chemical_critical(record: ChemicalRecord, prop: ChemicalProperty | str) -> set[int]:
    """Classes flagged significant for TBARS or TOTOX."""
    name = str(prop).upper()
    if name not in ("TBARS", "TOTOX"):
        raise InputDataError(f"unknown chemical property {prop!r}; expected TBARS or TOTOX")
    return record.flagged(name)

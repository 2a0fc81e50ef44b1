from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
import structlog

from app.models.model import ChemicalRecord, ClusterConfig, PipelineConfig
from app.models.spectral import (
    ClusterReport,
    ConfusionMatrix,
    FdaProjection,
    GaussianStats,
    GridSearchResult,
    LabelledFeature,
    LabelledSetPartition,
    SelectionAlgorithm,
    SignatureSet,
    SvmModel,
    SweepResult,
)
from app.services import classifier, features, sclust, synth
from app.services.event_service import get_event_service
from app.storage.tables import AGREEMENT_COLUMNS
from app.utils.errors import LabelError

logger = structlog.get_logger(__name__)

PREDICTION_COLUMNS = ["set_id", "trial", "reheat_class", "size", "d_b", "predicted_class"]
BOUNDARY_COLUMNS = ("d_b", "lower_class", "upper_class")


def format_classes(classes: Sequence[int] | frozenset[int] | set[int]) -> str:
    return ";".join(str(c) for c in sorted(classes))


# =============================================================================
# TRAINING
# =============================================================================

@dataclass(frozen=True)
class TrainingResult:
    model: SvmModel
    partition: LabelledSetPartition
    references: dict[int, GaussianStats]
    projection: FdaProjection | None
    features: list[LabelledFeature]
    splits: list[str]
    grid: GridSearchResult
    train_eval: classifier.Evaluation
    test_eval: classifier.Evaluation
    baselines: dict[str, ConfusionMatrix] = field(default_factory=dict)

    def train_features(self) -> list[LabelledFeature]:
        return [f for f, s in zip(self.features, self.splits, strict=True) if s == "train"]

    def test_features(self) -> list[LabelledFeature]:
        return [f for f, s in zip(self.features, self.splits, strict=True) if s == "test"]

    def features_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "set_id": [f.set_id for f in self.features],
                "trial": [f.trial_id for f in self.features],
                "reheat_class": [f.label for f in self.features],
                "split": self.splits,
                "d_b": [f.value for f in self.features],
            }
        )

    def boundaries_frame(self, points: int = 2001) -> pd.DataFrame:
        """Class transitions of the trained model across the observed D_B range."""
        values = [f.value for f in self.features]
        low, high = min(values), max(values)
        if high <= low:
            high = low + 1.0
        rows = classifier.decision_boundaries(self.model, low, high, points)
        return pd.DataFrame(rows, columns=list(BOUNDARY_COLUMNS))

    def metrics(self) -> dict[str, Any]:
        return {
            "gamma": self.model.gamma,
            "cost": self.model.cost,
            "cv_accuracy": self.grid.best_accuracy,
            "train": self.train_eval.metrics(),
            "test": self.test_eval.metrics(),
        }


def run_phase_reform(signatures: SignatureSet, config: PipelineConfig) -> LabelledSetPartition:
    get_event_service().log_info("phase_reform_starting", signatures=len(signatures))
    cfg = config.classifier
    partition = synth.reform_labelled_sets(
        signatures,
        sets_per_class=cfg.sets_per_class,
        set_size=cfg.set_size,
        test_fraction=cfg.test_fraction,
        seed=config.seed,
    )
    get_event_service().log_info(
        "phase_reform_complete",
        train_sets=len(partition.by_split("train")),
        test_sets=len(partition.by_split("test")),
    )
    return partition


def run_phase_references(
    signatures: SignatureSet,
    partition: LabelledSetPartition,
    fda_dim: int | None,
) -> tuple[dict[int, GaussianStats], FdaProjection | None]:
    """Optional FDA on training signatures, then per-trial pure-oil references."""
    get_event_service().log_info("phase_references_starting", fda_dim=fda_dim)
    train_idx = np.sort(np.concatenate([s.indices for s in partition.by_split("train")]))
    train_signatures = signatures.take(train_idx)

    projection = features.fit_fda([train_signatures], fda_dim) if fda_dim else None
    references = features.trial_references(train_signatures, projection)
    fallback = features.trial_references(signatures, projection)
    for trial, stats in fallback.items():
        if trial not in references:
            logger.warning("reference_from_all_pure_signatures", trial=trial)
            references[trial] = stats

    get_event_service().log_info("phase_references_complete", trials=sorted(references))
    return references, projection


def set_features(
    signatures: SignatureSet,
    partition: LabelledSetPartition,
    references: dict[int, GaussianStats],
    projection: FdaProjection | None,
) -> tuple[list[LabelledFeature], list[str]]:
    feats: list[LabelledFeature] = []
    splits: list[str] = []
    for labelled in partition.sets:
        reference = features.mixed_reference(references, labelled.trial_weights)
        distance = features.set_distance(signatures.take(labelled.indices), reference, projection)
        feats.append(LabelledFeature(distance, labelled.label, labelled.trial, labelled.set_id))
        splits.append(labelled.split)
    return feats, splits


def train(signatures: SignatureSet, config: PipelineConfig) -> TrainingResult:
    """Reform sets, reduce each to its Bhattacharyya distance, tune and fit the SVM, then score it."""
    if 0 not in signatures.class_labels():
        raise LabelError("training needs pure-oil (class 0) signatures for the reference statistics")

    partition = run_phase_reform(signatures, config)
    references, projection = run_phase_references(signatures, partition, config.classifier.fda_dim)

    get_event_service().log_info("phase_features_starting", sets=len(partition.sets))
    feats, splits = set_features(signatures, partition, references, projection)
    train_feats = [f for f, s in zip(feats, splits, strict=True) if s == "train"]
    test_feats = [f for f, s in zip(feats, splits, strict=True) if s == "test"]
    get_event_service().log_info("phase_features_complete", train=len(train_feats), test=len(test_feats))

    cfg = config.classifier
    grid = classifier.grid_sweep(train_feats, cfg.gamma_grid, cfg.cost_grid, cfg.folds, config.seed)
    model = classifier.svm_train(
        train_feats,
        grid.best_gamma,
        grid.best_cost,
        seed=config.seed,
        folds=cfg.folds,
    )

    train_eval = classifier.evaluate(model, train_feats)
    test_eval = classifier.evaluate(model, test_feats)
    baselines = {
        "nearest_neighbor": classifier.baseline_1nn(train_feats, test_feats),
        "nearest_centroid": classifier.baseline_centroid(train_feats, test_feats),
    }
    get_event_service().log_success(
        "phase_classifier_complete",
        gamma=model.gamma,
        cost=model.cost,
        train_accuracy=train_eval.overall_accuracy,
        test_accuracy=test_eval.overall_accuracy,
        pure_vs_heated=test_eval.pure_vs_heated_accuracy,
    )
    return TrainingResult(
        model=model,
        partition=partition,
        references=references,
        projection=projection,
        features=feats,
        splits=splits,
        grid=grid,
        train_eval=train_eval,
        test_eval=test_eval,
        baselines=baselines,
    )


# =============================================================================
# PREDICTION
# =============================================================================

def chunk_sets(signatures: SignatureSet, set_size: int) -> list[tuple[int, int, np.ndarray]]:
    """(trial, reheat_class, indices) per set, chunking each group in file order.

    A trailing chunk with fewer than 2 signatures cannot carry a covariance and is dropped.
    """
    sets = []
    keys = sorted({(int(t), int(c)) for t, c in zip(signatures.trials, signatures.classes, strict=True)})
    for trial, label in keys:
        members = np.flatnonzero((signatures.trials == trial) & (signatures.classes == label))
        for start in range(0, members.size, set_size):
            chunk = members[start : start + set_size]
            if chunk.size < 2:
                logger.warning("prediction_chunk_dropped", trial=trial, reheat_class=label, size=int(chunk.size))
                continue
            sets.append((trial, label, chunk))
    return sets


def predict(
    signatures: SignatureSet,
    model: SvmModel,
    references: dict[int, GaussianStats],
    projection: FdaProjection | None,
    set_size: int,
) -> tuple[pd.DataFrame, classifier.Evaluation | None]:
    """Per-set class estimates; scored when every signature carries a reheat class."""
    rows = []
    for set_id, (trial, label, indices) in enumerate(chunk_sets(signatures, set_size)):
        if trial not in references:
            raise LabelError(f"no pure-oil reference for trial {trial}")
        distance = features.set_distance(signatures.take(indices), references[trial], projection)
        rows.append(
            {
                "set_id": set_id,
                "trial": trial,
                "reheat_class": label,
                "size": int(indices.size),
                "d_b": distance,
                "predicted_class": classifier.svm_predict(model, distance),
            }
        )
    frame = pd.DataFrame(rows, columns=PREDICTION_COLUMNS)

    evaluation = None
    if not frame.empty and (frame["reheat_class"] >= 0).all():
        evaluation = classifier.score_predictions(
            frame["reheat_class"].to_numpy(), frame["predicted_class"].to_numpy(), model.classes
        )
    get_event_service().log_info("prediction_complete", sets=len(frame), scored=evaluation is not None)
    return frame, evaluation


# =============================================================================
# CLUSTERING
# =============================================================================

@dataclass(frozen=True)
class TrialClustering:
    trial: int | str
    sweep: SweepResult
    report: ClusterReport


def cluster(
    signatures: SignatureSet,
    config: ClusterConfig,
    seed: int = 0,
    algorithm: SelectionAlgorithm | None = None,
) -> list[TrialClustering]:
    """Sigma-sweep clustering per trial, or over all trials pooled when ``config.amalgamate`` is set."""
    algorithm = algorithm or config.algorithm
    if config.amalgamate:
        logger.warning("trials_amalgamated", trials=signatures.trial_labels())
        groups: dict[int | str, SignatureSet] = {"all": signatures}
    else:
        groups = dict(synth.trial_subsets(signatures))

    results = []
    for trial, subset in groups.items():
        get_event_service().log_info("trial_clustering_starting", trial=trial, signatures=len(subset))
        sweep, report = sclust.analyze_trial(subset, config, seed=seed, trial=trial, algorithm=algorithm)
        results.append(TrialClustering(trial=trial, sweep=sweep, report=report))
        get_event_service().log_info(
            "trial_clustering_complete",
            trial=trial,
            mode=sweep.mode,
            sigma=sweep.sigma,
            critical=sorted(report.critical),
        )
    return results


# =============================================================================
# EVALUATION AGAINST CHEMISTRY
# =============================================================================

def agreement_table(reports: Sequence[dict[str, Any]], records: Sequence[ChemicalRecord]) -> pd.DataFrame:
    """Jaccard agreement of every report's critical set with each chemical property of its trial.

    A pooled report (trial ``"all"``) is scored against every trial's record.
    """
    by_trial = {r.trial: r for r in records}
    rows = []
    for report in reports:
        predicted = set(report["critical"])
        trial = report["trial"]
        targets = list(by_trial.values()) if trial == "all" else [by_trial.get(int(trial))]
        if targets == [None]:
            logger.warning("no_chemical_record_for_trial", trial=trial)
            continue
        for record in targets:
            for prop in ("TBARS", "TOTOX"):
                reference = synth.chemical_critical(record, prop)
                rows.append(
                    {
                        "trial": record.trial,
                        "algorithm": report["algorithm"],
                        "property": prop,
                        "predicted": format_classes(predicted),
                        "reference": format_classes(reference),
                        "jaccard": sclust.agreement(predicted, reference),
                    }
                )
    return pd.DataFrame(rows, columns=list(AGREEMENT_COLUMNS))

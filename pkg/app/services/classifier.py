from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import structlog
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import StratifiedKFold
from sklearn.neighbors import NearestCentroid

from app.models.model import DEFAULT_COST_GRID, DEFAULT_GAMMA_GRID, SmoSettings
from app.models.spectral import ConfusionMatrix, GridSearchResult, LabelledFeature, PairwiseMachine, SvmModel
from app.utils.errors import ConfigurationError, InsufficientDataError, NonFiniteInputError

logger = structlog.get_logger(__name__)


def _arrays(data: Sequence[LabelledFeature]) -> tuple[np.ndarray, np.ndarray]:
    if not data:
        raise InsufficientDataError("no labelled features")
    x = np.array([f.value for f in data], dtype=np.float64)
    y = np.array([f.label for f in data], dtype=np.int64)
    return x, y


def _rbf(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * np.subtract.outer(a, b) ** 2)


def _standardize(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    center = float(np.mean(x))
    scale = float(np.std(x))
    if scale <= 0:
        scale = 1.0
    return (x - center) / scale, center, scale


# =============================================================================
# PAIRWISE DUAL SOLVER
# =============================================================================

def _solve_dual(
    kernels: np.ndarray,
    y: np.ndarray,
    costs: np.ndarray,
    settings: SmoSettings,
    which: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SMO with second-order working-set selection on a batch of C-SVC duals.

    All problems share the +1/-1 targets ``y``. Problem ``p`` uses kernel ``kernels[which[p]]``
    and box bound ``costs[p]``. Problems advance in lockstep but stop independently, each
    taking exactly the steps it would take alone. Returns (alphas, rhos, iterations); the
    decision function of problem ``p`` is ``sum(alphas[p] * y * K) - rhos[p]``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    problems, n = costs.size, y.size
    which = np.arange(problems) if which is None else np.asarray(which, dtype=np.int64)
    diag = np.diagonal(kernels, axis1=1, axis2=2)[which]
    alpha = np.zeros((problems, n))
    grad = -np.ones((problems, n))
    positive = y > 0
    iterations = np.zeros(problems, dtype=np.int64)

    active = np.arange(problems)
    while active.size:
        a, g, d, k = alpha[active], grad[active], diag[active], which[active]
        c = costs[active, None]
        rows = np.arange(active.size)

        # v = -y * G; I_up may still move up in y*alpha, I_low down
        v = -y * g
        up = np.where(positive, a < c, a > 0)
        low = np.where(positive, a > 0, a < c)
        v_up = np.where(up, v, -np.inf)
        i = np.argmax(v_up, axis=1)
        g_max = v_up[rows, i]
        g_min = np.where(low, v, np.inf).min(axis=1)
        # an empty I_up or I_low gives -inf here
        optimal = ~(g_max - g_min >= settings.tol)

        grad_diff = np.where(optimal, 0.0, g_max)[:, None] - v
        quad = d[rows, i][:, None] + d - 2.0 * kernels[k, i]
        quad = np.where(quad > 0, quad, settings.tau)
        gain = np.where(low & (grad_diff > 0), -(grad_diff**2) / quad, np.inf)
        j = np.argmin(gain, axis=1)
        moving = ~optimal & np.isfinite(gain[rows, j])

        r = np.flatnonzero(moving)
        target, i, j, k = active[r], i[r], j[r], k[r]
        cost = costs[target]
        old_i, old_j = a[r, i], a[r, j]
        grad_i, grad_j = g[r, i], g[r, j]
        q = np.maximum(d[r, i] + d[r, j] - 2.0 * kernels[k, i, j], settings.tau)

        # opposite labels keep alpha_i - alpha_j fixed
        diff = old_i - old_j
        delta = (-grad_i - grad_j) / q
        opp_i, opp_j = old_i + delta, old_j + delta
        ahead = diff > 0
        clip = ahead & (opp_j < 0)
        opp_i, opp_j = np.where(clip, diff, opp_i), np.where(clip, 0.0, opp_j)
        clip = ~ahead & (opp_i < 0)
        opp_i, opp_j = np.where(clip, 0.0, opp_i), np.where(clip, -diff, opp_j)
        clip = ahead & (opp_i > cost)
        opp_i, opp_j = np.where(clip, cost, opp_i), np.where(clip, cost - diff, opp_j)
        clip = ~ahead & (opp_j > cost)
        opp_i, opp_j = np.where(clip, cost + diff, opp_i), np.where(clip, cost, opp_j)

        # equal labels keep alpha_i + alpha_j fixed
        total = old_i + old_j
        delta = (grad_i - grad_j) / q
        same_i, same_j = old_i - delta, old_j + delta
        over = total > cost
        clip = over & (same_i > cost)
        same_i, same_j = np.where(clip, cost, same_i), np.where(clip, total - cost, same_j)
        clip = ~over & (same_j < 0)
        same_i, same_j = np.where(clip, total, same_i), np.where(clip, 0.0, same_j)
        clip = over & (same_j > cost)
        same_i, same_j = np.where(clip, total - cost, same_i), np.where(clip, cost, same_j)
        clip = ~over & (same_i < 0)
        same_i, same_j = np.where(clip, 0.0, same_i), np.where(clip, total, same_j)

        opposite = y[i] != y[j]
        new_i = np.where(opposite, opp_i, same_i)
        new_j = np.where(opposite, opp_j, same_j)
        d_i, d_j = new_i - old_i, new_j - old_j
        alpha[target, i] = new_i
        alpha[target, j] = new_j
        step = y[i][:, None] * kernels[k, i] * d_i[:, None] + y[j][:, None] * kernels[k, j] * d_j[:, None]
        grad[target] += y * step

        iterations[target] += 1
        capped = iterations[target] >= settings.max_iter
        if capped.any():
            logger.warning(
                "smo_iteration_cap_reached",
                max_iter=settings.max_iter,
                n=n,
                costs=costs[target[capped]].tolist(),
            )
        active = target[~capped]

    rhos = np.array([_rho(alpha[p], y, grad[p], costs[p]) for p in range(problems)])
    return alpha, rhos, iterations


def _rho(alpha: np.ndarray, y: np.ndarray, grad: np.ndarray, cost: float) -> float:
    y_grad = y * grad
    at_upper = alpha >= cost
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        return float(np.mean(y_grad[free]))
    upper_side = (at_upper & (y < 0)) | (at_lower & (y > 0))
    lower_side = (at_upper & (y > 0)) | (at_lower & (y < 0))
    ub = float(np.min(y_grad[upper_side])) if upper_side.any() else np.inf
    lb = float(np.max(y_grad[lower_side])) if lower_side.any() else -np.inf
    if not np.isfinite(ub) or not np.isfinite(lb):
        return float(ub if np.isfinite(ub) else lb)
    return (ub + lb) / 2.0


def _train_pair(
    x: np.ndarray,
    targets: np.ndarray,
    positive: int,
    negative: int,
    cells: Sequence[tuple[float, float]],
    settings: SmoSettings | None,
) -> list[PairwiseMachine]:
    """One machine per (gamma, cost) cell for a single class pair, all cells solved together."""
    z, center, scale = _standardize(x)
    gammas = sorted({gamma for gamma, _ in cells})
    kernels = np.stack([_rbf(z, z, gamma) for gamma in gammas])
    which = np.array([gammas.index(gamma) for gamma, _ in cells])
    costs = np.array([cost for _, cost in cells], dtype=np.float64)
    alphas, rhos, iterations = _solve_dual(kernels, targets, costs, settings or SmoSettings(), which)
    logger.debug(
        "pairwise_machines_trained",
        classes=[positive, negative],
        cells=len(cells),
        iterations=int(iterations.max()),
    )
    machines = []
    for alpha, rho in zip(alphas, rhos, strict=True):
        support = alpha > 0
        machines.append(
            PairwiseMachine(
                positive=positive,
                negative=negative,
                support=z[support],
                targets=targets[support],
                alphas=alpha[support],
                bias=float(rho),
                center=center,
                scale=scale,
            )
        )
    return machines


# =============================================================================
# ONE-VS-ONE MODEL
# =============================================================================

def _fit(
    x: np.ndarray,
    y: np.ndarray,
    cells: Sequence[tuple[float, float]],
    settings: SmoSettings | None,
    classes: Sequence[int] | None = None,
) -> tuple[tuple[int, ...], list[tuple[PairwiseMachine, ...]]]:
    """Pairwise machines for every (gamma, cost) cell, in cell order."""
    present = sorted(int(c) for c in np.unique(y))
    classes = sorted(classes) if classes is not None else present
    empty = [c for c in classes if c not in present]
    if empty:
        raise InsufficientDataError(f"class(es) {empty} have no training samples")
    if len(classes) < 2:
        raise InsufficientDataError("SVM training needs at least 2 classes")

    per_cell: list[list[PairwiseMachine]] = [[] for _ in cells]
    for positive, negative in combinations(classes, 2):
        mask = (y == positive) | (y == negative)
        targets = np.where(y[mask] == positive, 1.0, -1.0)
        trained = _train_pair(x[mask], targets, positive, negative, cells, settings)
        for machines, machine in zip(per_cell, trained, strict=True):
            machines.append(machine)
    return tuple(classes), [tuple(machines) for machines in per_cell]


def machine_decision(machine: PairwiseMachine, x: np.ndarray | float, gamma: float) -> np.ndarray:
    """Decision values of one pairwise machine at raw feature values; >= 0 votes for the smaller class."""
    z = (np.atleast_1d(np.asarray(x, dtype=np.float64)) - machine.center) / machine.scale
    return _rbf(z, machine.support, gamma) @ (machine.alphas * machine.targets) - machine.bias


def _vote(classes: Sequence[int], machines: Sequence[PairwiseMachine], gamma: float, x: np.ndarray) -> np.ndarray:
    index = {c: k for k, c in enumerate(classes)}
    votes = np.zeros((x.size, len(classes)), dtype=np.int64)
    for machine in machines:
        wins_positive = machine_decision(machine, x, gamma) >= 0
        votes[wins_positive, index[machine.positive]] += 1
        votes[~wins_positive, index[machine.negative]] += 1
    # argmax returns the first maximum, i.e. the smaller class index on ties
    return np.asarray(classes)[np.argmax(votes, axis=1)]


def svm_train(
    data: Sequence[LabelledFeature],
    gamma: float,
    cost: float,
    seed: int = 0,
    settings: SmoSettings | None = None,
    classes: Sequence[int] | None = None,
    folds: int | None = None,
) -> SvmModel:
    """One-vs-one RBF machines over the scalar feature.

    The solver is deterministic; ``seed`` and ``folds`` are carried as training metadata.
    """
    if gamma <= 0 or cost <= 0:
        raise ConfigurationError(f"gamma and cost must be positive, got gamma={gamma} cost={cost}")
    x, y = _arrays(data)
    class_ids, (machines,) = _fit(x, y, [(gamma, cost)], settings, classes)
    logger.info("svm_trained", gamma=gamma, cost=cost, classes=list(class_ids), samples=x.size)
    return SvmModel(gamma=gamma, cost=cost, classes=class_ids, machines=machines, seed=seed, folds=folds)


def svm_predict_many(model: SvmModel, x: np.ndarray | Sequence[float]) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("cannot classify a non-finite feature")
    return _vote(model.classes, model.machines, model.gamma, x)


def svm_predict(model: SvmModel, x: float) -> int:
    return int(svm_predict_many(model, [x])[0])


def decision_boundaries(model: SvmModel, low: float, high: float, points: int = 2001) -> list[tuple[float, int, int]]:
    """Feature values where the predicted class changes on a dense grid over [low, high].

    Each entry is (midpoint of the grid step, class below, class above).
    """
    if not np.isfinite(low) or not np.isfinite(high) or high <= low or points < 2:
        raise ConfigurationError(f"boundary grid needs finite low < high and 2+ points, got [{low}, {high}] x {points}")
    grid = np.linspace(low, high, points)
    predicted = svm_predict_many(model, grid)
    steps = np.flatnonzero(predicted[1:] != predicted[:-1])
    return [(float((grid[k] + grid[k + 1]) / 2.0), int(predicted[k]), int(predicted[k + 1])) for k in steps]


# =============================================================================
# GRID SWEEP
# =============================================================================

def stratified_folds(y: np.ndarray, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if folds < 2:
        raise ConfigurationError(f"cross-validation needs at least 2 folds, got {folds}")
    _, counts = np.unique(y, return_counts=True)
    if folds > counts.min():
        raise InsufficientDataError(f"{folds} folds exceed the smallest class size {int(counts.min())}")
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    return list(splitter.split(np.zeros((y.size, 1)), y))


def _cross_val(
    x: np.ndarray,
    y: np.ndarray,
    splits: Sequence[tuple[np.ndarray, np.ndarray]],
    cells: Sequence[tuple[float, float]],
    settings: SmoSettings | None,
) -> np.ndarray:
    correct = np.zeros(len(cells), dtype=np.int64)
    for train_idx, test_idx in splits:
        classes, per_cell = _fit(x[train_idx], y[train_idx], cells, settings)
        for index, ((gamma, _), machines) in enumerate(zip(cells, per_cell, strict=True)):
            correct[index] += int(np.sum(_vote(classes, machines, gamma, x[test_idx]) == y[test_idx]))
    return correct / y.size


def cross_val_accuracy(
    x: np.ndarray,
    y: np.ndarray,
    splits: Sequence[tuple[np.ndarray, np.ndarray]],
    gamma: float,
    cost: float,
    settings: SmoSettings | None = None,
) -> float:
    """Fraction of samples predicted correctly, pooled over the held-out folds."""
    return float(_cross_val(x, y, splits, [(gamma, cost)], settings)[0])


def grid_sweep(
    data: Sequence[LabelledFeature],
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    cost_grid: Sequence[float] = DEFAULT_COST_GRID,
    folds: int = 5,
    seed: int = 0,
    settings: SmoSettings | None = None,
) -> GridSearchResult:
    """Stratified k-fold accuracy for every (gamma, cost); ties go to the smaller cost, then smaller gamma."""
    if not gamma_grid or not cost_grid:
        raise ConfigurationError("gamma and cost grids must be non-empty")
    x, y = _arrays(data)
    gammas = tuple(sorted(float(g) for g in gamma_grid))
    costs = tuple(sorted(float(c) for c in cost_grid))
    splits = stratified_folds(y, folds, seed)

    logger.info("grid_sweep_starting", gammas=len(gammas), costs=len(costs), folds=folds, seed=seed)
    cells = [(gamma, cost) for gamma in gammas for cost in costs]
    accuracy = _cross_val(x, y, splits, cells, settings).reshape(len(gammas), len(costs))

    best_g, best_c = 0, 0
    for ci in range(len(costs)):
        for gi in range(len(gammas)):
            if accuracy[gi, ci] > accuracy[best_g, best_c]:
                best_g, best_c = gi, ci

    logger.info(
        "grid_sweep_complete",
        best_gamma=gammas[best_g],
        best_cost=costs[best_c],
        accuracy=float(accuracy[best_g, best_c]),
    )
    return GridSearchResult(
        gammas=gammas,
        costs=costs,
        accuracy=accuracy,
        best_gamma=gammas[best_g],
        best_cost=costs[best_c],
        folds=folds,
        seed=seed,
    )


# =============================================================================
# EVALUATION
# =============================================================================

def one_vs_rest_accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    total = tp + tn + fp + fn
    if total <= 0:
        raise InsufficientDataError("no samples to score")
    return (tp + tn) / total


@dataclass(frozen=True)
class Evaluation:
    confusion: ConfusionMatrix
    classes: tuple[int, ...]
    accuracy: float
    overall_accuracy: float
    per_class_accuracy: dict[int, float | None] = field(default_factory=dict)
    heated_only_accuracy: float | None = None
    pure_vs_heated_accuracy: float | None = None

    def metrics(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "macro_accuracy": self.accuracy,
            "per_class_accuracy": {str(c): a for c, a in self.per_class_accuracy.items()},
            "heated_only_accuracy": self.heated_only_accuracy,
            "pure_vs_heated_accuracy": self.pure_vs_heated_accuracy,
            "samples": self.confusion.total,
        }


def score_predictions(y_true: np.ndarray, y_pred: np.ndarray, classes: Sequence[int] | None = None) -> Evaluation:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise InsufficientDataError("nothing to evaluate")
    labels = sorted(set(classes or ()) | set(y_true.tolist()) | set(y_pred.tolist()))
    counts = confusion_matrix(y_true, y_pred, labels=labels)
    confusion = ConfusionMatrix(counts)

    total = confusion.total
    ovr = []
    per_class: dict[int, float | None] = {}
    for k, label in enumerate(labels):
        tp = int(counts[k, k])
        fn = int(counts[k, :].sum()) - tp
        fp = int(counts[:, k].sum()) - tp
        ovr.append(one_vs_rest_accuracy(tp, total - tp - fn - fp, fp, fn))
        per_class[label] = tp / (tp + fn) if tp + fn else None

    heated = y_true >= 1
    heated_only = float(np.mean(y_pred[heated] == y_true[heated])) if heated.any() else None
    pure_vs_heated = float(np.mean((y_pred >= 1) == heated))

    return Evaluation(
        confusion=confusion,
        classes=tuple(labels),
        accuracy=float(np.mean(ovr)),
        overall_accuracy=confusion.fraction_correct,
        per_class_accuracy=per_class,
        heated_only_accuracy=heated_only,
        pure_vs_heated_accuracy=pure_vs_heated,
    )


def evaluate(model: SvmModel, data: Sequence[LabelledFeature]) -> Evaluation:
    x, y = _arrays(data)
    return score_predictions(y, svm_predict_many(model, x), model.classes)


# =============================================================================
# BASELINES
# =============================================================================

def _check_baseline_inputs(train: Sequence[LabelledFeature], test: Sequence[LabelledFeature]) -> None:
    if not train:
        raise InsufficientDataError("baseline needs a non-empty training set")
    if not test:
        raise InsufficientDataError("baseline needs a non-empty test set")


def predict_1nn(train_x: np.ndarray, train_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    distances = np.abs(np.subtract.outer(x, train_x))
    nearest = distances <= distances.min(axis=1, keepdims=True)
    # among equidistant neighbours the smallest label wins
    return np.where(nearest, train_y[None, :], np.iinfo(np.int64).max).min(axis=1)


def baseline_1nn(train: Sequence[LabelledFeature], test: Sequence[LabelledFeature]) -> ConfusionMatrix:
    _check_baseline_inputs(train, test)
    train_x, train_y = _arrays(train)
    test_x, test_y = _arrays(test)
    return score_predictions(test_y, predict_1nn(train_x, train_y, test_x), train_y.tolist()).confusion


def baseline_centroid(train: Sequence[LabelledFeature], test: Sequence[LabelledFeature]) -> ConfusionMatrix:
    """Nearest class mean; NearestCentroid's argmin resolves ties toward the smaller class."""
    _check_baseline_inputs(train, test)
    train_x, train_y = _arrays(train)
    test_x, test_y = _arrays(test)
    if np.unique(train_y).size < 2:
        predicted = np.full(test_y.size, train_y[0])
    else:
        centroid = NearestCentroid().fit(train_x.reshape(-1, 1), train_y)
        predicted = centroid.predict(test_x.reshape(-1, 1))
    return score_predictions(test_y, predicted, train_y.tolist()).confusion

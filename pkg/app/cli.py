"""oilscan command line.

    oilscan simulate   --out DIR
    oilscan preprocess --cube CUBE --dark DARK --trial T --class C --out DIR
    oilscan train      --signatures CSV --out DIR
    oilscan predict    --model DIR --signatures CSV --out DIR
    oilscan cluster    --signatures CSV --algorithm LBW --out DIR
    oilscan eval       --reports DIR --chemical CSV --out DIR
    oilscan report     RUN_DIR [RUN_DIR ...] --out DIR

Every command accepts ``--config FILE`` and ``--seed N`` and writes
``run_manifest.json`` into ``--out``, on success and on failure.
Exit codes: 0 success, 1 computational failure, 2 input or usage error.
"""

import argparse
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import ValidationError

from app import __version__
from app.models.model import PipelineConfig
from app.models.spectral import FdaProjection, GaussianStats, SvmModel, WindowSpec
from app.services import msicube, pipeline, report_service, synth
from app.services.config_service import ConfigService, load_environment
from app.services.event_service import get_event_service, init_event_service, reset_event_service
from app.storage.msic import load_cube, load_dark
from app.storage.tables import confusion_to_frame, read_signatures, sweep_to_frame, write_chemical, write_signatures
from app.utils.errors import ComputationError, ConfigurationError, InputDataError
from app.utils.utils import load_json, save_csv, save_json


# =============================================================================
# ARGUMENT TYPES
# =============================================================================

def parse_sigma_grid(text: str) -> dict[str, Any]:
    """``min:max:count`` for a geometric grid, or an explicit comma-separated list."""
    try:
        if ":" in text:
            low, high, count = text.split(":")
            return {"sigma_grid": None, "sigma_min": float(low), "sigma_max": float(high), "sigma_points": int(count)}
        return {"sigma_grid": tuple(float(v) for v in text.split(",") if v.strip())}
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid sigma grid {text!r}: use min:max:count or a comma list") from e


def parse_mode_range(text: str) -> tuple[int, int]:
    try:
        low, high = (int(v) for v in text.split(":"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid mode range {text!r}: use low:high, e.g. 3:6") from e
    return low, high


# =============================================================================
# PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="oilscan", description="Reheated oil multispectral analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="generate a planted-drift signature dataset")

    p = sub.add_parser("preprocess", parents=[common], help="dark-correct, filter and crop one cube")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--dark", type=Path, required=True)
    p.add_argument("--window-row", type=int)
    p.add_argument("--window-col", type=int)
    p.add_argument("--window-side", type=int)
    p.add_argument("--half-width", type=int)
    p.add_argument("--filter-mode", choices=["mean", "median"])
    p.add_argument("--trial", type=int, default=-1)
    p.add_argument("--class", dest="reheat_class", type=int, default=-1)

    p = sub.add_parser("train", parents=[common], help="fit references and the SVM on labelled signatures")
    p.add_argument("--signatures", type=Path, required=True)
    p.add_argument("--fda-dim", type=int)

    p = sub.add_parser("predict", parents=[common], help="classify signature sets with a trained model")
    p.add_argument("--model", type=Path, required=True, help="output directory of a train run")
    p.add_argument("--signatures", type=Path, required=True)

    p = sub.add_parser("cluster", parents=[common], help="sigma-sweep spectral clustering per trial")
    p.add_argument("--signatures", type=Path, required=True)
    p.add_argument("--algorithm", choices=["LGV", "LBW"])
    p.add_argument("--sigma-grid", type=parse_sigma_grid)
    p.add_argument("--mode-range", type=parse_mode_range)
    p.add_argument("--subsample", type=int)
    p.add_argument("--amalgamate", action="store_true", default=None, help="cluster all trials together")
    p.add_argument("--eigensolver", choices=["auto", "lapack", "jacobi"])

    p = sub.add_parser("eval", parents=[common], help="score critical sets against chemical analysis")
    p.add_argument("--reports", type=Path, nargs="+", required=True, help="cluster report JSONs or run directories")
    p.add_argument("--chemical", type=Path, required=True)

    p = sub.add_parser("report", parents=[common], help="HTML summary of run directories")
    p.add_argument("runs", type=Path, nargs="+")

    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file values with command-line flags layered on top."""
    data = ConfigService(args.config).load().model_dump()
    if args.seed is not None:
        data["seed"] = args.seed
        data["synth"]["seed"] = args.seed

    flags = vars(args)
    preprocess = {
        "window_row": flags.get("window_row"),
        "window_col": flags.get("window_col"),
        "window_side": flags.get("window_side"),
        "half_width": flags.get("half_width"),
        "filter_mode": flags.get("filter_mode"),
    }
    data["preprocess"].update({k: v for k, v in preprocess.items() if v is not None})
    if flags.get("fda_dim") is not None:
        data["classifier"]["fda_dim"] = flags["fda_dim"]

    cluster = {
        "algorithm": flags.get("algorithm"),
        "mode_range": flags.get("mode_range"),
        "subsample": flags.get("subsample"),
        "amalgamate": flags.get("amalgamate"),
        "eigensolver": flags.get("eigensolver"),
    }
    data["cluster"].update({k: v for k, v in cluster.items() if v is not None})
    if flags.get("sigma_grid") is not None:
        data["cluster"].update(flags["sigma_grid"])

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid command-line override: {e}") from e


def _inputs(args: argparse.Namespace) -> dict[str, str]:
    keys = ("config", "cube", "dark", "signatures", "model", "chemical")
    found = {k: str(getattr(args, k)) for k in keys if getattr(args, k, None) is not None}
    for name in ("reports", "runs"):
        for i, path in enumerate(getattr(args, name, None) or []):
            found[f"{name}[{i}]"] = str(path)
    return found


def _save_json(data: Any, path: Path) -> Path:
    return get_event_service().record_output(save_json(data, path))


def _save_csv(frame: pd.DataFrame, path: Path) -> Path:
    return get_event_service().record_output(save_csv(frame, path))


def _load_artifact(path: Path) -> dict[str, Any]:
    try:
        return load_json(path)
    except FileNotFoundError as e:
        raise InputDataError(f"model artifact not found: {path}") from e
    except ValueError as e:
        raise InputDataError(f"cannot parse model artifact {path}: {e}") from e


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_simulate(args: argparse.Namespace, config: PipelineConfig) -> str:
    dataset = synth.generate(config.synth)
    signatures = dataset.pooled()
    get_event_service().record_output(write_signatures(signatures, args.out / "signatures.csv"))
    _save_json(dataset.ground_truth(), args.out / "ground_truth.json")
    get_event_service().record_output(write_chemical(dataset.chemical_records(), args.out / "chemical.csv"))
    return f"simulated {len(signatures)} signatures over {len(dataset.trials)} trial(s) -> {args.out}"


def cmd_preprocess(args: argparse.Namespace, config: PipelineConfig) -> str:
    cfg = config.preprocess
    cube = load_cube(args.cube)
    dark = load_dark(args.dark)
    window = WindowSpec(cfg.window_row, cfg.window_col, cfg.window_side)
    signatures = msicube.preprocess(
        cube, dark, window, cfg.half_width, cfg.filter_mode, trial=args.trial, reheat_class=args.reheat_class
    )
    get_event_service().record_output(write_signatures(signatures, args.out / "signatures.csv"))
    return f"{len(signatures)} signatures from {args.cube.name} -> {args.out}"


def cmd_train(args: argparse.Namespace, config: PipelineConfig) -> str:
    signatures = read_signatures(args.signatures)
    result = pipeline.train(signatures, config)
    out = args.out

    _save_json(result.model.to_dict(), out / "svm_model.json")
    references = {str(t): s.to_dict() for t, s in sorted(result.references.items())}
    _save_json({"references": references}, out / "references.json")
    if result.projection is not None:
        _save_json(result.projection.to_dict(), out / "fda.json")
    _save_csv(result.features_frame(), out / "features.csv")
    _save_csv(result.boundaries_frame(), out / "decision_boundaries.csv")

    grid = result.grid
    cells = [
        {"gamma": g, "cost": c, "accuracy": float(grid.accuracy[i, j])}
        for i, g in enumerate(grid.gammas)
        for j, c in enumerate(grid.costs)
    ]
    _save_csv(pd.DataFrame(cells, columns=["gamma", "cost", "accuracy"]), out / "grid_accuracy.csv")
    _save_csv(confusion_to_frame(result.train_eval.confusion, result.train_eval.classes), out / "confusion_train.csv")
    _save_csv(confusion_to_frame(result.test_eval.confusion, result.test_eval.classes), out / "confusion_test.csv")
    _save_json(result.metrics(), out / "metrics.json")
    _save_json(
        {
            name: {"fraction_correct": confusion.fraction_correct, "confusion": confusion.counts.tolist()}
            for name, confusion in result.baselines.items()
        },
        out / "baselines.json",
    )
    return (
        f"gamma={result.model.gamma:g} cost={result.model.cost:g} "
        f"train={result.train_eval.overall_accuracy:.4f} test={result.test_eval.overall_accuracy:.4f} "
        f"pure_vs_heated={result.test_eval.pure_vs_heated_accuracy:.4f}"
    )


def load_trained(model_dir: Path) -> tuple[SvmModel, dict[int, GaussianStats], FdaProjection | None]:
    """SVM, per-trial references and optional FDA basis written by ``train``."""
    fda_path = model_dir / "fda.json"
    try:
        model = SvmModel.from_dict(_load_artifact(model_dir / "svm_model.json"))
        stored = _load_artifact(model_dir / "references.json")["references"]
        references = {int(t): GaussianStats.from_dict(s) for t, s in stored.items()}
        projection = FdaProjection.from_dict(_load_artifact(fda_path)) if fda_path.exists() else None
    except (KeyError, TypeError) as e:
        raise InputDataError(f"malformed model artifacts in {model_dir}: {e!r}") from e
    return model, references, projection


def cmd_predict(args: argparse.Namespace, config: PipelineConfig) -> str:
    model, references, projection = load_trained(args.model)
    signatures = read_signatures(args.signatures)
    frame, evaluation = pipeline.predict(signatures, model, references, projection, config.classifier.set_size)
    _save_csv(frame, args.out / "predictions.csv")
    if evaluation is None:
        return f"{len(frame)} set(s) classified -> {args.out}"
    _save_json(evaluation.metrics(), args.out / "metrics.json")
    return f"{len(frame)} set(s) classified, accuracy={evaluation.overall_accuracy:.4f}"


def cmd_cluster(args: argparse.Namespace, config: PipelineConfig) -> str:
    signatures = read_signatures(args.signatures)
    results = pipeline.cluster(signatures, config.cluster, seed=config.seed)
    critical = {}
    for result in results:
        _save_csv(sweep_to_frame(result.sweep), args.out / f"sweep_trial_{result.trial}.csv")
        _save_json(result.report.to_dict(), args.out / f"cluster_report_{result.trial}.json")
        critical[str(result.trial)] = sorted(result.report.critical)
    _save_json({"algorithm": config.cluster.algorithm, "critical": critical}, args.out / "critical_sets.json")
    return "\n".join(f"trial {t}: critical {{{', '.join(map(str, c))}}}" for t, c in critical.items())


def _report_paths(paths: Sequence[Path]) -> list[Path]:
    found = []
    for path in paths:
        if path.is_dir():
            found.extend(sorted(path.glob("cluster_report_*.json")))
        else:
            found.append(path)
    if not found:
        raise InputDataError("no cluster reports found")
    return found


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> str:
    reports = [_load_artifact(p) for p in _report_paths(args.reports)]
    records = synth.load_chemical(args.chemical)
    table = pipeline.agreement_table(reports, records)
    _save_csv(table, args.out / "agreement.csv")
    if table.empty:
        return "no report matched a chemical record"
    return table.groupby(["algorithm", "property"])["jaccard"].mean().to_string()


def cmd_report(args: argparse.Namespace, config: PipelineConfig) -> str:
    path, summary = report_service.write_report(args.runs, args.out / "report.html")
    get_event_service().record_output(path)
    return summary


COMMANDS: dict[str, Callable[[argparse.Namespace, PipelineConfig], str]] = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "report": cmd_report,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    load_environment()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory {args.out}: {e}", file=sys.stderr)
        return InputDataError.exit_code
    events = init_event_service(args.command, args.out)
    config: PipelineConfig | None = None
    status = "failed"

    try:
        config = resolve_config(args)
        events.log_info("command_starting", seed=config.seed)
        summary = COMMANDS[args.command](args, config)
        status = "success"
        events.log_success("command_complete", outputs=len(events.outputs))
        print(summary)
        return 0

    except InputDataError as e:
        events.log_error("command_input_error", str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    except ComputationError as e:
        events.log_error("command_computation_error", str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    except Exception as e:
        events.log_error("command_fatal_error", str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return 1

    finally:
        events.write_manifest(
            status=status,
            config=config.model_dump(mode="json") if config is not None else {},
            inputs=_inputs(args),
            seed=config.seed if config is not None else args.seed,
        )
        reset_event_service()

import html
from datetime import datetime
from pathlib import Path
from typing import Any

import pandas as pd
import structlog

from app.services.event_service import MANIFEST_NAME
from app.storage.tables import AGREEMENT_COLUMNS, read_table
from app.utils.errors import InputDataError
from app.utils.utils import load_json, save_html

logger = structlog.get_logger(__name__)

_CELL = "padding:8px 12px;border-bottom:1px solid #eee;"
_HEAD = "padding:10px 12px;text-align:left;"


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return html.escape(str(value))


def collect_run(run_dir: Path) -> dict[str, Any]:
    """Manifest, metrics, cluster reports and agreement rows found in one run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise InputDataError(f"run directory not found: {run_dir}")
    manifest_path = run_dir / MANIFEST_NAME
    run: dict[str, Any] = {
        "dir": str(run_dir),
        "manifest": load_json(manifest_path) if manifest_path.exists() else {},
        "metrics": load_json(run_dir / "metrics.json") if (run_dir / "metrics.json").exists() else None,
        "clusters": [load_json(p) for p in sorted(run_dir.glob("cluster_report_*.json"))],
        "agreement": None,
    }
    if (run_dir / "agreement.csv").exists():
        run["agreement"] = read_table(run_dir / "agreement.csv", AGREEMENT_COLUMNS)
    return run


def _metrics_cards(metrics: dict[str, Any], color: str) -> str:
    test = metrics.get("test", metrics)
    cards = [
        ("Overall accuracy", test.get("overall_accuracy")),
        ("Heated-only accuracy", test.get("heated_only_accuracy")),
        ("Pure vs heated", test.get("pure_vs_heated_accuracy")),
        ("gamma / cost", f"{metrics['gamma']:g} / {metrics['cost']:g}" if "gamma" in metrics else None),
    ]
    return "".join(
        f"""
    <div style="flex:1;background:#fff;border:1px solid #d5e8d4;border-radius:4px;padding:16px;text-align:center;">
      <div style="font-size:24px;font-weight:bold;color:{color};">{_fmt(value)}</div>
      <div style="font-size:12px;color:#777;margin-top:4px;">{label}</div>
    </div>"""
        for label, value in cards
    )


def _cluster_rows(clusters: list[dict[str, Any]]) -> str:
    rows = ""
    for report in clusters:
        critical = ", ".join(str(c) for c in report.get("critical", [])) or "∅"
        purities = report.get("purities", {})
        mean_purity = sum(purities.values()) / len(purities) if purities else None
        rows += f"""
        <tr>
          <td style="{_CELL}font-family:monospace;">{_fmt(report.get("trial"))}</td>
          <td style="{_CELL}">{_fmt(report.get("algorithm"))}</td>
          <td style="{_CELL}">{_fmt(report.get("mode"))}</td>
          <td style="{_CELL}">{_fmt(report.get("sigma"))}</td>
          <td style="{_CELL}font-weight:bold;">{critical}</td>
          <td style="{_CELL}">{_fmt(mean_purity)}</td>
        </tr>"""
    return rows


def _agreement_rows(agreement: pd.DataFrame) -> str:
    rows = ""
    for rec in agreement.to_dict(orient="records"):
        score = float(rec["jaccard"])
        badge = "#27ae60" if score == 1.0 else ("#e67e22" if score > 0 else "#e74c3c")
        rows += f"""
        <tr>
          <td style="{_CELL}font-family:monospace;">{_fmt(rec["trial"])}</td>
          <td style="{_CELL}">{_fmt(rec["algorithm"])}</td>
          <td style="{_CELL}">{_fmt(rec["property"])}</td>
          <td style="{_CELL}">{_fmt(rec["predicted"]) or "∅"}</td>
          <td style="{_CELL}">{_fmt(rec["reference"]) or "∅"}</td>
          <td style="{_CELL}"><span style="background:{badge};color:#fff;padding:2px 8px;border-radius:3px;font-size:11px;">{score:.3f}</span></td>
        </tr>"""
    return rows


def _table(headers: list[str], rows: str) -> str:
    head = "".join(f"<th style='{_HEAD}'>{h}</th>" for h in headers)
    return f"""
    <table style="width:100%;border-collapse:collapse;font-size:13px;margin-bottom:16px;">
      <thead><tr style="background:#2c3e50;color:#fff;">{head}</tr></thead>
      <tbody>{rows}
      </tbody>
    </table>"""


def _run_section(run: dict[str, Any]) -> str:
    manifest = run["manifest"]
    failed = manifest.get("status") == "failed"
    color = "#e74c3c" if failed else "#27ae60"
    title = f"{_fmt(manifest.get('command', 'run'))} &middot; {_fmt(manifest.get('run_id', ''))}"
    sub = f"{_fmt(run['dir'])} &nbsp;|&nbsp; seed {_fmt(manifest.get('seed'))}"
    if manifest.get("duration_s") is not None:
        sub += f" &nbsp;|&nbsp; {manifest['duration_s']:.1f} s"

    body = ""
    if run["metrics"] and ("test" in run["metrics"] or "overall_accuracy" in run["metrics"]):
        body += f'<div style="display:flex;gap:16px;margin-bottom:16px;">{_metrics_cards(run["metrics"], color)}</div>'
    if run["clusters"]:
        body += _table(
            ["Trial", "Algorithm", "Mode k*", "Dominant sigma", "Critical classes", "Mean purity"],
            _cluster_rows(run["clusters"]),
        )
    if run["agreement"] is not None and not run["agreement"].empty:
        body += _table(
            ["Trial", "Algorithm", "Property", "Predicted", "Chemical", "Jaccard"],
            _agreement_rows(run["agreement"]),
        )
    if not body:
        body = '<p style="color:#777;">No metrics, cluster reports or agreement tables in this run.</p>'

    return f"""
  <div style="background:{color};padding:16px 32px;">
    <h2 style="margin:0;color:#fff;font-size:16px;">{title}</h2>
    <p style="margin:6px 0 0;color:rgba(255,255,255,0.85);font-size:12px;">{sub}</p>
  </div>
  <div style="padding:16px 32px;">{body}
  </div>"""


def build_html_report(runs: list[dict[str, Any]]) -> str:
    run_date = datetime.now().strftime("%A, %B %d, %Y at %I:%M %p")
    sections = "".join(_run_section(run) for run in runs)
    return f"""<!DOCTYPE html>
<html>
<head><meta charset="utf-8"></head>
<body style="font-family:Arial,sans-serif;font-size:14px;color:#333;margin:0;padding:0;background:#f5f5f5;">
<div style="max-width:960px;margin:20px auto;background:#fff;border-radius:6px;overflow:hidden;box-shadow:0 2px 8px rgba(0,0,0,.1);">

  <div style="background:#2980b9;padding:24px 32px;">
    <h1 style="margin:0;color:#fff;font-size:20px;">Reheated Oil Analysis Summary</h1>
    <p style="margin:8px 0 0;color:rgba(255,255,255,0.85);font-size:13px;">{len(runs)} run(s)</p>
  </div>
{sections}
  <div style="padding:16px 32px;background:#ecf0f1;font-size:11px;color:#7f8c8d;text-align:center;">
    Generated by oilscan &bull; {run_date}
  </div>

</div>
</body>
</html>"""


def build_plain_text_report(runs: list[dict[str, Any]]) -> str:
    lines = [f"Reheated oil analysis: {len(runs)} run(s)", ""]
    for run in runs:
        manifest = run["manifest"]
        lines.append(f"{manifest.get('command', 'run')} {manifest.get('run_id', '')} [{run['dir']}]")
        metrics = run["metrics"] or {}
        test = metrics.get("test", metrics)
        if "overall_accuracy" in test:
            pure_vs_heated = _fmt(test.get("pure_vs_heated_accuracy"))
            lines.append(f"  accuracy={test['overall_accuracy']:.4f} pure_vs_heated={pure_vs_heated}")
        for report in run["clusters"]:
            critical = ",".join(str(c) for c in report.get("critical", [])) or "-"
            lines.append(f"  trial {report['trial']} {report['algorithm']} k*={report['mode']} critical={critical}")
        if run["agreement"] is not None and not run["agreement"].empty:
            lines.append(f"  mean jaccard={run['agreement']['jaccard'].mean():.3f}")
    return "\n".join(lines)


def write_report(run_dirs: list[Path], out_path: Path) -> tuple[Path, str]:
    """Render the HTML summary of the given run directories; returns the path and a text summary."""
    runs = [collect_run(d) for d in run_dirs]
    path = save_html(build_html_report(runs), out_path)
    logger.info("report_written", runs=len(runs), path=str(path))
    return path, build_plain_text_report(runs)

"""EvalReport persistence and rendering.

``summary.json`` holds the reduced metrics; ``summary.txt`` is the same in
human-readable form. Both can be regenerated from ``records.jsonl`` plus
``manifest.json`` alone, which is what :func:`load_report` does.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..core import RunConfig
from ..errors import ConfigError
from .evaluate import MANIFEST, EvalReport, build_report, read_records

SUMMARY_JSON = "summary.json"
SUMMARY_TXT = "summary.txt"


def _fmt_config(config: RunConfig) -> str:
    d = config.to_dict()
    return ", ".join(f"{k}={d[k]}" for k in d)


def render_summary(report: EvalReport) -> str:
    lines = [
        f"variant: {report.variant}",
        f"config: {_fmt_config(report.config)}",
        f"instances: {len(report.records)}  scored: {report.scored}  failed: {report.failed}",
        f"accuracy: {report.accuracy:.4f} ({report.correct}/{report.scored})",
    ]
    if len(report.split_accuracy) > 1:
        for name, acc in report.split_accuracy.items():
            lines.append(f"  split {name}: {acc:.4f}")
    lines.append(f"mean generated tokens per instance: {report.mean_total_tokens:.1f}")
    if report.round_tool_calls:
        lines.append("round  tool_calls  reasoning_tokens")
        for i, (calls, toks) in enumerate(zip(report.round_tool_calls, report.round_reasoning_tokens), 1):
            lines.append(f"{i:>5}  {calls:>10.2f}  {toks:>16.1f}")
    failed = [r for r in report.records if r.failed]
    if failed:
        lines.append("failed instances:")
        lines.extend(f"  {r.id}: {r.error}" for r in failed)
    if report.wall_clock:
        lines.append("wall clock: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(report.wall_clock.items())))
    return "\n".join(lines) + "\n"


def write_summary(report: EvalReport, run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    data = report.summary()
    data["checkpoint_hits"] = report.checkpoint_hits
    data["wall_clock"] = report.wall_clock
    (run_dir / SUMMARY_JSON).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (run_dir / SUMMARY_TXT).write_text(render_summary(report), encoding="utf-8")


def load_report(run_dir: str | Path) -> EvalReport:
    """Rebuild a report from a run directory's persisted records."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} is not a run directory (no {MANIFEST})")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    config = RunConfig.from_dict(manifest["config"])
    wall = {}
    summary_path = run_dir / SUMMARY_JSON
    if summary_path.exists():
        wall = json.loads(summary_path.read_text(encoding="utf-8")).get("wall_clock", {})
    return build_report(read_records(run_dir), config, manifest["variant"], wall_clock=wall, run_dir=str(run_dir))

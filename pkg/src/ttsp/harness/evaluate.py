"""Dataset evaluation with checkpoint/resume.

A run lives in ``<out>/<dataset hash[:12]>-<config hash[:12]>/``:

* ``manifest.json``: config, variant, prompt hash, dataset path and hashes
* ``records.jsonl``: one scored record per finished instance (the checkpoint)
* ``results/<n>.json``: the full serialized RunResult of instance n
* ``traces.jsonl``: per-trace and per-memory-transition log lines

Records are appended as instances finish, so an interrupted run resumes by
skipping every id already present in ``records.jsonl``.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..backend import Backend
from ..core import RunConfig, RunResult, canonicalize_answer, to_jsonable
from ..errors import ConfigError, TTSPError
from ..orchestrator import Variant, ablation_mode, arun_ttsp
from ..prompts import PromptSet, default_templates
from .dataset import TaskInstance, dataset_hash

log = logging.getLogger(__name__)

RECORDS = "records.jsonl"
MANIFEST = "manifest.json"
TRACES = "traces.jsonl"


@dataclass(frozen=True)
class InstanceRecord:
    """Scored outcome of one instance. ``correct`` is None when unscored."""

    id: str
    index: int
    split: str
    gold: str | None
    prediction: str | None
    correct: bool | None
    failed: bool
    error: str | None
    total_tokens: int
    round_tool_calls: tuple[float, ...]
    round_reasoning_tokens: tuple[float, ...]
    result_file: str | None
    elapsed: float

    def to_dict(self) -> dict:
        return to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceRecord":
        d = dict(d)
        d["round_tool_calls"] = tuple(d["round_tool_calls"])
        d["round_reasoning_tokens"] = tuple(d["round_reasoning_tokens"])
        return cls(**d)


@dataclass(frozen=True)
class EvalReport:
    records: tuple[InstanceRecord, ...]
    config: RunConfig
    variant: str
    accuracy: float
    correct: int
    scored: int
    failed: int
    split_accuracy: dict[str, float]
    mean_total_tokens: float
    round_tool_calls: tuple[float, ...]
    round_reasoning_tokens: tuple[float, ...]
    checkpoint_hits: int = 0
    wall_clock: dict[str, float] = field(default_factory=dict)
    run_dir: str | None = None

    def summary(self) -> dict:
        """Everything except per-instance records, timing and paths."""
        return {
            "variant": self.variant,
            "config": self.config.to_dict(),
            "accuracy": self.accuracy,
            "correct": self.correct,
            "scored": self.scored,
            "instances": len(self.records),
            "failed": self.failed,
            "split_accuracy": self.split_accuracy,
            "mean_total_tokens": self.mean_total_tokens,
            "round_tool_calls": list(self.round_tool_calls),
            "round_reasoning_tokens": list(self.round_reasoning_tokens),
        }


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def _column_means(rows: Sequence[Sequence[float]]) -> tuple[float, ...]:
    width = max((len(r) for r in rows), default=0)
    return tuple(_mean([r[i] for r in rows if len(r) > i]) for i in range(width))


def build_report(
    records: Sequence[InstanceRecord],
    config: RunConfig,
    variant: str,
    *,
    checkpoint_hits: int = 0,
    wall_clock: dict[str, float] | None = None,
    run_dir: str | None = None,
) -> EvalReport:
    """Deterministic reducer: records are ordered by dataset position."""
    records = tuple(sorted(records, key=lambda r: r.index))
    scored = [r for r in records if r.correct is not None]
    correct = sum(1 for r in scored if r.correct)
    splits: dict[str, list[bool]] = {}
    for r in scored:
        splits.setdefault(r.split, []).append(bool(r.correct))
    ok = [r for r in records if not r.failed]
    return EvalReport(
        records=records,
        config=config,
        variant=variant,
        accuracy=correct / len(scored) if scored else 0.0,
        correct=correct,
        scored=len(scored),
        failed=sum(1 for r in records if r.failed),
        split_accuracy={k: sum(v) / len(v) for k, v in sorted(splits.items())},
        mean_total_tokens=_mean([r.total_tokens for r in ok]),
        round_tool_calls=_column_means([r.round_tool_calls for r in ok]),
        round_reasoning_tokens=_column_means([r.round_reasoning_tokens for r in ok]),
        checkpoint_hits=checkpoint_hits,
        wall_clock=dict(wall_clock or {}),
        run_dir=run_dir,
    )


def config_hash(config: RunConfig, variant: str, prompts: PromptSet) -> str:
    blob = json.dumps({"config": config.to_dict(), "variant": variant, "prompts": prompts.hash}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_directory(root: str | Path, data_hash: str, cfg_hash: str) -> Path:
    return Path(root) / f"{data_hash[:12]}-{cfg_hash[:12]}"


def read_records(run_dir: str | Path) -> list[InstanceRecord]:
    path = Path(run_dir) / RECORDS
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(InstanceRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError):
                # a torn final line from an interrupted write is simply redone
                log.warning("skipping unreadable checkpoint line in %s", path)
    return out


def _score(inst: TaskInstance, result: RunResult | None) -> tuple[str | None, str | None, bool | None]:
    gold = inst.gold()
    pred = canonicalize_answer(result.answer, inst.letters) if result is not None else None
    if gold is None:
        return gold, pred, None
    return gold, pred, pred is not None and pred == gold


async def aevaluate(
    dataset: Sequence[TaskInstance],
    config: RunConfig,
    backend: Backend,
    *,
    variant: Variant | str = Variant.NONE,
    concurrency: int = 4,
    out_dir: str | Path | None = None,
    prompts: PromptSet | None = None,
) -> EvalReport:
    """Run every instance (at most ``concurrency`` in flight) and score it.

    Per-instance failures are recorded and scored incorrect; only
    configuration errors abort the run. With ``out_dir`` the run is
    checkpointed and resumable.
    """
    if concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    variant = Variant.parse(variant)
    effective = ablation_mode(config, variant)
    prompts = prompts or default_templates()
    run_dir = None
    done: dict[str, InstanceRecord] = {}
    if out_dir is not None:
        run_dir = run_directory(out_dir, dataset_hash(list(dataset)), config_hash(effective, variant.value, prompts))
        (run_dir / "results").mkdir(parents=True, exist_ok=True)
        manifest = {
            "config": effective.to_dict(),
            "variant": variant.value,
            "prompt_hash": prompts.hash,
            "instances": len(dataset),
        }
        (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        wanted = {inst.id for inst in dataset}
        done = {r.id: r for r in read_records(run_dir) if r.id in wanted}
    hits = len(done)
    if hits:
        log.info("resuming: %d of %d instances already checkpointed", hits, len(dataset))

    sem = asyncio.Semaphore(concurrency)
    records = list(done.values())
    started = time.perf_counter()

    def append(path: Path, lines: Sequence[dict]) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for item in lines:
                fh.write(json.dumps(item, sort_keys=True) + "\n")
            fh.flush()

    async def one(index: int, inst: TaskInstance) -> None:
        async with sem:
            t0 = time.perf_counter()
            log_lines: list[dict] = []
            result = None
            error = None
            try:
                task = inst.to_task()
                result = await arun_ttsp(task, effective, backend, prompts=prompts, log_sink=log_lines.append)
            except ConfigError:
                raise
            except TTSPError as exc:
                error = f"{type(exc).__name__}: {exc}"
                log.warning("instance %s failed: %s", inst.id, error)
            gold, pred, correct = _score(inst, result)
            if result is None and correct is None and gold is not None:
                correct = False
            result_file = None
            if run_dir is not None and result is not None:
                result_file = f"results/{index}.json"
                (run_dir / result_file).write_text(result.to_json() + "\n", encoding="utf-8")
            stats = result.per_round_stats if result is not None else ()
            rec = InstanceRecord(
                id=inst.id,
                index=index,
                split=inst.split,
                gold=gold,
                prediction=pred,
                correct=correct,
                failed=result is None,
                error=error,
                total_tokens=result.total_generated_tokens if result is not None else 0,
                round_tool_calls=tuple(s.mean_tool_calls for s in stats),
                round_reasoning_tokens=tuple(s.mean_reasoning_tokens for s in stats),
                result_file=result_file,
                elapsed=round(time.perf_counter() - t0, 6),
            )
            records.append(rec)
            if run_dir is not None:
                append(run_dir / TRACES, log_lines)
                append(run_dir / RECORDS, [rec.to_dict()])

    pending = [one(i, inst) for i, inst in enumerate(dataset) if inst.id not in done]
    await asyncio.gather(*pending)
    elapsed = time.perf_counter() - started
    fresh = [r.elapsed for r in records if r.id not in done]
    report = build_report(
        records,
        effective,
        variant.value,
        checkpoint_hits=hits,
        wall_clock={"total_seconds": round(elapsed, 6), "mean_instance_seconds": round(_mean(fresh), 6)},
        run_dir=str(run_dir) if run_dir is not None else None,
    )
    if run_dir is not None:
        from .report import write_summary

        write_summary(report, run_dir)
    return report


def evaluate(dataset, config, backend, **kwargs) -> EvalReport:
    return asyncio.run(aevaluate(dataset, config, backend, **kwargs))

"""Runnable surface: dataset ingestion, evaluation, reports and the CLI."""

from .dataset import TaskInstance, dataset_hash, load_dataset
from .evaluate import EvalReport, InstanceRecord, aevaluate, build_report, evaluate
from .report import load_report, render_summary, write_summary

__all__ = [
    "EvalReport",
    "InstanceRecord",
    "TaskInstance",
    "aevaluate",
    "build_report",
    "dataset_hash",
    "evaluate",
    "load_dataset",
    "load_report",
    "render_summary",
    "write_summary",
]

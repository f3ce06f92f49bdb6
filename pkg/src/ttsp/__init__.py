"""Multi-round perception search for tool-using vision-language models.

Rounds of parallel zoom-in traces are filtered by token entropy, distilled
into a two-tier knowledge memory that guides later rounds, and aggregated by
reliability-weighted voting.
"""

from .aggregation import extract_answer, weighted_vote
from .core import (
    BoundingBox,
    ConfirmedFact,
    KnowledgeMemory,
    OpenConflict,
    PerceptionTrace,
    RunConfig,
    RunResult,
    TokenRecord,
    TraceMode,
    canonicalize_answer,
)
from .memory import parse_memory_response, render_memory_context, validate_memory_transition
from .orchestrator import Task, Variant, ablation_mode, arun_ttsp, run_ttsp
from .reliability import entropy_filter, reliability_score, token_entropy
from .vistool import ImageAsset, load_image, zoom_in

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ConfirmedFact",
    "ImageAsset",
    "KnowledgeMemory",
    "OpenConflict",
    "PerceptionTrace",
    "RunConfig",
    "RunResult",
    "Task",
    "TokenRecord",
    "TraceMode",
    "Variant",
    "ablation_mode",
    "arun_ttsp",
    "canonicalize_answer",
    "entropy_filter",
    "extract_answer",
    "load_image",
    "parse_memory_response",
    "reliability_score",
    "render_memory_context",
    "run_ttsp",
    "token_entropy",
    "validate_memory_transition",
    "weighted_vote",
    "zoom_in",
]

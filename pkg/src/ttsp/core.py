"""Domain types shared by every part of the engine.

All types are frozen dataclasses whose constructors enforce their invariants,
so an invalid value cannot be built through the public surface.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .errors import ConfigError, DegenerateBox, InvalidTransition

MIN_BOX_SIDE = 1e-4
INF = math.inf


class TraceMode(str, enum.Enum):
    FRESH = "fresh"
    GUIDED = "guided"


@dataclass(frozen=True)
class TokenRecord:
    """One generated token and its top-k log-probabilities (natural log)."""

    token_text: str
    top_logprobs: tuple[tuple[str, float], ...]

    def __post_init__(self):
        tl = tuple((str(t), float(lp)) for t, lp in self.top_logprobs)
        if not tl:
            raise ValueError("top_logprobs must be non-empty")
        for _, lp in tl:
            if not math.isfinite(lp):
                raise ValueError(f"non-finite logprob {lp!r}")
        for (_, a), (_, b) in zip(tl, tl[1:]):
            if b > a:
                raise ValueError("top_logprobs must be sorted non-increasing")
        object.__setattr__(self, "top_logprobs", tl)

    @classmethod
    def from_unsorted(cls, token_text: str, pairs: Iterable[tuple[str, float]]) -> "TokenRecord":
        # stable sort keeps backend order among equal logprobs
        return cls(token_text, tuple(sorted(pairs, key=lambda p: -float(p[1]))))

    @property
    def logprobs(self) -> tuple[float, ...]:
        return tuple(lp for _, lp in self.top_logprobs)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0, 1] image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBox(f"non-finite coordinates {vals}")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise DegenerateBox(f"coordinates outside [0,1]: {vals}")
        if self.x2 - self.x1 < MIN_BOX_SIDE or self.y2 - self.y1 < MIN_BOX_SIDE:
            raise DegenerateBox(f"box {vals} has width or height below {MIN_BOX_SIDE}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def __str__(self) -> str:
        return "[" + ",".join(_fmt_coord(v) for v in self.as_list()) + "]"


def _fmt_coord(v: float) -> str:
    s = f"{v:.4f}".rstrip("0").rstrip(".")
    return s or "0"


def validate_bbox(x1: float, y1: float, x2: float, y2: float) -> BoundingBox:
    """Clamp raw coordinates into [0, 1] and build a box with positive area.

    Raises:
        DegenerateBox: if a coordinate is not finite, or the clamped box is
            narrower or shorter than ``MIN_BOX_SIDE``.
    """
    raw = (x1, y1, x2, y2)
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise DegenerateBox(f"non-numeric coordinates {raw!r}") from exc
    if not all(math.isfinite(v) for v in vals):
        raise DegenerateBox(f"non-finite coordinates {raw!r}")
    cx1, cy1, cx2, cy2 = (min(1.0, max(0.0, v)) for v in vals)
    if cx2 - cx1 < MIN_BOX_SIDE or cy2 - cy1 < MIN_BOX_SIDE:
        raise DegenerateBox(f"box {raw!r} is degenerate after clamping")
    return BoundingBox(cx1, cy1, cx2, cy2)


@dataclass(frozen=True)
class ToolInvocation:
    bbox: BoundingBox
    label: str
    image_index: int = 0

    def __post_init__(self):
        if not isinstance(self.image_index, int) or isinstance(self.image_index, bool) or self.image_index < 0:
            raise ValueError(f"image_index must be a non-negative int, got {self.image_index!r}")

    def describe(self) -> str:
        return f"({self.label}, {self.bbox})"


@dataclass(frozen=True)
class TraceTurn:
    """One reasoning segment, optionally followed by a tool call.

    ``tool_result_ref`` is the image index of the crop produced by the call;
    it is set only when the call executed successfully.
    """

    reasoning: str
    tool_call: ToolInvocation | None = None
    tool_result_ref: int | None = None

    def __post_init__(self):
        if self.tool_result_ref is not None and self.tool_call is None:
            raise ValueError("tool_result_ref requires a tool_call")


@dataclass(frozen=True)
class PerceptionTrace:
    turns: tuple[TraceTurn, ...]
    tokens: tuple[TokenRecord, ...]
    answer: str | None
    reliability_score: float | None
    round_index: int
    mode: TraceMode
    token_count: int
    sample_index: int = 0
    degraded: bool = False
    failure: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "mode", TraceMode(self.mode))
        if not self.turns:
            raise ValueError("a trace needs at least one turn")
        if self.turns[-1].tool_call is not None:
            raise ValueError("a trace must terminate in a reasoning segment")
        if self.round_index < 1:
            raise ValueError("round_index is 1-based")
        if self.token_count < 0:
            raise ValueError("token_count must be non-negative")
        if self.reliability_score is not None and not (self.reliability_score <= 0.0):
            raise ValueError(f"reliability_score must be <= 0, got {self.reliability_score}")

    @property
    def tool_calls(self) -> int:
        return sum(1 for t in self.turns if t.tool_call is not None)

    @property
    def final_text(self) -> str:
        return self.turns[-1].reasoning


@dataclass(frozen=True)
class ConfirmedFact:
    statement: str
    region: BoundingBox | None = None
    first_confirmed_round: int = 1

    def __post_init__(self):
        if not self.statement or not self.statement.strip():
            raise ValueError("confirmed fact statement must be non-empty")
        if self.first_confirmed_round < 1:
            raise ValueError("first_confirmed_round must be positive")


@dataclass(frozen=True)
class OpenConflict:
    claims: tuple[str, ...]
    directive_text: str = ""
    directive_region: BoundingBox | None = None

    def __post_init__(self):
        claims = tuple(self.claims)
        object.__setattr__(self, "claims", claims)
        if len(claims) < 2:
            raise ValueError("an open conflict needs at least two claims")
        if len(set(claims)) != len(claims):
            raise ValueError("conflict claims must be pairwise distinct")
        if any(not c.strip() for c in claims):
            raise ValueError("conflict claims must be non-empty")


def tier_overlap(confirmed: Sequence[ConfirmedFact], conflicts: Sequence[OpenConflict]) -> set[str]:
    """Statements present verbatim in both memory tiers."""
    claims = {c for oc in conflicts for c in oc.claims}
    return {f.statement for f in confirmed} & claims


@dataclass(frozen=True)
class KnowledgeMemory:
    confirmed: tuple[ConfirmedFact, ...] = ()
    conflicts: tuple[OpenConflict, ...] = ()
    round: int = 0

    def __post_init__(self):
        object.__setattr__(self, "confirmed", tuple(self.confirmed))
        object.__setattr__(self, "conflicts", tuple(self.conflicts))
        if self.round < 0:
            raise ValueError("round must be non-negative")
        if self.round == 0 and (self.confirmed or self.conflicts):
            raise ValueError("round-0 memory must be empty")
        overlap = tier_overlap(self.confirmed, self.conflicts)
        if overlap:
            raise InvalidTransition(f"statements in both tiers: {sorted(overlap)}")

    @property
    def is_empty(self) -> bool:
        return not self.confirmed and not self.conflicts

    def fingerprint(self) -> str:
        """Short content hash; ``"none"`` for an empty memory."""
        if self.is_empty:
            return "none"
        payload = json.dumps(self.content(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def content(self) -> dict:
        return {"confirmed": to_jsonable(self.confirmed), "conflicts": to_jsonable(self.conflicts)}


EMPTY_MEMORY = KnowledgeMemory()


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one TTSP run.

    ``entropy_window`` is either an absolute token count (int) or a fraction of
    the trace length (float in (0, 1]); ``vote_temperature`` may be ``math.inf``
    for uniform voting.
    """

    rounds: int = 4
    traces_per_round: int = 8
    fresh_ratio: float = 0.4
    filter_ratio: float = 0.4
    vote_temperature: float = 1.0
    logprob_depth: int = 20
    entropy_window: int | float = 0.1
    max_turns: int = 8
    decode_temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0
    max_tokens: int = 51200
    structured_knowledge: bool = True
    extraction_max_tokens: int = 2048
    digest_budget: int = 24000
    turn_char_budget: int = 1200
    trace_timeout: float = 300.0

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(_is_int(self.rounds) and self.rounds >= 1, f"rounds must be a positive int, got {self.rounds!r}")
        need(_is_int(self.traces_per_round) and self.traces_per_round >= 1, "traces_per_round must be a positive int")
        need(0.0 <= self.fresh_ratio <= 1.0, f"fresh_ratio must be in [0,1], got {self.fresh_ratio}")
        need(0.0 <= self.filter_ratio < 1.0, f"filter_ratio must be in [0,1), got {self.filter_ratio}")
        need(self.vote_temperature > 0, f"vote_temperature must be > 0 (or inf), got {self.vote_temperature}")
        need(_is_int(self.logprob_depth) and self.logprob_depth >= 1, "logprob_depth must be a positive int")
        if _is_int(self.entropy_window):
            need(self.entropy_window >= 1, "entropy_window count must be >= 1")
        else:
            need(isinstance(self.entropy_window, float) and 0.0 < self.entropy_window <= 1.0,
                 f"entropy_window must be a positive int or a fraction in (0,1], got {self.entropy_window!r}")
        need(_is_int(self.max_turns) and self.max_turns >= 1, "max_turns must be a positive int")
        need(self.decode_temperature >= 0, "decode_temperature must be >= 0")
        need(0.0 < self.top_p <= 1.0, "top_p must be in (0,1]")
        need(_is_int(self.top_k) and self.top_k >= 0, "top_k must be a non-negative int")
        need(_is_int(self.max_tokens) and self.max_tokens >= 1, "max_tokens must be a positive int")
        need(_is_int(self.extraction_max_tokens) and self.extraction_max_tokens >= 1, "extraction_max_tokens must be positive")
        need(_is_int(self.digest_budget) and self.digest_budget >= 1, "digest_budget must be positive")
        need(_is_int(self.turn_char_budget) and self.turn_char_budget >= 1, "turn_char_budget must be positive")
        need(self.trace_timeout > 0, "trace_timeout must be positive")

    def window_for(self, token_count: int) -> int:
        """Number of highest-entropy tokens averaged for a trace of this length."""
        if _is_int(self.entropy_window):
            return int(self.entropy_window)
        # round() guards against 0.1*30 == 3.0000000000000004
        return max(1, math.ceil(round(self.entropy_window * token_count, 9)))

    def to_dict(self) -> dict:
        return to_jsonable(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(data)
        if "vote_temperature" in kw:
            kw["vote_temperature"] = parse_float(kw["vote_temperature"])
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_float(v) -> float:
    if isinstance(v, str) and v.strip().lower() in {"inf", "+inf", "infinity"}:
        return INF
    return float(v)


@dataclass(frozen=True)
class VoteTally:
    entries: dict[str, float]
    winner: str

    def __post_init__(self):
        if not self.entries:
            raise ValueError("empty tally")
        if self.winner not in self.entries:
            raise ValueError("winner must be a tallied answer")
        if any(not (w > 0) for w in self.entries.values()):
            raise ValueError("weights must be positive")
        if self.entries[self.winner] < max(self.entries.values()):
            raise ValueError("winner must have maximal weight")

    @property
    def total(self) -> float:
        return math.fsum(self.entries.values())


@dataclass(frozen=True)
class RoundStats:
    round: int
    fresh_count: int
    guided_count: int
    completed: int
    traces_kept: int
    mean_tool_calls: float
    mean_reasoning_tokens: float
    generated_tokens: int


@dataclass(frozen=True)
class RunResult:
    answer: str
    tally: VoteTally
    retained_traces: tuple[PerceptionTrace, ...]
    discarded_count: int
    per_round_stats: tuple[RoundStats, ...]
    total_generated_tokens: int
    memory_history: tuple[KnowledgeMemory, ...]
    task_id: str = ""
    extraction_calls: int = 0
    prompt_hash: str = ""
    config: RunConfig | None = None

    def __post_init__(self):
        counts: dict[int, int] = {}
        for t in self.retained_traces:
            counts[t.round_index] = counts.get(t.round_index, 0) + 1
        for s in self.per_round_stats:
            if counts.get(s.round, 0) != s.traces_kept:
                raise ValueError(f"round {s.round}: retained traces disagree with per-round stats")

    @property
    def launched_rollouts(self) -> int:
        return sum(s.fresh_count + s.guided_count for s in self.per_round_stats)

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def to_jsonable(obj: Any) -> Any:
    """Convert engine dataclasses to plain JSON-compatible structures."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


# answer canonicalization

_TRAILING_PUNCT = ".,;:!?。"
_TEXT_WRAP = re.compile(r"^\\text(?:bf|rm)?\{(.*)\}$", re.S)
_LETTER_PATTERNS = (
    re.compile(r"^\(?([A-Za-z])\)?$"),
    re.compile(r"^\(?([A-Za-z])[\).:]\s*.*$", re.S),
    re.compile(r"^(?:option|answer)\s*:?\s*\(?([A-Za-z])\)?", re.I),
)


def canonicalize_answer(raw: str | None, options: Sequence[str] | dict | None = None) -> str | None:
    """Normalize an answer so equal answers compare equal.

    Open-ended answers are trimmed, case-folded and stripped of trailing
    punctuation. With ``options`` (letters, or a letter->text mapping) the
    answer is reduced to an upper-case option letter, or ``None`` if it does
    not name one.
    """
    if raw is None:
        return None
    s = raw.strip()
    m = _TEXT_WRAP.match(s)
    if m:
        s = m.group(1).strip()
    s = s.rstrip(_TRAILING_PUNCT).strip()
    if not s:
        return None
    if options is None:
        return " ".join(s.casefold().split())

    if isinstance(options, dict):
        letters = {k.upper(): v for k, v in options.items()}
    else:
        letters = {str(k).upper(): None for k in options}
    for pat in _LETTER_PATTERNS:
        m = pat.match(s)
        if m and m.group(1).upper() in letters:
            return m.group(1).upper()
    folded = " ".join(s.casefold().split())
    for letter, text in letters.items():
        if text is not None and " ".join(str(text).casefold().split()).rstrip(_TRAILING_PUNCT) == folded:
            return letter
    return None

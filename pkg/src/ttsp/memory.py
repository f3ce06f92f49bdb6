"""Two-tier knowledge memory: extraction requests, payload parsing, transitions.

The extraction payload is a fenced JSON block::

    ```json
    {"version": 1,
     "confirmed": [{"statement": "...", "region": [x1, y1, x2, y2]}],
     "conflicts": [{"claims": ["...", "..."], "directive_text": "...",
                    "directive_region": [x1, y1, x2, y2]}]}
    ```

``region``, ``directive_region`` and ``version`` are optional; any other key
makes the payload invalid. See ``docs/memory_payload.md``.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass
from typing import Sequence

from .core import (
    BoundingBox,
    ConfirmedFact,
    KnowledgeMemory,
    OpenConflict,
    PerceptionTrace,
    tier_overlap,
    validate_bbox,
)
from .errors import DegenerateBox, InvalidTransition

log = logging.getLogger(__name__)

PAYLOAD_VERSION = 1
CONFIRMED_HEADER = "Confirmed Knowledge (reliable, do not re-verify)"
CONFLICTS_HEADER = "Open Conflicts (priority investigation targets)"

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.S)


@dataclass(frozen=True)
class TraceDigest:
    answer: str
    score: float
    turns: tuple[str, ...]

    def render(self, index: int) -> str:
        lines = [f"### Trace {index} (answer: {self.answer}, reliability: {self.score:.4f})"]
        lines.extend(f"- {t}" for t in self.turns)
        return "\n".join(lines)


@dataclass(frozen=True)
class ExtractionRequest:
    question: str
    options: tuple[tuple[str, str], ...] | None
    prev_memory: KnowledgeMemory
    trace_digests: tuple[TraceDigest, ...]
    image_handles: tuple = ()
    round: int = 1

    def digest_text(self) -> str:
        return "\n\n".join(d.render(i + 1) for i, d in enumerate(self.trace_digests))


def _truncate(text: str, budget: int) -> str:
    text = " ".join(text.split())
    if len(text) <= budget:
        return text
    return text[: max(0, budget - 3)] + "..."


def digest_trace(trace: PerceptionTrace, turn_char_budget: int = 1200) -> TraceDigest:
    turns = []
    for i, turn in enumerate(trace.turns, 1):
        entry = f"turn {i}: {_truncate(turn.reasoning, turn_char_budget)}"
        if turn.tool_call is not None:
            entry += f" | zoom {turn.tool_call.describe()}"
        turns.append(entry)
    return TraceDigest(answer=trace.answer or "", score=float(trace.reliability_score or 0.0), turns=tuple(turns))


def build_extraction_request(
    round_traces: Sequence[PerceptionTrace],
    prev: KnowledgeMemory,
    question: str,
    options: Sequence[tuple[str, str]] | None = None,
    images: Sequence = (),
    *,
    digest_budget: int = 24000,
    turn_char_budget: int = 1200,
) -> ExtractionRequest:
    """Summarize the round's retained traces for the extraction call.

    Digests are ordered by descending reliability (sampling order among ties).
    While the digest text exceeds ``digest_budget`` characters the lowest-score
    digest is dropped; the best digest is always kept. Crop images are never
    attached, tool calls appear as ``(label, bbox)`` text.
    """
    voters = [t for t in round_traces if t.answer is not None]
    if not voters:
        raise ValueError("extraction needs at least one answered trace")
    rounds = {t.round_index for t in voters}
    if len(rounds) != 1:
        raise ValueError("extraction digests must come from a single round")
    order = sorted(range(len(voters)), key=lambda i: -(voters[i].reliability_score or 0.0))
    digests = [digest_trace(voters[i], turn_char_budget) for i in order]

    def size(ds):
        return len("\n\n".join(d.render(i + 1) for i, d in enumerate(ds)))

    while len(digests) > 1 and size(digests) > digest_budget:
        digests.pop()
    return ExtractionRequest(
        question=question,
        options=tuple((str(a), str(b)) for a, b in options) if options else None,
        prev_memory=prev,
        trace_digests=tuple(digests),
        image_handles=tuple(images),
        round=rounds.pop(),
    )


# payload parsing


class PayloadError(ValueError):
    pass


def _region(value) -> BoundingBox | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise PayloadError(f"region must be a list of four numbers, got {value!r}")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise PayloadError(f"region must be numeric, got {value!r}")
    try:
        return validate_bbox(*value)
    except DegenerateBox:
        log.warning("dropping degenerate region %r from memory payload", value)
        return None


def _check_keys(obj, allowed: set[str], required: set[str], what: str):
    if not isinstance(obj, dict):
        raise PayloadError(f"{what} must be an object")
    extra = set(obj) - allowed
    if extra:
        raise PayloadError(f"{what} has unknown keys {sorted(extra)}")
    missing = required - set(obj)
    if missing:
        raise PayloadError(f"{what} is missing keys {sorted(missing)}")


def _parse_payload(raw: str) -> dict:
    blocks = _FENCE.findall(raw)
    if not blocks:
        raise PayloadError("no fenced block in extraction output")
    # the last fenced block is the answer; earlier ones may be scratch work
    lang, body = blocks[-1]
    if lang.lower() not in {"", "json", "memory"}:
        raise PayloadError(f"unexpected fence language {lang!r}")
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise PayloadError(f"payload is not valid JSON: {exc}") from exc
    _check_keys(data, {"version", "confirmed", "conflicts"}, {"confirmed", "conflicts"}, "payload")
    if data.get("version", PAYLOAD_VERSION) != PAYLOAD_VERSION:
        raise PayloadError(f"unsupported payload version {data['version']!r}")
    if not isinstance(data["confirmed"], list) or not isinstance(data["conflicts"], list):
        raise PayloadError("confirmed and conflicts must be arrays")
    return data


def parse_memory_response(raw: str, prev: KnowledgeMemory, round: int) -> KnowledgeMemory:
    """Parse the extraction output into the memory for ``round``.

    Any structural failure returns ``prev`` unchanged. A statement listed in
    both tiers is kept only as a conflict claim.
    """
    try:
        data = _parse_payload(raw)
        facts: dict[str, BoundingBox | None] = {}
        for item in data["confirmed"]:
            _check_keys(item, {"statement", "region"}, {"statement"}, "confirmed entry")
            stmt = item["statement"]
            if not isinstance(stmt, str) or not stmt.strip():
                raise PayloadError("confirmed statement must be a non-empty string")
            stmt = stmt.strip()
            if stmt not in facts:
                facts[stmt] = _region(item.get("region"))

        conflicts: list[OpenConflict] = []
        for item in data["conflicts"]:
            _check_keys(item, {"claims", "directive_text", "directive_region"}, {"claims"}, "conflict entry")
            claims = item["claims"]
            if not isinstance(claims, list) or not all(isinstance(c, str) for c in claims):
                raise PayloadError("conflict claims must be an array of strings")
            uniq = tuple(dict.fromkeys(c.strip() for c in claims if c.strip()))
            if len(uniq) < 2:
                log.warning("dropping conflict with fewer than two distinct claims: %r", claims)
                continue
            text = item.get("directive_text", "")
            if not isinstance(text, str):
                raise PayloadError("directive_text must be a string")
            conflicts.append(OpenConflict(uniq, text.strip(), _region(item.get("directive_region"))))
    except (PayloadError, ValueError) as exc:
        log.warning("memory extraction unparseable, carrying forward round-%d memory: %s", prev.round, exc)
        return prev

    claims = {c for oc in conflicts for c in oc.claims}
    first_seen = {f.statement: f.first_confirmed_round for f in prev.confirmed}
    confirmed = []
    for stmt, region in facts.items():
        if stmt in claims:
            log.info("statement %r listed in both tiers; kept as conflict", stmt)
            continue
        confirmed.append(ConfirmedFact(stmt, region, first_seen.get(stmt, round)))
    return KnowledgeMemory(tuple(confirmed), tuple(conflicts), round)


def memory_to_payload(memory: KnowledgeMemory) -> str:
    """Serialize a memory in the extraction payload format (fenced JSON)."""
    data = {
        "version": PAYLOAD_VERSION,
        "confirmed": [
            {"statement": f.statement, **({"region": f.region.as_list()} if f.region else {})}
            for f in memory.confirmed
        ],
        "conflicts": [
            {
                "claims": list(c.claims),
                "directive_text": c.directive_text,
                **({"directive_region": c.directive_region.as_list()} if c.directive_region else {}),
            }
            for c in memory.conflicts
        ],
    }
    return "```json\n" + json.dumps(data, indent=2) + "\n```"


# transitions


class TransitionKind(str, enum.Enum):
    CARRIED = "carried"
    DEMOTED = "demoted"
    PROMOTED = "promoted"
    NEW_FACT = "new_fact"
    NEW_CONFLICT = "new_conflict"
    DROPPED = "dropped"


@dataclass(frozen=True)
class TransitionRecord:
    kind: TransitionKind
    statement: str
    from_tier: str | None
    to_tier: str | None


def validate_memory_transition(prev: KnowledgeMemory, next: KnowledgeMemory) -> list[TransitionRecord]:
    """Classify every statement of ``prev`` and ``next`` into one transition kind.

    A carry-forward (``next == prev``) is accepted and classifies everything
    as carried.

    Raises:
        InvalidTransition: if ``next`` breaks tier disjointness or the round
            does not advance by exactly one.
    """
    overlap = tier_overlap(next.confirmed, next.conflicts)
    if overlap:
        raise InvalidTransition(f"statements in both tiers: {sorted(overlap)}")
    if next != prev and next.round != prev.round + 1:
        raise InvalidTransition(f"round must advance from {prev.round} to {prev.round + 1}, got {next.round}")

    prev_facts = [f.statement for f in prev.confirmed]
    prev_claims = [c for oc in prev.conflicts for c in oc.claims]
    next_facts = {f.statement for f in next.confirmed}
    next_claims = {c for oc in next.conflicts for c in oc.claims}

    records: list[TransitionRecord] = []
    seen: set[str] = set()
    for s in prev_facts:
        if s in seen:
            continue
        seen.add(s)
        if s in next_facts:
            records.append(TransitionRecord(TransitionKind.CARRIED, s, "confirmed", "confirmed"))
        elif s in next_claims:
            records.append(TransitionRecord(TransitionKind.DEMOTED, s, "confirmed", "conflicts"))
        else:
            records.append(TransitionRecord(TransitionKind.DROPPED, s, "confirmed", None))
    for s in prev_claims:
        if s in seen:
            continue
        seen.add(s)
        if s in next_facts:
            records.append(TransitionRecord(TransitionKind.PROMOTED, s, "conflicts", "confirmed"))
        elif s in next_claims:
            records.append(TransitionRecord(TransitionKind.CARRIED, s, "conflicts", "conflicts"))
        else:
            records.append(TransitionRecord(TransitionKind.DROPPED, s, "conflicts", None))
    for f in next.confirmed:
        if f.statement not in seen:
            seen.add(f.statement)
            records.append(TransitionRecord(TransitionKind.NEW_FACT, f.statement, None, "confirmed"))
    for oc in next.conflicts:
        for c in oc.claims:
            if c not in seen:
                seen.add(c)
                records.append(TransitionRecord(TransitionKind.NEW_CONFLICT, c, None, "conflicts"))
    return records


def render_memory_context(memory: KnowledgeMemory) -> str:
    """Text block injected into guided-trace system prompts; "" when empty."""
    if memory.is_empty:
        return ""
    parts = []
    if memory.confirmed:
        lines = [f"## {CONFIRMED_HEADER}"]
        for i, f in enumerate(memory.confirmed, 1):
            loc = f" (region {f.region})" if f.region is not None else ""
            lines.append(f"{i}. {f.statement}{loc}")
        parts.append("\n".join(lines))
    if memory.conflicts:
        lines = [f"## {CONFLICTS_HEADER}"]
        for i, c in enumerate(memory.conflicts, 1):
            claims = " vs. ".join(json.dumps(x, ensure_ascii=False) for x in c.claims)
            lines.append(f"{i}. Competing claims: {claims}")
            directive = c.directive_text
            if c.directive_region is not None:
                directive = (directive + " " if directive else "") + f"-> inspect region {c.directive_region}"
            if directive:
                lines.append(f"   Directive: {directive}")
        parts.append("\n".join(lines))
    return "\n\n".join(parts)

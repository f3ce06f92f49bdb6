"""Answer extraction and reliability-weighted voting."""

from __future__ import annotations

import math
from typing import Sequence

from .core import PerceptionTrace, VoteTally, canonicalize_answer
from .errors import NoVotes

BOX_MARKER = "\\boxed{"
_TINY = math.ulp(0.0)


def _boxed_contents(text: str) -> list[str]:
    out = []
    start = 0
    while True:
        i = text.find(BOX_MARKER, start)
        if i < 0:
            return out
        j = i + len(BOX_MARKER)
        depth = 1
        k = j
        while k < len(text) and depth:
            if text[k] == "{":
                depth += 1
            elif text[k] == "}":
                depth -= 1
            k += 1
        if depth:
            # unterminated marker: nothing after it can parse either
            return out
        out.append(text[j:k - 1])
        start = k


def extract_answer(trace_text: str, options: Sequence[str] | dict | None = None) -> str | None:
    """Canonical content of the last ``\\boxed{...}`` in ``trace_text``.

    Returns ``None`` when there is no well-formed box, or when ``options`` are
    given and the boxed text does not name one of them.
    """
    boxes = _boxed_contents(trace_text)
    if not boxes:
        return None
    return canonicalize_answer(boxes[-1], options)


def vote_weight(score: float, gamma: float) -> float:
    if math.isinf(gamma):
        return 1.0
    return math.exp(score / gamma)


def weighted_vote(traces: Sequence[PerceptionTrace], gamma: float) -> VoteTally:
    """Accumulate exp(score / gamma) per answer and pick the heaviest answer.

    Traces without an answer are skipped. Weights are computed relative to the
    best score (a common factor that cannot change the winner) so that tiny
    ``gamma`` never underflows every weight to zero; the reported entries are
    rescaled back to absolute weights when that is representable.

    Ties on accumulated weight go to the answer holding the single
    highest-scoring trace, then to the lexicographically smallest answer.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    voters = [t for t in traces if t.answer is not None]
    if not voters:
        raise NoVotes("no trace produced an answer")
    for t in voters:
        if t.reliability_score is None:
            raise ValueError("weighted_vote needs scored traces")

    best = max(t.reliability_score for t in voters)
    rel: dict[str, list[float]] = {}
    top_score: dict[str, float] = {}
    for t in voters:
        rel.setdefault(t.answer, []).append(vote_weight(t.reliability_score - best, gamma))
        top_score[t.answer] = max(top_score.get(t.answer, -math.inf), t.reliability_score)
    # sort before summing so the float total is independent of input order
    rel_sums = {a: math.fsum(sorted(ws)) for a, ws in rel.items()}

    winner = min(rel_sums, key=lambda a: (-rel_sums[a], -top_score[a], a))

    scale = vote_weight(best, gamma)
    entries = {a: s * scale for a, s in rel_sums.items()}
    if scale == 0.0 or not math.isfinite(scale) or any(v <= 0 or not math.isfinite(v) for v in entries.values()):
        entries = dict(rel_sums)
    # losers can underflow to 0 as gamma -> 0; report the smallest positive float
    entries = {a: v if v > 0 else _TINY for a, v in entries.items()}
    # keep the tie-broken winner maximal after rescaling roundoff
    top = max(entries.values())
    if entries[winner] < top:
        entries[winner] = top
    return VoteTally(entries=dict(sorted(entries.items())), winner=winner)

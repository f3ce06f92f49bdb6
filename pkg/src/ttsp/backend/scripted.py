"""Deterministic scripted backend.

Script files are JSON Lines, one record per request key::

    {"task": "t1", "round": 1, "mode": "fresh", "sample": 0, "memory": "*",
     "turns": [{"text": "Zooming on the sign.", "tool_call": {"bbox_2d": [0.1, 0.1, 0.4, 0.3],
                "label": "sign", "image_index": 0}, "entropy": 0.2},
               {"text": "It reads STOP.", "answer": "B", "entropy": [0.1, 0.9, 0.3, 0.4]}]}

Any key field may be ``"*"``. ``turns[i]`` answers the i-th chat call of the
trace. See ``docs/scripted_backend.md`` for every field.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from scipy.optimize import brentq

from ..core import TokenRecord
from ..errors import ContextOverflow, EndpointUnavailable, MalformedToolCall, ParseError
from . import TOOL_NAME, ChatRequest, ChatResponse, FinishReason, RequestKey, ToolCall

DEFAULT_ENTROPY = 0.05
_ERRORS = {
    "EndpointUnavailable": EndpointUnavailable,
    "ContextOverflow": ContextOverflow,
    "MalformedToolCall": MalformedToolCall,
}
_KEY_FIELDS = ("task", "round", "mode", "sample", "memory")
# wildcard masks, most specific first; memory is relaxed before sample, etc.
_MASKS = sorted(itertools.product((False, True), repeat=5), key=lambda m: (sum(m), tuple(not x for x in reversed(m))))


@dataclass(frozen=True)
class ScriptTurn:
    text: str = ""
    tool_call: dict | str | None = None
    tool_name: str = TOOL_NAME
    entropy: float | tuple[float, ...] = DEFAULT_ENTROPY
    answer: str | None = None
    finish: str | None = None
    error: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptTurn":
        unknown = set(d) - {"text", "tool_call", "tool_name", "entropy", "answer", "finish", "error"}
        if unknown:
            raise ValueError(f"unknown turn fields {sorted(unknown)}")
        ent = d.get("entropy")
        if ent is None:
            ent = DEFAULT_ENTROPY
        elif isinstance(ent, list):
            ent = tuple(float(e) for e in ent)
        else:
            ent = float(ent)
        if d.get("error") is not None and d["error"] not in _ERRORS:
            raise ValueError(f"unknown scripted error {d['error']!r}")
        if d.get("finish") not in (None, "stop", "length", "tool_call"):
            raise ValueError(f"bad finish {d['finish']!r}")
        return cls(
            text=d.get("text", ""),
            tool_call=d.get("tool_call"),
            tool_name=d.get("tool_name", TOOL_NAME),
            entropy=ent,
            answer=d.get("answer"),
            finish=d.get("finish"),
            error=d.get("error"),
        )

    def full_text(self) -> str:
        if self.answer is None:
            return self.text
        box = f"\\boxed{{{self.answer}}}"
        return f"{self.text} {box}".strip()


@lru_cache(maxsize=4096)
def topk_for_entropy(h: float, depth: int) -> tuple[float, ...]:
    """Sorted log-probs of a depth-k distribution with entropy ``h`` nats.

    One dominant outcome with probability q and ``depth - 1`` equal outcomes;
    q is solved numerically. ``h == 0`` gives a single certain outcome.
    """
    if h < 0 or not math.isfinite(h):
        raise ValueError(f"entropy must be finite and >= 0, got {h}")
    if h < 1e-12:
        # below what a dominant outcome of 1 - 1e-15 can express
        return (0.0,)
    if depth < 2:
        raise ValueError("positive entropy needs logprob depth >= 2")
    hmax = math.log(depth)
    if h > hmax + 1e-12:
        raise ValueError(f"entropy {h} exceeds ln({depth}) = {hmax}")
    if h >= hmax:
        return (-hmax,) * depth
    m = depth - 1

    def f(q):
        rest = (1.0 - q) / m
        return -q * math.log(q) - (1.0 - q) * math.log(rest) - h

    q = brentq(f, 1.0 / depth, 1.0 - 1e-15, xtol=1e-16, maxiter=200)
    return (math.log(q),) + (math.log((1.0 - q) / m),) * m


def synth_tokens(text: str, entropy, depth: int, extra: Iterable[str] = ()) -> tuple[TokenRecord, ...]:
    pieces = re.findall(r"\S+", text) + list(extra)
    if not pieces:
        pieces = [""]
    if isinstance(entropy, tuple):
        if len(entropy) != len(pieces):
            raise ValueError(f"entropy list has {len(entropy)} values for {len(pieces)} tokens")
        ents = entropy
    else:
        ents = (entropy,) * len(pieces)
    out = []
    for i, (tok, h) in enumerate(zip(pieces, ents)):
        lps = topk_for_entropy(float(h), depth)
        alts = [tok] + [f"<alt{i}_{j}>" for j in range(1, len(lps))]
        out.append(TokenRecord(tok, tuple(zip(alts, lps))))
    return tuple(out)


def _key_tuple(rec: dict) -> tuple:
    out = []
    for name in _KEY_FIELDS:
        v = rec.get(name, "*")
        if v != "*" and name in ("round", "sample"):
            v = int(v)
        elif v != "*":
            v = str(v)
        out.append(v)
    return tuple(out)


class ScriptedBackend:
    """Backend whose every response is a pure function of the request key."""

    def __init__(self, scripts: dict[tuple, list[ScriptTurn]] | None = None):
        self._scripts: dict[tuple, tuple[ScriptTurn, ...]] = {}
        for key, turns in (scripts or {}).items():
            self.add(key, turns)

    def add(self, key: tuple | dict, turns: Iterable[ScriptTurn | dict]) -> None:
        k = _key_tuple(key) if isinstance(key, dict) else _key_tuple(dict(zip(_KEY_FIELDS, key)))
        self._scripts[k] = tuple(t if isinstance(t, ScriptTurn) else ScriptTurn.from_dict(t) for t in turns)

    def __len__(self):
        return len(self._scripts)

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "ScriptedBackend":
        b = cls()
        for rec in records:
            b.add(rec, rec["turns"])
        return b

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ScriptedBackend":
        b = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    b.add(rec, rec["turns"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad script record: {exc}", lineno) from exc
        return b

    def lookup(self, key: RequestKey) -> tuple[ScriptTurn, ...]:
        exact = (key.task_id, key.round, key.mode, key.sample, key.memory)
        for mask in _MASKS:
            probe = tuple("*" if m else v for m, v in zip(mask, exact))
            hit = self._scripts.get(probe)
            if hit is not None:
                return hit
        raise EndpointUnavailable(f"no script for {exact}")

    def respond(self, request: ChatRequest) -> ChatResponse:
        if request.key is None:
            raise EndpointUnavailable("scripted backend needs a request key")
        turns = self.lookup(request.key)
        if request.key.turn >= len(turns):
            raise EndpointUnavailable(f"script for {request.key} has only {len(turns)} turns")
        turn = turns[request.key.turn]
        if turn.error is not None:
            raise _ERRORS[turn.error](f"scripted {turn.error}")

        text = turn.full_text()
        call = None
        extra = []
        if turn.tool_call is not None:
            if isinstance(turn.tool_call, str):
                raw = turn.tool_call
                try:
                    args = json.loads(raw)
                except json.JSONDecodeError:
                    args = None
            else:
                args = dict(turn.tool_call)
                raw = json.dumps(args, sort_keys=True)
            call = ToolCall(turn.tool_name, args if isinstance(args, dict) else None, raw, f"call_{request.key.turn}")
            extra = ["<tool_call>"]
        tokens = synth_tokens(text, turn.entropy, request.logprob_depth, extra)
        if turn.finish is not None:
            finish = FinishReason(turn.finish)
        else:
            finish = FinishReason.TOOL_CALL if call is not None else FinishReason.STOP
        return ChatResponse(text=text, tool_call=call, tokens=tokens, finish_reason=finish)

    async def chat(self, request: ChatRequest) -> ChatResponse:
        return self.respond(request)

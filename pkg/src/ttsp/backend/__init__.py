"""Model backends: request/response types and message helpers.

A backend is any object with ``async def chat(request) -> ChatResponse``.
Two ship here: :class:`~ttsp.backend.openai.OpenAIChatBackend` (HTTP) and
:class:`~ttsp.backend.scripted.ScriptedBackend` (deterministic test double).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Any, Protocol

from ..core import RunConfig, TokenRecord

TOOL_NAME = "image_zoom_in_tool"


class FinishReason(str, enum.Enum):
    STOP = "stop"
    TOOL_CALL = "tool_call"
    LENGTH = "length"


@dataclass(frozen=True)
class RequestKey:
    """Identifies a request for scripting, seeding and logging.

    ``mode`` is ``fresh``, ``guided`` or ``extract``; ``turn`` counts chat
    calls already made inside the trace.
    """

    task_id: str
    round: int
    mode: str
    sample: int
    memory: str = "none"
    turn: int = 0


@dataclass(frozen=True)
class ChatRequest:
    messages: list[dict]
    tools: list[dict] = field(default_factory=list)
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0
    max_tokens: int = 51200
    logprob_depth: int = 20
    seed: int | None = None
    key: RequestKey | None = None

    @classmethod
    def from_config(cls, config: RunConfig, messages: list[dict], **overrides) -> "ChatRequest":
        kw: dict[str, Any] = dict(
            temperature=config.decode_temperature,
            top_p=config.top_p,
            top_k=config.top_k,
            max_tokens=config.max_tokens,
            logprob_depth=config.logprob_depth,
        )
        kw.update(overrides)
        return cls(messages=messages, **kw)


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict | None
    raw_arguments: str = ""
    call_id: str = "call_0"


@dataclass(frozen=True)
class ChatResponse:
    text: str
    tool_call: ToolCall | None
    tokens: tuple[TokenRecord, ...]
    finish_reason: FinishReason

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "finish_reason", FinishReason(self.finish_reason))


class Backend(Protocol):
    async def chat(self, request: ChatRequest) -> ChatResponse: ...


def sample_seed(task_id: str, round: int, sample: int) -> int:
    """Stable per-sample seed: hash of (task id, round, sample index)."""
    digest = hashlib.sha256(f"{task_id}\0{round}\0{sample}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


# OpenAI-style message helpers


def image_part(data_url: str) -> dict:
    return {"type": "image_url", "image_url": {"url": data_url}}


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def system_message(text: str) -> dict:
    return {"role": "system", "content": text}


def user_message(text: str, image_urls: list[str] = ()) -> dict:
    return {"role": "user", "content": [image_part(u) for u in image_urls] + [text_part(text)]}


def assistant_message(response: ChatResponse) -> dict:
    msg: dict[str, Any] = {"role": "assistant", "content": response.text}
    if response.tool_call is not None:
        msg["tool_calls"] = [
            {
                "id": response.tool_call.call_id,
                "type": "function",
                "function": {"name": response.tool_call.name, "arguments": response.tool_call.raw_arguments},
            }
        ]
    return msg


def tool_message(call_id: str, text: str) -> dict:
    return {"role": "tool", "tool_call_id": call_id, "content": text}


from .scripted import ScriptedBackend, ScriptTurn  # noqa: E402
from .openai import OpenAIChatBackend  # noqa: E402

__all__ = [
    "Backend",
    "ChatRequest",
    "ChatResponse",
    "FinishReason",
    "OpenAIChatBackend",
    "RequestKey",
    "ScriptTurn",
    "ScriptedBackend",
    "TOOL_NAME",
    "ToolCall",
    "sample_seed",
]

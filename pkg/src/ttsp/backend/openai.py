"""HTTP client for OpenAI-compatible chat-completion endpoints."""

from __future__ import annotations

import asyncio
import json
import logging
import os
from typing import Awaitable, Callable

import httpx

from ..core import TokenRecord
from ..errors import ContextOverflow, EndpointUnavailable, MissingLogprobs
from . import ChatRequest, ChatResponse, FinishReason, ToolCall

log = logging.getLogger(__name__)

ENV_ENDPOINT = "TTSP_ENDPOINT"
ENV_API_KEY = "TTSP_API_KEY"
ENV_MODEL = "TTSP_MODEL"
ENV_TIMEOUT = "TTSP_TIMEOUT"

_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}
_OVERFLOW_HINTS = ("context length", "context_length", "maximum context", "too many tokens", "prompt is too long")
_FINISH = {"stop": FinishReason.STOP, "tool_calls": FinishReason.TOOL_CALL, "function_call": FinishReason.TOOL_CALL,
           "length": FinishReason.LENGTH}


class OpenAIChatBackend:
    """Chat-completions client with top-k log-probs and bounded retries.

    Transient failures (connection errors, timeouts, 408/409/429/5xx) are
    retried with capped exponential backoff, at most ``max_attempts`` calls in
    total. ``concurrency`` caps in-flight requests.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        *,
        timeout: float | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        concurrency: int = 16,
        transport: httpx.AsyncBaseTransport | None = None,
        sleep: Callable[[float], Awaitable[None]] = asyncio.sleep,
    ):
        self.base_url = (base_url or os.environ.get(ENV_ENDPOINT, "")).rstrip("/")
        if not self.base_url:
            raise EndpointUnavailable(f"no endpoint configured (set {ENV_ENDPOINT})")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model or os.environ.get(ENV_MODEL, "default")
        self.timeout = float(timeout if timeout is not None else os.environ.get(ENV_TIMEOUT, 120.0))
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.concurrency = concurrency
        self._transport = transport
        self._sleep = sleep
        self._loop = None
        self._sem: asyncio.Semaphore | None = None
        self._warned_depth = False
        self.retry_delay_total = 0.0

    def _semaphore(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._loop is not loop:
            self._loop = loop
            self._sem = asyncio.Semaphore(self.concurrency)
        return self._sem

    def payload(self, request: ChatRequest) -> dict:
        body = {
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "logprobs": True,
            "top_logprobs": request.logprob_depth,
        }
        if request.tools:
            body["tools"] = request.tools
        if request.top_k > 0:
            body["top_k"] = request.top_k
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * (2 ** attempt))

    async def chat(self, request: ChatRequest) -> ChatResponse:
        body = self.payload(request)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = "unknown error"
        async with self._semaphore():
            async with httpx.AsyncClient(timeout=self.timeout, transport=self._transport) as client:
                for attempt in range(self.max_attempts):
                    if attempt:
                        delay = self.backoff(attempt - 1)
                        self.retry_delay_total += delay
                        log.info("retrying chat request in %.2fs (attempt %d/%d): %s",
                                 delay, attempt + 1, self.max_attempts, last_error)
                        await self._sleep(delay)
                    try:
                        resp = await client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
                    except (httpx.TransportError, httpx.TimeoutException) as exc:
                        last_error = f"{type(exc).__name__}: {exc}"
                        continue
                    if resp.status_code == 200:
                        return self.parse_response(resp.json(), request.logprob_depth)
                    text = resp.text
                    if resp.status_code in (400, 413) and any(h in text.lower() for h in _OVERFLOW_HINTS):
                        raise ContextOverflow(text[:500])
                    last_error = f"HTTP {resp.status_code}: {text[:200]}"
                    if resp.status_code not in _RETRY_STATUS:
                        break
        raise EndpointUnavailable(last_error)

    def parse_response(self, data: dict, depth: int) -> ChatResponse:
        try:
            choice = data["choices"][0]
            message = choice["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointUnavailable(f"malformed completion payload: {exc}") from exc

        lp = choice.get("logprobs")
        content = lp.get("content") if isinstance(lp, dict) else None
        if content is None:
            raise MissingLogprobs("endpoint returned no token logprobs; it must support logprobs/top_logprobs")
        tokens = []
        for item in content:
            tops = item.get("top_logprobs") or [{"token": item["token"], "logprob": item["logprob"]}]
            if len(tops) < depth and len(tops) > 0 and not self._warned_depth:
                self._warned_depth = True
                log.warning("endpoint returned %d top logprobs (< requested %d); entropy uses what is returned",
                            len(tops), depth)
            tokens.append(TokenRecord.from_unsorted(item["token"], [(t["token"], t["logprob"]) for t in tops]))

        call = None
        tool_calls = message.get("tool_calls") or []
        if tool_calls:
            fn = tool_calls[0].get("function", {})
            raw = fn.get("arguments") or ""
            try:
                args = json.loads(raw) if isinstance(raw, str) else raw
            except json.JSONDecodeError:
                args = None
            call = ToolCall(fn.get("name", ""), args if isinstance(args, dict) else None,
                            raw if isinstance(raw, str) else json.dumps(raw), tool_calls[0].get("id", "call_0"))
        finish = _FINISH.get(choice.get("finish_reason") or "stop", FinishReason.STOP)
        if call is not None and finish is FinishReason.STOP:
            finish = FinishReason.TOOL_CALL
        return ChatResponse(text=message.get("content") or "", tool_call=call, tokens=tuple(tokens),
                            finish_reason=finish)


import asyncio
import json
import math

import httpx
import pytest

from ttsp.backend import (
    ChatRequest,
    FinishReason,
    OpenAIChatBackend,
    RequestKey,
    ScriptedBackend,
    sample_seed,
)
from ttsp.backend.scripted import synth_tokens, topk_for_entropy
from ttsp.errors import ContextOverflow, EndpointUnavailable, MissingLogprobs, ParseError
from ttsp.reliability import entropy_of_logprobs


def completion(content="The answer is \\boxed{B}", tool_calls=None, finish="stop", logprobs=True):
    toks = [{"token": "The", "logprob": -0.1, "top_logprobs": [{"token": "A", "logprob": -2.5},
                                                             {"token": "The", "logprob": -0.1}]}]
    choice = {"message": {"role": "assistant", "content": content}, "finish_reason": finish}
    if tool_calls:
        choice["message"]["tool_calls"] = tool_calls
    if logprobs:
        choice["logprobs"] = {"content": toks}
    return {"choices": [choice]}


def backend_with(handler, **kw):
    sleeps = []

    async def fake_sleep(d):
        sleeps.append(d)

    b = OpenAIChatBackend("http://model.test/v1", "key", "m", transport=httpx.MockTransport(handler),
                          sleep=fake_sleep, **kw)
    return b, sleeps


def req(**kw):
    return ChatRequest(messages=[{"role": "user", "content": "hi"}], **kw)


def test_payload_and_parse():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json=completion())

    b, _ = backend_with(handler)
    resp = asyncio.run(b.chat(req(logprob_depth=5, seed=3)))
    assert seen["body"]["logprobs"] is True and seen["body"]["top_logprobs"] == 5
    assert seen["body"]["seed"] == 3 and "top_k" not in seen["body"]
    assert seen["auth"] == "Bearer key"
    assert resp.finish_reason is FinishReason.STOP
    assert resp.tokens[0].logprobs == (-0.1, -2.5)


def test_tool_call_parsing():
    calls = [{"id": "c1", "type": "function",
              "function": {"name": "image_zoom_in_tool", "arguments": '{"bbox_2d": [0, 0, 1, 1]}'}}]
    b, _ = backend_with(lambda r: httpx.Response(200, json=completion("", calls, "tool_calls")))
    resp = asyncio.run(b.chat(req()))
    assert resp.tool_call.arguments == {"bbox_2d": [0, 0, 1, 1]}
    assert resp.finish_reason is FinishReason.TOOL_CALL

    calls[0]["function"]["arguments"] = "{broken"
    b, _ = backend_with(lambda r: httpx.Response(200, json=completion("", calls, "tool_calls")))
    resp = asyncio.run(b.chat(req()))
    assert resp.tool_call.arguments is None and resp.tool_call.raw_arguments == "{broken"


def test_retries_then_succeeds():
    attempts = []

    def handler(request):
        attempts.append(1)
        if len(attempts) < 3:
            return httpx.Response(503, text="busy")
        return httpx.Response(200, json=completion())

    b, sleeps = backend_with(handler)
    asyncio.run(b.chat(req()))
    assert len(attempts) == 3 and sleeps == [0.5, 1.0]


def test_gives_up_after_max_attempts():
    def handler(request):
        raise httpx.ConnectError("refused")

    b, sleeps = backend_with(handler, max_attempts=4)
    with pytest.raises(EndpointUnavailable):
        asyncio.run(b.chat(req()))
    assert len(sleeps) == 3


def test_non_retryable_and_overflow():
    b, sleeps = backend_with(lambda r: httpx.Response(401, text="bad key"))
    with pytest.raises(EndpointUnavailable):
        asyncio.run(b.chat(req()))
    assert sleeps == []
    b, _ = backend_with(lambda r: httpx.Response(400, text="This model's maximum context length is 32768"))
    with pytest.raises(ContextOverflow):
        asyncio.run(b.chat(req()))


def test_missing_logprobs():
    b, _ = backend_with(lambda r: httpx.Response(200, json=completion(logprobs=False)))
    with pytest.raises(MissingLogprobs):
        asyncio.run(b.chat(req()))


def test_backoff_capped():
    b, _ = backend_with(lambda r: None, backoff_base=1.0, backoff_cap=3.0)
    assert [b.backoff(i) for i in range(4)] == [1.0, 2.0, 3.0, 3.0]


def test_env_configuration(monkeypatch):
    monkeypatch.delenv("TTSP_ENDPOINT", raising=False)
    with pytest.raises(EndpointUnavailable):
        OpenAIChatBackend()
    monkeypatch.setenv("TTSP_ENDPOINT", "http://x/v1/")
    monkeypatch.setenv("TTSP_MODEL", "vl")
    b = OpenAIChatBackend()
    assert b.base_url == "http://x/v1" and b.model == "vl"


@pytest.mark.parametrize("h", [0.0, 1e-6, 0.05, 0.7, 2.0, math.log(20)])
def test_topk_for_entropy_hits_target(h):
    lps = topk_for_entropy(h, 20)
    assert entropy_of_logprobs(lps) == pytest.approx(h, abs=1e-9)
    assert list(lps) == sorted(lps, reverse=True)


def test_synth_tokens_per_token_entropies():
    toks = synth_tokens("a b", (0.1, 0.5), 20)
    assert [t.token_text for t in toks] == ["a", "b"]
    with pytest.raises(ValueError):
        synth_tokens("a b c", (0.1, 0.5), 20)


def key(**kw):
    base = dict(task_id="t", round=1, mode="fresh", sample=0, memory="none", turn=0)
    base.update(kw)
    return RequestKey(**base)


def test_scripted_lookup_specificity():
    b = ScriptedBackend.from_records([
        {"task": "*", "round": "*", "mode": "*", "sample": "*", "memory": "*", "turns": [{"text": "generic", "answer": "A"}]},
        {"task": "t", "round": 1, "mode": "fresh", "sample": "*", "memory": "*", "turns": [{"text": "round one", "answer": "B"}]},
        {"task": "t", "round": 1, "mode": "fresh", "sample": 2, "memory": "*", "turns": [{"text": "sample two", "answer": "C"}]},
    ])
    assert b.respond(req(key=key(sample=2))).text.startswith("sample two")
    assert b.respond(req(key=key(sample=5))).text.startswith("round one")
    assert b.respond(req(key=key(round=3))).text.startswith("generic")


def test_scripted_errors_and_tool_calls(tmp_path):
    b = ScriptedBackend.from_records([
        {"task": "t", "turns": [{"text": "zoom", "tool_call": {"bbox_2d": [0, 0, 1, 1]}}, {"error": "ContextOverflow"}]},
    ])
    r = b.respond(req(key=key()))
    assert r.finish_reason is FinishReason.TOOL_CALL and r.tokens[-1].token_text == "<tool_call>"
    with pytest.raises(ContextOverflow):
        b.respond(req(key=key(turn=1)))
    with pytest.raises(EndpointUnavailable):
        b.respond(req(key=key(turn=2)))
    with pytest.raises(EndpointUnavailable):
        b.respond(req(key=key(task_id="other")))

    bad = tmp_path / "s.jsonl"
    bad.write_text('{"task": "t", "turns": []}\n{"task": "t", "turns": [{"bogus": 1}]}\n')
    with pytest.raises(ParseError) as err:
        ScriptedBackend.from_jsonl(bad)
    assert err.value.line == 2


def test_sample_seed_stable():
    assert sample_seed("t", 1, 0) == sample_seed("t", 1, 0)
    assert sample_seed("t", 1, 0) != sample_seed("t", 1, 1)
    assert 0 <= sample_seed("x", 9, 9) < 2**31

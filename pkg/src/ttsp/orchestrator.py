"""Multi-round perception search: rollouts, filtering, memory, final vote."""

from __future__ import annotations

import asyncio
import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .aggregation import extract_answer, weighted_vote
from .backend import (
    TOOL_NAME,
    Backend,
    ChatRequest,
    ChatResponse,
    FinishReason,
    RequestKey,
    assistant_message,
    sample_seed,
    system_message,
    tool_message,
    user_message,
)
from .core import (
    INF,
    EMPTY_MEMORY,
    KnowledgeMemory,
    PerceptionTrace,
    RoundStats,
    RunConfig,
    RunResult,
    TraceMode,
    TraceTurn,
    to_jsonable,
)
from .errors import AllRoundsFailed, BackendError, MalformedToolCall, RoundFailed
from .memory import (
    build_extraction_request,
    parse_memory_response,
    render_memory_context,
    validate_memory_transition,
)
from .prompts import PromptSet, assemble, default_templates, options_block
from .reliability import entropy_filter, score_tokens
from .vistool import ImageAsset, parse_invocation, zoom_in

log = logging.getLogger(__name__)

LogSink = Callable[[dict], None]


@dataclass(frozen=True)
class Task:
    """One question about one image, ready for inference."""

    task_id: str
    question: str
    image: ImageAsset
    options: tuple[tuple[str, str], ...] | None = None

    @property
    def letters(self) -> dict[str, str] | None:
        return dict(self.options) if self.options else None


@dataclass(frozen=True)
class RoundPlan:
    round: int
    fresh_count: int
    guided_count: int
    memory: KnowledgeMemory = EMPTY_MEMORY

    @property
    def total(self) -> int:
        return self.fresh_count + self.guided_count


def split_budget(k: int, alpha: float) -> tuple[int, int]:
    """(fresh, guided) = (ceil(alpha*K), floor((1-alpha)*K)), repaired to sum to K."""
    fresh = min(k, math.ceil(round(alpha * k, 9)))
    guided = math.floor(round((1.0 - alpha) * k, 9))
    if fresh + guided != k:
        # float noise can push the pair to K+1 (or K-1); guided absorbs it
        guided = k - fresh
    return fresh, guided


def plan_round(n: int, config: RunConfig, memory: KnowledgeMemory) -> RoundPlan:
    k = config.traces_per_round
    if n == 1 or not config.structured_knowledge:
        # guided sampling with the empty memory is fresh sampling
        return RoundPlan(n, k, 0, memory)
    fresh, guided = split_budget(k, config.fresh_ratio)
    return RoundPlan(n, fresh, guided, memory)


class Variant(str, enum.Enum):
    NONE = "none"
    NO_RF = "no_rf"
    NO_SK = "no_sk"
    NO_WA = "no_wa"

    @classmethod
    def parse(cls, value: "Variant | str") -> "Variant":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("-", "_"))


def ablation_mode(config: RunConfig, variant: Variant | str) -> RunConfig:
    """Config with one component removed (``none`` returns it unchanged)."""
    v = Variant.parse(variant)
    if v is Variant.NO_RF:
        return dataclasses.replace(config, filter_ratio=0.0)
    if v is Variant.NO_SK:
        return dataclasses.replace(config, structured_knowledge=False)
    if v is Variant.NO_WA:
        return dataclasses.replace(config, vote_temperature=INF)
    return config


# rollouts


@dataclass
class _Rollout:
    turns: list[TraceTurn] = field(default_factory=list)
    tokens: list = field(default_factory=list)
    images: list[ImageAsset] = field(default_factory=list)
    answer: str | None = None
    failure: str | None = None


def _user_prompt_text() -> str:
    return "Image 0 is the original image. Inspect it and answer the question."


async def _drive(
    backend: Backend,
    task: Task,
    mode: TraceMode,
    memory: KnowledgeMemory,
    config: RunConfig,
    round_index: int,
    sample: int,
    prompts: PromptSet,
    state: _Rollout,
) -> None:
    bindings = {"question": task.question, "options_block": options_block(task.options)}
    if mode is TraceMode.GUIDED:
        context = render_memory_context(memory)
        system = assemble(prompts.guided_exploration, {**bindings, "memory_context": context},
                          exploration=prompts.exploration)
        fingerprint = memory.fingerprint()
    else:
        system = assemble(prompts.exploration, bindings)
        fingerprint = "none"
    state.images.append(task.image)
    messages = [system_message(system), user_message(_user_prompt_text(), [_data_url(task.image)])]
    tools = prompts.tools()
    retries = 1

    for turn in range(config.max_turns):
        key = RequestKey(task.task_id, round_index, mode.value, sample, fingerprint, turn)
        request = ChatRequest.from_config(config, messages, tools=tools,
                                          seed=sample_seed(task.task_id, round_index, sample), key=key)
        try:
            resp: ChatResponse = await backend.chat(request)
        except BackendError as exc:
            state.failure = f"{type(exc).__name__}: {exc}"
            state.turns.append(TraceTurn(""))
            return
        state.tokens.extend(resp.tokens)

        if resp.finish_reason is FinishReason.LENGTH:
            state.failure = "length"
            state.turns.append(TraceTurn(resp.text))
            return

        if resp.tool_call is None:
            state.turns.append(TraceTurn(resp.text))
            state.answer = extract_answer(resp.text, task.letters)
            if state.answer is None:
                state.failure = "no parseable answer"
            return

        if turn == config.max_turns - 1:
            # the call would need another turn to use; it is never executed
            state.failure = "turn cap"
            state.turns.append(TraceTurn(resp.text))
            return

        call = resp.tool_call
        try:
            if call.name != TOOL_NAME or call.arguments is None:
                raise MalformedToolCall(f"expected {TOOL_NAME} with JSON object arguments, got {call.name!r}")
            invocation = parse_invocation(call.arguments)
            crop = zoom_in(state.images, invocation)
        except (MalformedToolCall, ValueError, IndexError) as exc:
            state.turns.append(TraceTurn(resp.text))
            if retries == 0:
                state.failure = f"malformed tool call: {exc}"
                return
            retries -= 1
            messages.append(assistant_message(resp))
            messages.append(tool_message(call.call_id, f"Error: {exc}. Call {TOOL_NAME} again with valid arguments."))
            continue

        state.images.append(crop)
        index = len(state.images) - 1
        state.turns.append(TraceTurn(resp.text, invocation, index))
        messages.append(assistant_message(resp))
        messages.append(tool_message(call.call_id, f"Zoomed view of '{invocation.label}' is image {index}."))
        messages.append(user_message(f"Image {index}:", [_data_url(crop)]))

    state.failure = state.failure or "turn cap"


def _data_url(image: ImageAsset) -> str:
    cached = getattr(image, "_data_url_cache", None)
    if cached is None:
        cached = image.data_url()
        object.__setattr__(image, "_data_url_cache", cached)
    return cached


def _finish(state: _Rollout, config: RunConfig, round_index: int, mode: TraceMode, sample: int) -> PerceptionTrace:
    tokens = tuple(state.tokens)
    score = score_tokens(tokens, config.window_for(len(tokens))) if tokens else None
    turns = state.turns or [TraceTurn("")]
    degraded = state.failure is not None
    return PerceptionTrace(
        turns=tuple(turns),
        tokens=tokens,
        answer=None if degraded else state.answer,
        reliability_score=score,
        round_index=round_index,
        mode=mode,
        token_count=len(tokens),
        sample_index=sample,
        degraded=degraded,
        failure=state.failure,
    )


async def arollout_trace(
    backend: Backend,
    task: Task,
    mode: TraceMode | str,
    memory: KnowledgeMemory,
    config: RunConfig,
    *,
    round_index: int = 1,
    sample: int = 0,
    prompts: PromptSet | None = None,
) -> PerceptionTrace:
    """Generate one perception trace. Failures yield a degraded, answerless trace."""
    mode = TraceMode(mode)
    if mode is TraceMode.FRESH:
        memory = EMPTY_MEMORY
    state = _Rollout()
    try:
        await asyncio.wait_for(
            _drive(backend, task, mode, memory, config, round_index, sample, prompts or default_templates(), state),
            timeout=config.trace_timeout,
        )
    except asyncio.TimeoutError:
        state.failure = f"timeout after {config.trace_timeout}s"
        if state.turns and state.turns[-1].tool_call is not None:
            state.turns.append(TraceTurn(""))
    return _finish(state, config, round_index, mode, sample)


def rollout_trace(backend, task, mode, memory, config, **kwargs) -> PerceptionTrace:
    return asyncio.run(arollout_trace(backend, task, mode, memory, config, **kwargs))


@dataclass(frozen=True)
class RoundOutcome:
    plan: RoundPlan
    traces: tuple[PerceptionTrace, ...]
    retained: tuple[PerceptionTrace, ...]
    discarded: tuple[PerceptionTrace, ...]

    @property
    def completed(self) -> tuple[PerceptionTrace, ...]:
        return tuple(t for t in self.traces if _eligible(t))


def _eligible(trace: PerceptionTrace) -> bool:
    return not trace.degraded and trace.answer is not None and trace.reliability_score is not None


async def arun_round(
    plan: RoundPlan,
    task: Task,
    config: RunConfig,
    backend: Backend,
    prompts: PromptSet | None = None,
) -> RoundOutcome:
    """Launch the round's rollouts concurrently, then filter the completed ones jointly.

    Raises:
        RoundFailed: if no rollout completed with an answer.
    """
    prompts = prompts or default_templates()
    modes = [TraceMode.FRESH] * plan.fresh_count + [TraceMode.GUIDED] * plan.guided_count
    traces = await asyncio.gather(*(
        arollout_trace(backend, task, mode, plan.memory, config, round_index=plan.round, sample=i, prompts=prompts)
        for i, mode in enumerate(modes)
    ))
    completed = [t for t in traces if _eligible(t)]
    if not completed:
        raise RoundFailed(f"round {plan.round}: all {len(traces)} rollouts failed")
    retained, discarded = entropy_filter(completed, config.filter_ratio)
    return RoundOutcome(plan, tuple(traces), tuple(retained), tuple(discarded))


def run_round(plan, task, config, backend, prompts=None) -> RoundOutcome:
    return asyncio.run(arun_round(plan, task, config, backend, prompts))


async def _extract(
    backend: Backend,
    task: Task,
    retained: Sequence[PerceptionTrace],
    prev: KnowledgeMemory,
    n: int,
    config: RunConfig,
    prompts: PromptSet,
) -> tuple[KnowledgeMemory, int]:
    request = build_extraction_request(
        retained, prev, task.question, task.options, images=[task.image],
        digest_budget=config.digest_budget, turn_char_budget=config.turn_char_budget,
    )
    prompt = assemble(prompts.knowledge_extraction, {
        "round": str(n),
        "question": task.question,
        "options_block": options_block(task.options),
        "prev_memory": render_memory_context(prev) or "(none yet)",
        "trace_digests": request.digest_text(),
    })
    messages = [system_message(prompt),
                user_message("Return the updated knowledge as one fenced JSON block.", [_data_url(task.image)])]
    chat = ChatRequest.from_config(
        config, messages, temperature=0.0, top_p=1.0, top_k=0, max_tokens=config.extraction_max_tokens,
        key=RequestKey(task.task_id, n, "extract", 0, prev.fingerprint(), 0),
    )
    try:
        resp = await backend.chat(chat)
    except BackendError as exc:
        log.warning("extraction call failed in round %d, carrying memory forward: %s", n, exc)
        return dataclasses.replace(prev, round=n), 0
    memory = parse_memory_response(resp.text, prev, n)
    if memory is prev:
        memory = dataclasses.replace(prev, round=n)
    return memory, len(resp.tokens)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def trace_record(task_id: str, trace: PerceptionTrace, retained: bool) -> dict:
    return {
        "type": "trace",
        "task_id": task_id,
        "round": trace.round_index,
        "mode": trace.mode.value,
        "sample": trace.sample_index,
        "score": trace.reliability_score,
        "answer": trace.answer,
        "tool_calls": [to_jsonable(t.tool_call) for t in trace.turns if t.tool_call is not None],
        "tokens": trace.token_count,
        "degraded": trace.degraded,
        "failure": trace.failure,
        "retained": retained,
    }


async def arun_ttsp(
    task: Task,
    config: RunConfig,
    backend: Backend,
    *,
    prompts: PromptSet | None = None,
    log_sink: LogSink | None = None,
) -> RunResult:
    """Run every round, accumulate retained traces, and vote.

    Raises:
        AllRoundsFailed: no round completed a single trace.
        NoVotes: propagated from the final vote.
    """
    prompts = prompts or default_templates()
    memory = EMPTY_MEMORY
    history: list[KnowledgeMemory] = [memory]
    accumulated: list[PerceptionTrace] = []
    stats: list[RoundStats] = []
    discarded_total = 0
    total_tokens = 0
    extraction_calls = 0
    failed_rounds = 0

    for n in range(1, config.rounds + 1):
        plan = plan_round(n, config, memory)
        try:
            outcome = await arun_round(plan, task, config, backend, prompts)
        except RoundFailed as exc:
            log.warning("%s: %s", task.task_id, exc)
            failed_rounds += 1
            outcome = None
        traces = outcome.traces if outcome else ()
        retained = outcome.retained if outcome else ()
        if outcome:
            accumulated.extend(retained)
            discarded_total += len(outcome.discarded)
        round_tokens = sum(t.token_count for t in traces)
        total_tokens += round_tokens
        stats.append(RoundStats(
            round=n,
            fresh_count=plan.fresh_count,
            guided_count=plan.guided_count,
            completed=len(outcome.completed) if outcome else 0,
            traces_kept=len(retained),
            mean_tool_calls=_mean([t.tool_calls for t in traces]),
            mean_reasoning_tokens=_mean([t.token_count for t in traces]),
            generated_tokens=round_tokens,
        ))
        if log_sink is not None:
            kept = {id(t) for t in retained}
            for t in traces:
                log_sink(trace_record(task.task_id, t, id(t) in kept))

        if n < config.rounds and config.structured_knowledge and retained:
            new_memory, used = await _extract(backend, task, retained, memory, n, config, prompts)
            extraction_calls += 1
            total_tokens += used
            transitions = validate_memory_transition(memory, new_memory)
            if log_sink is not None:
                for rec in transitions:
                    log_sink({"type": "memory_transition", "task_id": task.task_id, "round": n,
                              **to_jsonable(rec)})
            memory = new_memory
            history.append(memory)

    if failed_rounds == config.rounds:
        raise AllRoundsFailed(f"{task.task_id}: every round failed")
    tally = weighted_vote(accumulated, config.vote_temperature)
    return RunResult(
        answer=tally.winner,
        tally=tally,
        retained_traces=tuple(accumulated),
        discarded_count=discarded_total,
        per_round_stats=tuple(stats),
        total_generated_tokens=total_tokens,
        memory_history=tuple(history),
        task_id=task.task_id,
        extraction_calls=extraction_calls,
        prompt_hash=prompts.hash,
        config=config,
    )


def run_ttsp(task: Task, config: RunConfig, backend: Backend, **kwargs) -> RunResult:
    return asyncio.run(arun_ttsp(task, config, backend, **kwargs))

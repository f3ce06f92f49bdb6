"""Model-free Monte-Carlo lab for the statistics of multi-round perception search.

A synthetic scene places the true evidence region and some distractor regions
on a grid. Each simulated trace inspects one region; it answers correctly iff
the region overlaps the evidence with IoU >= delta. Trace confidence is drawn
from two entropy regimes (correct traces calmer than incorrect ones), and the
real filter, vote and memory types decide the outcome.

Random numbers come from numpy's Philox4x64 counter-based generator keyed by
``(seed, trial)`` with the round index in the counter, so trial ``t`` round
``n`` slot ``k`` sees the same uniforms whatever the other parameters are.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregation import weighted_vote
from .core import (
    INF,
    BoundingBox,
    ConfirmedFact,
    EMPTY_MEMORY,
    KnowledgeMemory,
    PerceptionTrace,
    RunConfig,
    TraceMode,
    TraceTurn,
)
from .memory import validate_memory_transition
from .orchestrator import Variant, ablation_mode, plan_round
from .reliability import EntropyProfile, entropy_filter, reliability_score

Rect = tuple[int, int, int, int]  # row0, col0, row1, col1 (exclusive ends)

SWEEP_HEADER = ("parameter", "value", "accuracy", "stderr", "trials", "seed")
SWEEP_PARAMETERS = ("alpha", "rho", "width", "depth", "gamma")


def coverage_probability(success_probs: Sequence[float]) -> float:
    """Chance that at least one of several independent hypotheses succeeds."""
    if len(success_probs) == 0:
        raise ValueError("need at least one success probability")
    miss = 1.0
    for p in success_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
        miss *= 1.0 - p
    return 1.0 - miss


def rect_iou(a: Rect, b: Rect) -> float:
    r0, c0 = max(a[0], b[0]), max(a[1], b[1])
    r1, c1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union else 0.0


@dataclass(frozen=True)
class SyntheticScene:
    """Grid scene with the evidence region and distractors.

    Misses inspect distractor ``i`` with probability proportional to
    ``distractor_weights[i]`` and answer ``distractor_answers[i]``.
    """

    grid: tuple[int, int] = (16, 16)
    evidence: Rect = (3, 10, 5, 13)
    distractors: tuple[Rect, ...] = ((9, 2, 12, 5), (12, 11, 14, 14), (1, 1, 3, 4))
    distractor_weights: tuple[float, ...] = (0.5, 0.3, 0.2)
    iou_threshold: float = 0.5
    correct_answer: str = "A"
    distractor_answers: tuple[str, ...] = ("B", "C", "D")

    def __post_init__(self):
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError("grid must be at least 1x1")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        for rect in (self.evidence, *self.distractors):
            r0, c0, r1, c1 = rect
            if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
                raise ValueError(f"region {rect} is empty or outside the {rows}x{cols} grid")
        if not self.distractors:
            raise ValueError("need at least one distractor region")
        if len(self.distractor_weights) != len(self.distractors) or len(self.distractor_answers) != len(self.distractors):
            raise ValueError("one weight and one answer per distractor")
        if any(w < 0 for w in self.distractor_weights) or sum(self.distractor_weights) <= 0:
            raise ValueError("distractor weights must be non-negative with a positive sum")
        for d in self.distractors:
            if rect_iou(d, self.evidence) >= self.iou_threshold:
                raise ValueError(f"distractor {d} already covers the evidence at IoU >= delta")
        if self.correct_answer in self.distractor_answers:
            raise ValueError("distractor answers must differ from the correct answer")

    @property
    def regions(self) -> tuple[Rect, ...]:
        return (self.evidence, *self.distractors)

    def hits(self, region: int) -> bool:
        return rect_iou(self.regions[region], self.evidence) >= self.iou_threshold

    def answer_for(self, region: int) -> str:
        return self.correct_answer if self.hits(region) else self.distractor_answers[region - 1]

    def box(self, region: int) -> BoundingBox:
        rows, cols = self.grid
        r0, c0, r1, c1 = self.regions[region]
        return BoundingBox(c0 / cols, r0 / rows, c1 / cols, r1 / rows)

    def cumulative_weights(self) -> np.ndarray:
        w = np.asarray(self.distractor_weights, dtype=float)
        return np.cumsum(w / w.sum())


@dataclass(frozen=True)
class AgentPolicy:
    """Two-regime behaviour model of the simulated agent.

    ``p`` is the chance a fresh trace inspects the evidence; ``p_guided`` the
    chance a guided trace does when memory confirms the evidence region. A
    guided trace follows memory with probability
    ``(p_guided - p) / (1 - p)`` and otherwise explores like a fresh one.
    ``shared_failure`` is the per-round chance that every exploring trace
    misses together (correlated failure).
    """

    p: float = 0.3
    p_guided: float = 0.8
    correct_entropy: tuple[float, float] = (0.1, 0.6)
    incorrect_entropy: tuple[float, float] = (0.5, 1.3)
    decision_points: int = 1
    shared_failure: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p <= self.p_guided <= 1.0:
            raise ValueError("need 0 < p <= p_guided <= 1")
        for lo, hi in (self.correct_entropy, self.incorrect_entropy):
            if not 0.0 <= lo <= hi:
                raise ValueError("entropy ranges must satisfy 0 <= lo <= hi")
        if self.decision_points < 1:
            raise ValueError("decision_points must be >= 1")
        if not 0.0 <= self.shared_failure <= 1.0:
            raise ValueError("shared_failure must be in [0, 1]")

    @property
    def follow_prob(self) -> float:
        if self.p >= 1.0:
            return 0.0
        return (self.p_guided - self.p) / (1.0 - self.p)

    @property
    def stride(self) -> int:
        return 4 + self.decision_points


SEPARATED_ENTROPY = dict(correct_entropy=(0.1, 0.5), incorrect_entropy=(0.6, 1.3))
# heavy overlap: entropy is a weak proxy, so aggressive filtering starts to hurt
OVERLAPPING_ENTROPY = dict(correct_entropy=(0.1, 0.9), incorrect_entropy=(0.3, 1.3))
REGIMES = {"default": {}, "separated": SEPARATED_ENTROPY, "overlapping": OVERLAPPING_ENTROPY}


@dataclass(frozen=True)
class RoundSummary:
    round: int
    hit_rate: float
    retained: float
    key_fact_rate: float


@dataclass(frozen=True)
class SimResult:
    accuracy: float
    stderr: float
    trials: int
    seed: int
    correct: np.ndarray = dataclasses.field(repr=False, compare=False)
    per_round: tuple[RoundSummary, ...] = ()


def _trial_uniforms(seed: int, trial: int, round_index: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([seed, trial], dtype=np.uint64),
                              counter=np.array([0, round_index, 0, 0], dtype=np.uint64))
    return np.random.Generator(bitgen).random(count)


_TURN = (TraceTurn(""),)


def _statement(region: int) -> str:
    return f"the decisive detail is in region {region}"


def _region_of(statement: str) -> int:
    return int(statement.rsplit(" ", 1)[1])


def synthetic_extraction(
    retained: Sequence[tuple[PerceptionTrace, int]],
    prev: KnowledgeMemory,
    round_index: int,
    scene: SyntheticScene,
    min_support: int = 2,
) -> KnowledgeMemory:
    """Deterministic stand-in for the extraction call.

    The key fact (the evidence region) is confirmed once at least
    ``min_support`` retained traces of the round inspected it; a confirmed
    fact is carried forward. Nothing else ever enters the memory, so the
    stand-in models a precise, conservative extractor.
    """
    if prev.confirmed:
        return dataclasses.replace(prev, round=round_index)
    support = sum(1 for _, region in retained if scene.hits(region))
    if support < min_support:
        return dataclasses.replace(prev, round=round_index)
    fact = ConfirmedFact(_statement(0), scene.box(0), round_index)
    return KnowledgeMemory((fact,), (), round_index)


def _memory_targets(memory: KnowledgeMemory) -> list[int]:
    if memory.confirmed:
        return [_region_of(memory.confirmed[0].statement)]
    if memory.conflicts:
        return [_region_of(c) for c in memory.conflicts[0].claims]
    return []


def _simulate_trial(scene, policy, config, seed, trial, cum_w, rounds_acc):
    memory = EMPTY_MEMORY
    accumulated: list[PerceptionTrace] = []
    window = policy.decision_points
    follow = policy.follow_prob
    stride = policy.stride
    n_distr = len(scene.distractors)
    lo_c, hi_c = policy.correct_entropy
    lo_i, hi_i = policy.incorrect_entropy

    for n in range(1, config.rounds + 1):
        plan = plan_round(n, config, memory)
        u = _trial_uniforms(seed, trial, n, 1 + plan.total * stride)
        shared_miss = u[0] < policy.shared_failure
        targets = _memory_targets(memory)
        traces = []
        regions = []
        hits = 0
        for k in range(plan.total):
            base = 1 + k * stride
            u_aim, u_distr, u_follow, u_target = u[base:base + 4]
            guided = k >= plan.fresh_count
            if guided and targets and u_follow < follow:
                region = targets[min(int(u_target * len(targets)), len(targets) - 1)]
            elif not shared_miss and u_aim < policy.p:
                region = 0
            else:
                region = 1 + min(int(np.searchsorted(cum_w, u_distr, side="right")), n_distr - 1)
            correct = scene.hits(region)
            hits += correct
            lo, hi = (lo_c, hi_c) if correct else (lo_i, hi_i)
            ents = lo + u[base + 4:base + stride] * (hi - lo)
            score = reliability_score(EntropyProfile(tuple(ents.tolist())), window)
            traces.append(PerceptionTrace(
                _TURN, (), scene.answer_for(region), score, n,
                TraceMode.GUIDED if guided else TraceMode.FRESH, window, k,
            ))
            regions.append(region)
        retained, _ = entropy_filter(traces, config.filter_ratio)
        accumulated.extend(retained)
        stats = rounds_acc[n - 1]
        stats[0] += hits / plan.total
        stats[1] += len(retained)
        stats[2] += any(_region_of(f.statement) == 0 for f in memory.confirmed)
        if n < config.rounds and config.structured_knowledge:
            kept = {id(t) for t in retained}
            pairs = [(t, r) for t, r in zip(traces, regions) if id(t) in kept]
            new_memory = synthetic_extraction(pairs, memory, n, scene)
            validate_memory_transition(memory, new_memory)
            memory = new_memory
    tally = weighted_vote(accumulated, config.vote_temperature)
    return tally.winner == scene.correct_answer


def simulate_ttsp(
    scene: SyntheticScene,
    policy: AgentPolicy,
    config: RunConfig,
    trials: int,
    seed: int = 0,
) -> SimResult:
    """Monte-Carlo accuracy of a configuration; bitwise reproducible per seed."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cum_w = scene.cumulative_weights()
    rounds_acc = [[0.0, 0.0, 0.0] for _ in range(config.rounds)]
    correct = np.fromiter(
        (_simulate_trial(scene, policy, config, seed, t, cum_w, rounds_acc) for t in range(trials)),
        dtype=bool, count=trials,
    )
    acc = float(correct.mean())
    stderr = math.sqrt(acc * (1.0 - acc) / trials)
    per_round = tuple(
        RoundSummary(n + 1, s[0] / trials, s[1] / trials, s[2] / trials) for n, s in enumerate(rounds_acc)
    )
    return SimResult(acc, stderr, trials, seed, correct, per_round)


def simulate_coverage(
    k: int, p: float, trials: int, seed: int = 0, scene: SyntheticScene | None = None
) -> tuple[float, float]:
    """Monte-Carlo chance that at least one of ``k`` fresh traces hits the evidence.

    Returns (estimate, binomial standard error).
    """
    scene = scene or SyntheticScene()
    if k < 1 or trials < 1:
        raise ValueError("k and trials must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    u = rng.random((trials, k, 2))
    cum_w = scene.cumulative_weights()
    distractor = 1 + np.minimum(np.searchsorted(cum_w, u[..., 1], side="right"), len(scene.distractors) - 1)
    region = np.where(u[..., 0] < p, 0, distractor)
    region_hit = np.array([scene.hits(r) for r in range(len(scene.regions))])
    covered = region_hit[region].any(axis=1)
    est = float(covered.mean())
    return est, math.sqrt(est * (1.0 - est) / trials)


@dataclass(frozen=True)
class PairedComparison:
    accuracy_a: float
    accuracy_b: float
    difference: float
    stderr: float
    trials: int


def paired_compare(a: SimResult, b: SimResult) -> PairedComparison:
    """Accuracy difference a - b with the standard error of paired differences."""
    if a.trials != b.trials:
        raise ValueError("paired comparison needs equal trial counts")
    d = a.correct.astype(float) - b.correct.astype(float)
    se = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
    return PairedComparison(a.accuracy, b.accuracy, float(d.mean()), se, a.trials)


def self_consistency_config(samples: int) -> RunConfig:
    return RunConfig(rounds=1, traces_per_round=samples, filter_ratio=0.0, vote_temperature=INF)


def with_parameter(config: RunConfig, parameter: str, value: float) -> RunConfig:
    if parameter == "alpha":
        return dataclasses.replace(config, fresh_ratio=float(value))
    if parameter == "rho":
        return dataclasses.replace(config, filter_ratio=float(value))
    if parameter == "width":
        return dataclasses.replace(config, traces_per_round=int(value))
    if parameter == "depth":
        return dataclasses.replace(config, rounds=int(value))
    if parameter == "gamma":
        return dataclasses.replace(config, vote_temperature=float(value))
    raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: float
    accuracy: float
    stderr: float
    trials: int
    seed: int


def sweep(
    parameter: str,
    grid: Sequence[float],
    base: RunConfig,
    scene: SyntheticScene,
    policy: AgentPolicy,
    trials: int,
    seed: int = 0,
) -> list[SweepRow]:
    """Simulate each grid value with common random numbers (same seed stream)."""
    if not grid:
        raise ValueError("grid must be non-empty")
    rows = []
    for value in grid:
        res = simulate_ttsp(scene, policy, with_parameter(base, parameter, value), trials, seed)
        rows.append(SweepRow(parameter, value, res.accuracy, res.stderr, trials, seed))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            value = "inf" if isinstance(r.value, float) and math.isinf(r.value) else r.value
            writer.writerow([r.parameter, value, f"{r.accuracy:.6f}", f"{r.stderr:.6f}", r.trials, r.seed])


def ablation_table(
    base: RunConfig, scene: SyntheticScene, policy: AgentPolicy, trials: int, seed: int = 0
) -> dict[str, SimResult]:
    """Full configuration plus each single-component ablation, on shared randomness."""
    return {v.value: simulate_ttsp(scene, policy, ablation_mode(base, v), trials, seed) for v in Variant}

"""Token entropy, trace reliability scores and the per-round entropy filter."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Sequence

from .core import PerceptionTrace, TokenRecord
from .errors import EmptyTrace


@dataclass(frozen=True)
class EntropyProfile:
    """Per-token entropies (nats) of one trace, in generation order."""

    per_token_entropy: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(h) for h in self.per_token_entropy)
        if any(not math.isfinite(h) or h < 0 for h in vals):
            raise ValueError("entropies must be finite and non-negative")
        object.__setattr__(self, "per_token_entropy", vals)

    def __len__(self):
        return len(self.per_token_entropy)

    @classmethod
    def from_tokens(cls, tokens: Sequence[TokenRecord]) -> "EntropyProfile":
        return cls(tuple(token_entropy(t) for t in tokens))


def entropy_of_logprobs(logprobs: Sequence[float]) -> float:
    """Shannon entropy (nats) of the softmax-renormalized log-probabilities."""
    n = len(logprobs)
    if n == 0:
        raise ValueError("need at least one logprob")
    if n == 1:
        return 0.0
    m = max(logprobs)
    shifted = [lp - m for lp in logprobs]
    weights = [math.exp(s) for s in shifted]
    z = math.fsum(weights)
    log_z = math.log(z)
    # H = log Z - sum(p * shifted), with p = w / Z
    h = log_z - math.fsum(w * s for w, s in zip(weights, shifted)) / z
    # clamp rounding noise into the valid range [0, ln n]
    return min(max(h, 0.0), math.log(n))


def token_entropy(record: TokenRecord) -> float:
    return entropy_of_logprobs(record.logprobs)


def reliability_score(profile: EntropyProfile | Sequence[float], window: int) -> float:
    """Negative mean of the ``window`` largest token entropies.

    If the trace is shorter than ``window`` every token is averaged.

    Raises:
        EmptyTrace: if the profile has no tokens.
    """
    values = profile.per_token_entropy if isinstance(profile, EntropyProfile) else tuple(profile)
    if not values:
        raise EmptyTrace("cannot score a trace with zero tokens")
    if window < 1:
        raise ValueError("window must be >= 1")
    m = min(window, len(values))
    top = heapq.nlargest(m, values)
    score = -math.fsum(top) / m
    return score if score != 0.0 else 0.0


def score_tokens(tokens: Sequence[TokenRecord], window: int) -> float:
    return reliability_score(EntropyProfile.from_tokens(tokens), window)


def retained_count(n: int, rho: float) -> int:
    """Traces kept from ``n`` when the bottom ``rho`` fraction is discarded."""
    if n <= 0:
        return 0
    # round() guards against ceil(0.6*5) == ceil(3.0000000000000004)
    return max(1, math.ceil(round((1.0 - rho) * n, 9)))


def entropy_filter(
    traces: Sequence[PerceptionTrace], rho: float
) -> tuple[list[PerceptionTrace], list[PerceptionTrace]]:
    """Split traces into (retained, discarded) by reliability score.

    Traces are ranked by score, highest first; ties keep sampling order. The
    retained list is in rank order, the discarded list likewise.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    for t in traces:
        if t.reliability_score is None:
            raise ValueError("entropy_filter needs scored traces")
    ranked = sorted(range(len(traces)), key=lambda i: -traces[i].reliability_score)
    keep = retained_count(len(traces), rho)
    return [traces[i] for i in ranked[:keep]], [traces[i] for i in ranked[keep:]]

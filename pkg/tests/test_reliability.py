import math
import random

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from ttsp.core import PerceptionTrace, TokenRecord, TraceMode, TraceTurn
from ttsp.errors import EmptyTrace
from ttsp.reliability import (
    EntropyProfile,
    entropy_filter,
    entropy_of_logprobs,
    reliability_score,
    retained_count,
    score_tokens,
    token_entropy,
)

mpmath.mp.dps = 50


def mp_entropy(logprobs):
    """High-precision entropy of the renormalized distribution."""
    lps = [mpmath.mpf(x) for x in logprobs]
    z = mpmath.fsum(mpmath.exp(x) for x in lps)
    ps = [mpmath.exp(x) / z for x in lps]
    return -mpmath.fsum(p * mpmath.log(p) for p in ps if p > 0)


def random_logprobs(rng, n):
    vals = sorted((rng.uniform(-30, 0) for _ in range(n)), reverse=True)
    return vals


def trace(score, answer="A", sample=0):
    return PerceptionTrace((TraceTurn("x"),), (), answer, score, 1, TraceMode.FRESH, 1, sample)


def test_entropy_matches_mpmath():
    rng = random.Random(7)
    for _ in range(300):
        lps = random_logprobs(rng, rng.randint(1, 20))
        assert abs(entropy_of_logprobs(lps) - float(mp_entropy(lps))) < 1e-9


def test_uniform_gives_log_k():
    for k in range(1, 21):
        assert abs(entropy_of_logprobs([-3.7] * k) - math.log(k)) < 1e-12


def test_single_outcome_is_zero():
    assert entropy_of_logprobs([-0.5]) == 0.0


def test_shift_invariance():
    rng = random.Random(3)
    for _ in range(100):
        lps = random_logprobs(rng, rng.randint(2, 20))
        c = rng.uniform(-50, 50)
        assert abs(entropy_of_logprobs(lps) - entropy_of_logprobs([x + c for x in lps])) < 1e-9


def test_extreme_values_stay_finite():
    h = entropy_of_logprobs([0.0, -700.0, -1e4])
    assert 0.0 <= h < 1e-200
    assert entropy_of_logprobs([-1e5, -1e5]) == pytest.approx(math.log(2), abs=1e-12)


def test_token_entropy_uses_logprobs():
    rec = TokenRecord("a", (("a", math.log(0.5)), ("b", math.log(0.25)), ("c", math.log(0.25))))
    assert token_entropy(rec) == pytest.approx(1.5 * math.log(2), abs=1e-12)


def test_score_is_negative_mean_of_top_window():
    assert reliability_score([0.1, 0.9, 0.5, 0.3], 2) == pytest.approx(-0.7)
    # window longer than the trace averages everything
    assert reliability_score([0.2, 0.4], 10) == pytest.approx(-0.3)
    assert reliability_score([0.0, 0.0], 1) == 0.0


def test_score_of_empty_profile_raises():
    with pytest.raises(EmptyTrace):
        reliability_score(EntropyProfile(()), 3)


def test_score_tokens_matches_profile():
    recs = [TokenRecord("t", (("t", -0.1), ("u", -2.4))), TokenRecord("v", (("v", 0.0),))]
    assert score_tokens(recs, 1) == -max(token_entropy(r) for r in recs)


@given(st.lists(st.floats(0, 3), min_size=1, max_size=40), st.integers(1, 50))
@settings(max_examples=200, deadline=None)
def test_score_bounds(values, window):
    s = reliability_score(values, window)
    assert -max(values) - 1e-12 <= s <= -min(values) + 1e-12


@pytest.mark.parametrize("n,rho,kept", [(8, 0.4, 5), (8, 0.0, 8), (1, 0.8, 1), (5, 0.4, 3), (10, 0.8, 2), (0, 0.4, 0)])
def test_retained_count(n, rho, kept):
    assert retained_count(n, rho) == kept


def brute_force_filter(scores, rho):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = max(1, math.ceil(round((1 - rho) * len(scores), 9)))
    return order[:keep], order[keep:]


def test_filter_matches_exhaustive_oracle():
    rng = random.Random(11)
    for n in range(1, 7):
        for _ in range(40):
            # coarse scores so ties occur
            scores = [-rng.randint(0, 4) / 4 for _ in range(n)]
            traces = [trace(s, sample=i) for i, s in enumerate(scores)]
            for rho in (0, 0.2, 0.4, 0.6, 0.8):
                kept, dropped = entropy_filter(traces, rho)
                want_k, want_d = brute_force_filter(scores, rho)
                assert [t.sample_index for t in kept] == want_k
                assert [t.sample_index for t in dropped] == want_d


def test_filter_rejects_bad_rho():
    with pytest.raises(ValueError):
        entropy_filter([trace(-0.1)], 1.0)

import numpy as np
import pytest


def brute_ranked(coords, center):
    """All other points sorted by (squared distance, index); independent of dgfa.spatial."""
    coords = np.asarray(coords, dtype=np.float64)
    order = []
    for j in range(len(coords)):
        if j == center:
            continue
        d = coords[j] - coords[center]
        order.append((float(d @ d), j))
    order.sort()
    return [j for _, j in order], [np.sqrt(d2) for d2, _ in order]


def literal_rank_pattern(k, step, rate):
    """Skip rate-1 ranks, take `step` ranks, repeat until k ranks are taken."""
    ranks, r = [], 0
    while len(ranks) < k:
        r += rate - 1
        for _ in range(step):
            if len(ranks) == k:
                break
            r += 1
            ranks.append(r)
    return ranks


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def eq1_fraction(k, step, rate):
    """Expansion count evaluated with exact rational arithmetic."""
    import math
    from fractions import Fraction

    q = Fraction(k, step)
    span = rate - 1 + step
    return math.floor(q) * span + math.ceil((q - math.floor(q)) * span)


def alg1_transcribed(k_s, step, rate):
    """The group loop exactly as printed: ranks a..b inclusive per group."""
    import math

    span = rate - 1 + step
    m = math.ceil(k_s / span)
    out = []
    for i in range(1, m):
        a = (i - 1) * (rate + step - 1) + rate
        b = i * (rate + step - 1)
        out += list(range(a, b + 1))
    a = m * rate + (m - 1) * (step - 1)
    out += list(range(a, k_s + 1))
    return out

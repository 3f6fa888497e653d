"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorized paths: plain Python loops,
exact rationals, or a forward-only loss probed by central differences.
"""

import math
from fractions import Fraction

import numpy as np


def brute_maxsim(q, c, r_q=None, r_c=None):
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    r_q = len(q) if r_q is None else r_q
    r_c = len(c) if r_c is None else r_c
    total = 0.0
    for i in range(r_q):
        best = -math.inf
        for j in range(r_c):
            dot = 0.0
            for d in range(q.shape[1]):
                dot += float(q[i, d]) * float(c[j, d])
            best = max(best, dot)
        total += best
    return total


def bf16_round(x: float) -> float:
    """Nearest bfloat16 value (8 significant bits, ties to even) via exact rationals."""
    if x == 0:
        return 0.0
    _, e = math.frexp(x)                       # |x| = m * 2**e, 0.5 <= m < 1
    e = max(e, -125)                           # below the normal range the quantum is fixed
    quantum = Fraction(2) ** (e - 8)
    return float(round(Fraction(x) / quantum) * quantum)


def central_difference(f, arrays, h=1e-5):
    """Gradient of scalar f() w.r.t. every entry of the given arrays, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        for ix in np.ndindex(arr.shape):
            x0 = arr[ix]
            arr[ix] = x0 + h
            fp = f()
            arr[ix] = x0 - h
            fm = f()
            arr[ix] = x0
            g[ix] = (fp - fm) / (2 * h)
        out.append(g.ravel())
    return np.concatenate(out)


def direct_infonce(S, hn):
    """Eq.-by-eq. evaluation with math.exp/log on Python floats."""
    B = len(S)
    total = 0.0
    for u in range(B):
        denom = sum(math.exp(S[u][v]) for v in range(B)) + math.exp(hn[u])
        total += -math.log(math.exp(S[u][u]) / denom)
    return total / B


def dcg(rels):
    return sum((2 ** r - 1) / math.log2(i + 2) for i, r in enumerate(rels))

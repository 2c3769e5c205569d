"""Independent reference constructions used by the tests.

Nothing here imports qsdlab: kernels are rebuilt from their verbal
definitions and first-return laws come from dynamic programming.
"""

import numpy as np


def first_return_dp(b, kmax):
    """``f[k]`` = P(first return to the hub at step k) for the spoke walk.

    One step up with probability ``b``, then a down-biased walk (up ``b``,
    down ``1-b``) run until it first steps back; computed by forward
    propagation of the killed walk rather than by a formula.
    """
    a = 1 - b
    f = [0 * b] * (kmax + 1)
    width = kmax + 2
    dist = [0 * b] * width
    dist[1] = b  # height above the hub after the first step
    for k in range(2, kmax + 1):
        new = [0 * b] * width
        for h in range(1, width - 1):
            m = dist[h]
            if not m:
                continue
            if h == 1:
                f[k] += m * a
            else:
                new[h - 1] += m * a
            new[h + 1] += m * b
        dist = new
    return f


def independent_kernel(name, b, window, kmax=200):
    """Dense restriction of model ``name`` to ``window`` (float matrix)."""
    a = 1 - b
    lo, hi = window.lo, window.hi
    if name in ("gr",):
        lo = max(lo, 1)
    if name in ("hub1", "remlife", "age"):
        lo = max(lo, 0)
    states = list(range(lo, hi + 1))
    idx = {s: i for i, s in enumerate(states)}
    P = np.zeros((len(states), len(states)))

    def put(x, y, p):
        if y in idx:
            P[idx[x], idx[y]] += p

    f = first_return_dp(b, kmax) if name in ("remlife", "age") else None
    for x in states:
        if name == "gr":
            put(x, x + 1, b)
            if x > 1:
                put(x, x - 1, a)
        elif name == "hub1":
            put(x, x + 1, b)
            if x > 0:
                put(x, x - 1, a)
        elif name == "hub2":
            if x == 0:
                put(0, 1, b / 2)
                put(0, -1, b / 2)
            else:
                s = 1 if x > 0 else -1
                put(x, x - s, a)
                put(x, x + s, b)
        elif name == "remlife":
            if x == 0:
                for k in range(2, kmax + 1):
                    put(0, k - 1, f[k])
            else:
                put(x, x - 1, 1.0)
        elif name == "age":
            if x == 0:
                put(0, 1, b)
            else:
                alive = b - sum(f[: x + 1])
                r = f[x + 1] / alive
                put(x, 0, r)
                put(x, x + 1, 1 - r)
        else:
            raise ValueError(name)
    return states, P


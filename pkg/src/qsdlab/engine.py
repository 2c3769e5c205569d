"""Repeated application of a kernel: conditional laws, survival ratios,
Green sums and Monte Carlo cross-checks.

All deterministic routines work on a window chosen so that nothing
reachable is cut off, and renormalize at every step while accumulating the
log of the survival probability.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import zeta
from sklearn.base import BaseEstimator

from .chain import Func, Measure, Window, period
from .validation import check_nonnegative_int, check_state

__all__ = [
    "ConditionalLaw",
    "RatioDiagnostics",
    "GreenValue",
    "GreenVector",
    "SimulationResult",
    "HittingResult",
    "conditional_law",
    "conditional_path",
    "law_table",
    "ratio_diagnostics",
    "green",
    "green_row",
    "green_column",
    "simulate_conditional",
    "simulate_hitting",
    "hat_h_estimate",
    "SurvivalRatio",
    "HatHEstimate",
    "max_workers",
]


def max_workers():
    """Thread cap, taken from ``QSDLAB_THREADS`` when set."""
    env = os.environ.get("QSDLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(8, os.cpu_count() or 1)


@dataclass(frozen=True)
class ConditionalLaw:
    start: int
    steps: int
    law: Measure
    log_survival: float

    @property
    def survival(self):
        return math.exp(self.log_survival)

    def prob(self, predicate):
        return self.law.mass_on(predicate)


def conditional_path(kernel, x, n, window=None, margin=2):
    """Yield ``(step, probabilities, log_survival, matrix)`` for steps 0..n.

    The probability vector is indexed by ``matrix.states`` and is reused
    between yields; copy it if it has to outlive the iteration.
    """
    x = check_state(x)
    n = check_nonnegative_int(n, "n")
    if not kernel.contains(x):
        raise ValueError(f"start {x} is not a state of {kernel!r}")
    window = kernel.window_for(x, n, margin) if window is None else window
    km = kernel.matrix(window)
    v = np.zeros(len(km.states))
    v[km.index(x)] = 1.0
    log_s = 0.0
    yield 0, v, log_s, km
    KT = km.KT
    for step in range(1, n + 1):
        v = KT @ v
        s = v.sum()
        if not s > 0:
            raise FloatingPointError(f"survival mass vanished at step {step}")
        v /= s
        log_s += math.log(s)
        yield step, v, log_s, km


def _law(km, v, x, n, log_s):
    keep = v > 0
    return ConditionalLaw(
        start=x,
        steps=n,
        law=Measure(km.states[keep], v[keep] / v[keep].sum(), probability=True),
        log_survival=log_s,
    )


def conditional_law(kernel, x, n, window=None):
    """Law of ``X_n`` given survival to time ``n``, started from ``x``.

    Examples
    --------
    >>> from qsdlab.models import hub_two_spoke
    >>> cl = conditional_law(hub_two_spoke(0.2), 10, 20)
    >>> round(cl.law(0), 2), round(cl.survival, 2)
    (0.38, 0.31)
    """
    for step, v, log_s, km in conditional_path(kernel, x, n, window):
        pass
    return _law(km, v, int(x), int(n), log_s)


def law_table(kernel, x, steps, ys, fh=None):
    """CSV ``n,cond_prob_of[y...],survival`` for each step in ``steps``."""
    steps = sorted(set(int(s) for s in steps))
    ys = [int(y) for y in ys]
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n"] + [f"cond_prob_of[{y}]" for y in ys] + ["survival"])
    wanted = set(steps)
    for step, v, log_s, km in conditional_path(kernel, x, steps[-1]):
        if step in wanted:
            row = []
            for y in ys:
                i = np.searchsorted(km.states, y)
                row.append(repr(float(v[i])) if i < len(v) and km.states[i] == y else "0.0")
            w.writerow([step] + row + [repr(math.exp(log_s))])
    return buf.getvalue() if fh is None else None


@dataclass(frozen=True)
class RatioDiagnostics:
    """Survival ratios ``s_n`` and state ratios ``r_n(y)``.

    ``s[n] = K^{n+1}(x,S)/K^n(x,S)`` for ``n < n_max``; ``r[y][n] =
    K^{n+d}(x,y)/K^n(x,y)`` (NaN where ``K^n(x,y) = 0``).
    """

    start: int
    d: int
    s: np.ndarray
    r: dict
    log_survival: np.ndarray
    rho_est: float

    def rho_at(self, n):
        """Estimate ``(K^n(x,S)/K^{n-d}(x,S))^{1/d}``."""
        return math.exp((self.log_survival[n] - self.log_survival[n - self.d]) / self.d)

    def to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "s_n", "rho_est"])
        for n in range(len(self.s)):
            est = self.rho_at(n + 1) if n + 1 >= self.d else float("nan")
            w.writerow([n, repr(float(self.s[n])), repr(est)])
        return buf.getvalue() if fh is None else None


def ratio_diagnostics(kernel, x, n_max, states=(), d=None):
    """Survival-ratio sequences from ``x`` up to ``n_max`` steps."""
    n_max = check_nonnegative_int(n_max, "n_max", minimum=10)
    x = check_state(x)
    states = [int(y) for y in states]
    log_s = np.zeros(n_max + 1)
    log_k = {y: np.full(n_max + 1, -np.inf) for y in states}
    idx = None
    for step, v, ls, km in conditional_path(kernel, x, n_max):
        if idx is None:
            idx = {y: km.index(y) for y in states}
            if d is None:
                d = period(kernel, km.window, anchor=x).d
        log_s[step] = ls
        for y, i in idx.items():
            if v[i] > 0:
                log_k[y][step] = math.log(v[i]) + ls
    s = np.exp(np.diff(log_s))
    r = {}
    for y, lk in log_k.items():
        with np.errstate(invalid="ignore"):
            diff = lk[d:] - lk[:-d]
        r[y] = np.where(np.isfinite(diff), np.exp(np.where(np.isfinite(diff), diff, 0.0)), np.nan)
    rho = math.exp((log_s[n_max] - log_s[n_max - d]) / d)
    return RatioDiagnostics(x, d, s, r, log_s, rho)


# ----------------------------------------------------------------------
# Green functions


@dataclass(frozen=True)
class GreenValue:
    """Truncated Green sum ``sum_{n<=N} K^n(x,y) z^n`` with a tail estimate."""

    x: int
    y: int
    z: float
    value: float
    tail_estimate: float
    n_terms: int
    boundary_loss: float = 0.0

    @property
    def estimate(self):
        return self.value + self.tail_estimate


@dataclass(frozen=True)
class GreenVector:
    """Green sums from (row) or to (column) a fixed state over a window."""

    fixed: int
    side: str
    z: float
    states: np.ndarray
    partial: np.ndarray
    tail: np.ndarray
    n_terms: int
    boundary_loss: float
    regime: str = field(default="")

    @property
    def estimate(self):
        return self.partial + self.tail

    def index(self, y):
        i = int(np.searchsorted(self.states, y))
        if i >= len(self.states) or self.states[i] != y:
            raise KeyError(f"state {y} outside the Green window")
        return i

    def value(self, y):
        i = self.index(y)
        x, yy = (self.fixed, y) if self.side == "row" else (y, self.fixed)
        return GreenValue(x, yy, self.z, float(self.partial[i]), float(self.tail[i]),
                          self.n_terms, self.boundary_loss)

    def __getitem__(self, y):
        return float(self.estimate[self.index(y)])


def _green_window(kernel, pts, N, radius, side="row"):
    if radius is None:
        radius = int(8 * math.sqrt(N)) + 10
        growth = kernel.meta.get("growth")
        if side == "column" and growth and growth > 1:
            # column values grow like the harmonic function; stay clear of overflow
            radius = min(radius, int(600 / math.log(growth)))
    reach = min(N, radius)
    wins = [kernel.span(p, reach) for p in pts]
    return Window(min(w.lo for w in wins), max(w.hi for w in wins))


def _green_sum(kernel, fixed, z, N, side, window, radius, pts=()):
    z = float(z)
    N = check_nonnegative_int(N, "N", minimum=1)
    if z < 0:
        raise ValueError("z must be nonnegative")
    rho = kernel.meta.get("rho")
    R = None if rho is None else 1.0 / float(rho)
    if R is not None and z > R * (1 + 1e-12):
        raise ValueError(f"z={z} exceeds the convergence radius R={R}; the Green series diverges")
    at_R = R is not None and abs(z - R) <= 1e-12 * R
    if window is None:
        window = _green_window(kernel, [fixed, *pts], N, radius, side)
    km = kernel.matrix(window)
    A = km.KT if side == "row" else km.K
    v = np.zeros(len(km.states))
    v[km.index(fixed)] = 1.0
    total = v.copy()
    watch = np.array([km.index(p) for p in (fixed, *pts) if p in window], dtype=int)
    half = N // 2
    block = np.zeros_like(v)
    prev_quarter = cur_quarter = 0.0
    n_done = N
    for n in range(1, N + 1):
        v = A @ v
        v *= z
        total += v
        if n > half:
            block += v
        m = float(v[watch].max()) if side == "column" else float(v.max())
        if n % max(N // 4, 1) == 0:
            prev_quarter, cur_quarter = cur_quarter, m
            if prev_quarter > 0 and cur_quarter > 1.5 * prev_quarter and n >= N // 2:
                raise ValueError("Green terms are growing; z is beyond the convergence radius")
        ref = float(total[watch].max()) if side == "column" else float(total.max())
        if not at_R and n >= 64 and m <= 1e-17 * ref:
            n_done = n
            break
    tail = np.zeros_like(total)
    if at_R:
        regime = "power"
        # c n^{-3/2} model fitted on the block (N/2, N]
        ns = np.arange(half + 1, N + 1, dtype=float)
        denom = float(np.sum(ns ** -1.5))
        tail = block * (float(zeta(1.5, N + 1)) / denom)
    elif n_done == N:
        regime = "geometric"
        # the last two half-blocks give the decay rate of the terms
        tail = _geometric_tail(kernel, km, fixed, z, N, side, v)
    else:
        regime = "converged"
    # z-weighted mass pushed across the window edge (row sums only)
    loss = z * float(km.leak @ total) if side == "row" else 0.0
    return GreenVector(int(fixed), side, z, km.states.copy(), total, tail, n_done, loss, regime)


def _geometric_tail(kernel, km, fixed, z, N, side, v):
    A = km.KT if side == "row" else km.K
    w = v.copy()
    extra = np.zeros_like(v)
    first = None
    for n in range(1, 2 * max(N // 8, 8) + 1):
        w = z * (A @ w)
        extra += w
        if first is None and n == max(N // 8, 8):
            first = extra.copy()
    second = extra - first
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(first > 0, second / first, 0.0)
    r = np.clip(r, 0.0, 0.999999)
    return first / (1.0 - r)


def green_row(kernel, x, z, N, window=None, radius=None, pts=()):
    """``G_z(x, .)`` on a window: sums of ``z^n K^n(x, .)``.

    At ``z = R`` the terms decay like ``n^{-3/2}`` and the tail beyond ``N``
    is extrapolated from the last half of the computed terms; below ``R`` the
    sum is run until terms are negligible.
    """
    return _green_sum(kernel, check_state(x), z, N, "row", window, radius, pts)


def green_column(kernel, y, z, N, window=None, radius=None, pts=()):
    """``G_z(., y)`` on a window: sums of ``z^n K^n(., y)``."""
    return _green_sum(kernel, check_state(y), z, N, "column", window, radius, pts)


def green(kernel, x, y, z, N, window=None, radius=None):
    """Single Green value ``G_{x,y}(z)`` truncated at ``N`` terms."""
    if z == 0:
        return GreenValue(int(x), int(y), 0.0, float(x == y), 0.0, 0)
    gv = green_row(kernel, x, z, N, window, radius, pts=(y,))
    return gv.value(int(y))


# ----------------------------------------------------------------------
# Monte Carlo


def _sampler(km):
    """Cumulative table so that one ``searchsorted`` samples every row."""
    K = km.K
    rows = np.repeat(np.arange(K.shape[0]), np.diff(K.indptr))
    cum = np.empty_like(K.data)
    for i in range(K.shape[0]):
        a, b = K.indptr[i], K.indptr[i + 1]
        cum[a:b] = np.cumsum(K.data[a:b])
    return rows + cum, K.indptr, K.indices


def _step(rng, cumg, indptr, indices, cur):
    u = rng.random(len(cur))
    pos = np.searchsorted(cumg, cur + u, side="right")
    alive = pos < indptr[cur + 1]
    nxt = np.where(alive, indices[np.minimum(pos, len(indices) - 1)], -1)
    return nxt, alive


@dataclass(frozen=True)
class SimulationResult:
    start: int
    steps: int
    paths: int
    survivors: int
    law: Measure | None
    seed: int

    @property
    def empty(self):
        return self.survivors == 0


def _shards(paths, seed, shard_size):
    n = max(1, math.ceil(paths / shard_size))
    seqs = np.random.SeedSequence(seed).spawn(n)
    sizes = [shard_size] * (n - 1) + [paths - shard_size * (n - 1)]
    return list(zip(seqs, sizes))


def _run_shards(fn, shards):
    workers = min(max_workers(), len(shards))
    if workers <= 1:
        return [fn(s) for s in shards]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, shards))


def simulate_conditional(kernel, x, n, paths, seed=0, shard_size=1 << 16):
    """Empirical law of ``X_n`` among paths alive at time ``n``.

    Each shard draws from its own Philox stream spawned from ``seed``, so the
    result depends only on ``seed``, ``paths`` and ``shard_size``.
    """
    x = check_state(x)
    n = check_nonnegative_int(n, "n")
    paths = check_nonnegative_int(paths, "paths", minimum=1)
    km = kernel.matrix(kernel.window_for(x, n))
    cumg, indptr, indices = _sampler(km)
    i0 = km.index(x)

    def run(shard):
        seq, size = shard
        rng = np.random.Generator(np.random.Philox(seq))
        cur = np.full(size, i0, dtype=np.int64)
        for _ in range(n):
            if cur.size == 0:
                break
            cur, alive = _step(rng, cumg, indptr, indices, cur)
            cur = cur[alive]
        return np.bincount(cur, minlength=len(km.states))

    counts = sum(_run_shards(run, _shards(paths, seed, shard_size)))
    surv = int(counts.sum())
    law = None
    if surv:
        keep = counts > 0
        law = Measure(km.states[keep], counts[keep] / surv, probability=True)
    return SimulationResult(x, n, paths, surv, law, int(seed))


@dataclass(frozen=True)
class HittingResult:
    start: int
    lo: int
    hi: int
    paths: int
    hit_hi: int
    hit_lo: int
    died: int
    unresolved: int

    @property
    def p_hi(self):
        return self.hit_hi / self.paths

    @property
    def stderr(self):
        p = self.p_hi
        return math.sqrt(max(p * (1 - p), 1e-300) / self.paths)


def simulate_hitting(kernel, x, lo, hi, paths, seed=0, max_steps=10_000, shard_size=1 << 16):
    """Run paths from ``x`` until they hit ``lo`` or ``hi``, die, or time out."""
    x, lo, hi = check_state(x), check_state(lo), check_state(hi)
    if not lo < x < hi:
        raise ValueError("need lo < x < hi")
    km = kernel.matrix(Window(lo, hi))
    cumg, indptr, indices = _sampler(km)
    ilo, ihi, i0 = km.index(lo), km.index(hi), km.index(x)

    def run(shard):
        seq, size = shard
        rng = np.random.Generator(np.random.Philox(seq))
        cur = np.full(size, i0, dtype=np.int64)
        up = down = dead = 0
        for _ in range(max_steps):
            if cur.size == 0:
                break
            cur, alive = _step(rng, cumg, indptr, indices, cur)
            dead += int((~alive).sum())
            cur = cur[alive]
            u = cur == ihi
            d = cur == ilo
            up += int(u.sum())
            down += int(d.sum())
            cur = cur[~(u | d)]
        return np.array([up, down, dead, cur.size])

    tot = sum(_run_shards(run, _shards(paths, seed, shard_size)))
    return HittingResult(x, lo, hi, paths, *(int(t) for t in tot))


# ----------------------------------------------------------------------
# survival ratios


@dataclass(frozen=True)
class HatHEstimate:
    """Survival-ratio estimate of the reference harmonic function.

    ``func`` is the plain ratio at ``n`` steps, ``extrapolated`` removes the
    leading ``1/n`` error using the ratio at ``n/2`` steps.
    """

    func: Func
    extrapolated: Func
    converged: bool
    change: float
    n: int


def _ratio_run(kernel, x0, states, n, record):
    window = kernel.window_for(states, n)
    struct = period(kernel, window, anchor=x0)
    bad = [y for y in states if struct.class_of.get(y) != 0]
    if bad:
        raise ValueError(f"states {bad} are not in the cyclic class of {x0}")
    km = kernel.matrix(window)
    v = np.array([1.0 if struct.class_of.get(int(s)) == 0 else 0.0 for s in km.states])
    idx = np.array([km.index(y) for y in states])
    i0 = km.index(x0)
    # States further than the remaining number of steps cannot influence the
    # targets any more; zeroing them keeps the scaled vector finite.
    cone = not kernel.infinite_rows
    lo, hi = states[0], states[-1]
    out = {}
    for step in range(1, n + 1):
        v = km.K @ v
        if cone:
            reach = (n - step) * kernel.max_jump
            v[(km.states < lo - reach) | (km.states > hi + reach)] = 0.0
        top = v.max()
        if not top > 0:
            raise FloatingPointError("survival vector vanished")
        v /= top
        if step in record:
            if not v[i0] > 0:
                raise FloatingPointError(f"survival from {x0} underflowed at step {step}")
            out[step] = v[idx] / v[i0]
    return struct.d, out


def hat_h_estimate(kernel, x0, states, n, tol=1e-3):
    """Survival-ratio estimate ``K^n(y,S_0)/K^n(x0,S_0)`` over ``states``.

    ``S_0`` is the cyclic class of ``x0`` and ``n`` is rounded down to a
    multiple of the period. The convergence flag compares steps ``n`` and
    ``n - d`` against the relative tolerance ``tol``.
    """
    x0 = check_state(x0)
    states = sorted({int(y) for y in states} | {x0})
    n = check_nonnegative_int(n, "n", minimum=2)
    d = period(kernel, kernel.window_for(states, 2), anchor=x0).d
    n -= n % d
    half = max(d, (n // 2) - (n // 2) % d)
    _, out = _ratio_run(kernel, x0, states, n, {half, n - d, n})
    cur, prev = out[n], out[n - d]
    change = float(np.max(np.abs(cur / prev - 1)))
    extra = np.maximum(cur + (cur - out[half]) * (half / (n - half)), 0.0)
    return HatHEstimate(Func(states, cur), Func(states, extra), change < tol, change, n)


class SurvivalRatio(BaseEstimator):
    """Estimator wrapper around :func:`hat_h_estimate`.

    Parameters
    ----------
    n : int
        Number of steps (rounded down to a multiple of the period).
    x0 : int
        Reference state with ``hat_h(x0) = 1``.
    tol : float
        Relative change between the last two periods counted as converged.
    """

    def __init__(self, n=1000, x0=0, tol=1e-3):
        self.n = n
        self.x0 = x0
        self.tol = tol

    def fit(self, kernel, states):
        est = hat_h_estimate(kernel, self.x0, states, self.n, self.tol)
        self.estimate_ = est
        self.hat_h_ = est.func
        self.converged_ = est.converged
        self.change_ = est.change
        return self

    def transform(self, states):
        return np.array([self.hat_h_(int(y)) for y in states])

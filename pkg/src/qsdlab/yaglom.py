"""Periodic Yaglom limits and the objects assembled from them."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator

from .chain import Func, Measure, Window, period
from .engine import conditional_path, max_workers
from .validation import check_nonnegative_int, check_probability_map, check_state

__all__ = [
    "YaglomReport",
    "CrossClassWeights",
    "yaglom_periodic",
    "assemble_periodic",
    "yaglom_many",
    "extend_cross_class",
    "cross_class_weights",
    "periodic_hat_h",
    "constant_rho_check",
    "domain_of_attraction",
    "h_weighted",
    "YaglomLimit",
]


@dataclass(frozen=True)
class YaglomReport:
    """Outcome of a periodic Yaglom computation started from ``start``.

    ``class_limits[k]``, ``rho_k[k]`` and ``c_k[k]`` are indexed by the
    absolute cyclic class ``k`` (class 0 contains the kernel's anchor).
    When ``converged`` is False no limit was detected; ``tv_trace`` and
    ``mean_trace`` then record the oscillation. Both are sampled once per
    period: entry ``i`` belongs to step ``d * (i + 2)``.
    """

    start: int
    d: int
    start_class: int
    rho: float
    rho_k: tuple
    c_k: tuple
    class_limits: tuple
    pi: Measure
    residual: float
    cycle_closure: float
    converged: bool
    n_used: int
    tv_trace: np.ndarray = field(repr=False)
    mean_trace: np.ndarray = field(repr=False)

    @property
    def status(self):
        return "converged" if self.converged else "no Yaglom limit detected"

    def to_dict(self, min_prob=0.0):
        return {
            "x": self.start,
            "d": self.d,
            "rho": self.rho,
            "rho_k": list(self.rho_k),
            "c_k": list(self.c_k),
            "pi": [
                {"state": int(s), "prob": float(p)}
                for s, p in zip(self.pi.states, self.pi.values)
                if p > min_prob
            ],
            "residual": self.residual,
            "cycle_closure": self.cycle_closure,
            "converged": self.converged,
            "status": self.status,
            "n_used": self.n_used,
        }


def _tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def yaglom_periodic(kernel, x, n_max=2000, tol=1e-4, min_iter=50, stop_early=True):
    """Class-wise Yaglom limits from ``x`` assembled into a quasi-stationary law.

    The conditional law is followed along multiples of the period ``d``
    until two successive ``d``-step laws are within ``tol`` in total
    variation (after at least ``min_iter`` periods). The remaining class
    limits follow from ``pi^{k+1} = pi^k K / rho_k`` where ``rho_k`` is the
    one-step survival probability under ``pi^k``.

    Parameters
    ----------
    kernel : Kernel
    x : int
        Start state.
    n_max : int
        Largest number of steps (``n d`` in the periodic indexing).
    tol : float
        Total-variation threshold between successive period laws.
    min_iter : int
        Minimum number of periods before convergence may be declared.
    stop_early : bool
        Stop at the first converged period; otherwise run all ``n_max`` steps.
    """
    x = check_state(x)
    n_max = check_nonnegative_int(n_max, "n_max", minimum=1)
    d = period(kernel, kernel.window_for([x, kernel.anchor], 4), anchor=x).d
    window = kernel.window_for([x, kernel.anchor], n_max + d)
    struct = period(kernel, window, anchor=kernel.anchor)
    if struct.d != d:
        raise ValueError("period changed with the window; the chain looks reducible")
    if x not in struct.class_of:
        raise ValueError(f"start {x} is not reachable from the anchor {kernel.anchor}")
    j0 = struct.class_of[x]
    km = None
    prev = None
    law = None
    tvs, means = [], []
    converged = False
    n_used = 0
    for step, v, _, km_ in conditional_path(kernel, x, n_max, window=window):
        km = km_
        if step == 0 or step % d:
            continue
        if prev is not None:
            tvs.append(_tv(v, prev))
            means.append(float(np.dot(km.states, v)))
            if len(tvs) >= min_iter and tvs[-1] < tol and not converged:
                converged = True
                if stop_early:
                    law, n_used = v.copy(), step
                    break
        prev = v.copy()
        law, n_used = prev, step
    if law is None:
        raise ValueError("n_max is smaller than the period")
    if not stop_early:
        converged = bool(tvs) and len(tvs) >= min_iter and tvs[-1] < tol
    return _assemble(kernel, window, km, struct, law, j0, x, converged, n_used, tvs, means)


def _assemble(kernel, window, km, struct, law, j0, start, converged, n_used, tvs, means):
    d = struct.d
    states = km.states
    limits = [None] * d
    rho_k = [0.0] * d
    cur = law / law.sum()
    for m in range(d):
        k = (j0 + m) % d
        limits[k] = cur
        rho_k[k] = 1.0 - float(cur @ km.exit)
        nxt = km.KT @ cur
        cur = nxt / nxt.sum()
    closure = _tv(cur, limits[j0])
    rho = math.exp(sum(math.log(r) for r in rho_k) / d)
    prods = np.cumprod([1.0] + rho_k[:-1])
    weights = prods / rho ** np.arange(d)
    c = weights / weights.sum()
    pi = sum(c[k] * limits[k] for k in range(d))
    interior = _nn_interior(kernel, window, states)
    resid_vec = km.KT @ pi - rho * pi
    residual = float(np.abs(resid_vec[interior]).max()) if interior.any() else float("nan")

    def meas(vec):
        keep = vec > 0
        return Measure(states[keep], vec[keep] / vec[keep].sum(), probability=True)

    return YaglomReport(
        start=start,
        d=d,
        start_class=j0,
        rho=rho,
        rho_k=tuple(float(r) for r in rho_k),
        c_k=tuple(float(ci) for ci in c),
        class_limits=tuple(meas(lim) for lim in limits),
        pi=meas(pi),
        residual=residual,
        cycle_closure=closure,
        converged=converged,
        n_used=n_used,
        tv_trace=np.asarray(tvs),
        mean_trace=np.asarray(means),
    )


def assemble_periodic(kernel, class_limit, window):
    """Assemble the full quasi-stationary law from one class limit.

    ``class_limit`` is a probability measure carried by a single cyclic
    class; the other classes, ``rho_k`` and ``c_k`` follow by exact algebra.
    ``window`` should leave room around the bulk of ``class_limit``.
    """
    struct = period(kernel, window, anchor=kernel.anchor)
    km = kernel.matrix(window)
    law = class_limit.on(km.states)
    classes = {struct.class_of.get(int(s)) for s, v in zip(km.states, law) if v > 0}
    if len(classes) != 1 or None in classes:
        raise ValueError("class_limit must charge exactly one cyclic class")
    return _assemble(kernel, window, km, struct, law, classes.pop(), None, True, 0, [], [])


def _nn_interior(kernel, window, states):
    """Boolean mask of interior states (cheap path for nearest-neighbour kernels)."""
    if not kernel.infinite_rows and kernel.meta.get("finite") is None and kernel.max_jump == 1:
        lo, hi = window.lo, window.hi
        inner = np.ones(len(states), bool)
        if kernel.lower is None or lo > kernel.lower:
            inner &= states > lo
        if kernel.upper is None or hi < kernel.upper:
            inner &= states < hi
        return inner
    inside = set(window.interior(kernel).tolist())
    return np.array([int(s) in inside for s in states])


def yaglom_many(kernel, starts, **kw):
    """Reports for several start states, computed in parallel threads."""
    starts = [check_state(x) for x in starts]
    # materialize shared rows once so threads only read the caches
    kernel.matrix(kernel.window_for(starts + [kernel.anchor], kw.get("n_max", 2000) + 2))
    workers = min(max_workers(), len(starts))
    if workers <= 1:
        return [yaglom_periodic(kernel, x, **kw) for x in starts]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda x: yaglom_periodic(kernel, x, **kw), starts))


# ----------------------------------------------------------------------
# cross-class extension


@dataclass(frozen=True)
class CrossClassWeights:
    u: int
    j: int
    weights: dict

    def total(self):
        return sum(self.weights.values())


def _guard_finite(kernel, states=()):
    if kernel.infinite_rows:
        raise ValueError(
            "kernel has an infinitely supported row; the cross-class formulas assume "
            "every row is finitely supported"
        )


def _step_row(kernel, u, m):
    """``K^m(u, .)`` as a dict, exact when the kernel is."""
    cur = {u: 1}
    for _ in range(m):
        _guard_finite(kernel, cur)
        nxt = {}
        for s, w in cur.items():
            for y, p in kernel.row(s)[0]:
                nxt[y] = nxt.get(y, 0) + w * p
        cur = nxt
    return cur


def _class_and_period(kernel, u):
    win = kernel.window_for([u, kernel.anchor], 4)
    struct = period(kernel, win, anchor=kernel.anchor)
    return struct.class_of[u], struct.d


def _value(h, x):
    return h(x) if callable(h) else h[x]


def cross_class_weights(kernel, u, hat_h0):
    """Weights ``w_{u,x} ∝ K^{d-j}(u,x) hat_h0(x)`` over class-0 states ``x``."""
    u = check_state(u)
    _guard_finite(kernel, [u])
    j, d = _class_and_period(kernel, u)
    if j == 0:
        raise ValueError(f"state {u} already lies in class 0")
    row = _step_row(kernel, u, d - j)
    raw = {x: p * _value(hat_h0, x) for x, p in sorted(row.items()) if p}
    total = sum(raw.values())
    return CrossClassWeights(u, j, {x: w / total for x, w in raw.items()})


def extend_cross_class(kernel, u, hat_h0, base_limits):
    """Class-0 limit seen from a start ``u`` outside class 0.

    ``base_limits`` maps a class-0 state ``x`` to its class-0 limit
    ``pi^0_x`` (a :class:`Measure`) or is a callable doing so. Returns the
    mixture ``sum_x w_{u,x} pi^0_x`` and the weights.
    """
    w = cross_class_weights(kernel, u, hat_h0)
    parts = []
    for x, wx in w.weights.items():
        lim = base_limits(x) if callable(base_limits) else base_limits[x]
        parts.append((float(wx), lim))
    states = np.unique(np.concatenate([m.states for _, m in parts]))
    vals = sum(wx * m.on(states) for wx, m in parts)
    return Measure(states, vals / vals.sum(), probability=True), w


def periodic_hat_h(kernel, hat_h0, states, rho=None):
    """Extend a class-0 survival ratio to every class.

    ``hat_h(u) = rho^{j-d} sum_x K^{d-j}(u,x) hat_h0(x)`` for ``u`` in class
    ``j != 0``; class-0 states keep ``hat_h0``.
    """
    rho = kernel.meta.get("rho") if rho is None else rho
    if rho is None:
        raise ValueError("rho is unknown for this kernel; pass it explicitly")
    vals = []
    for u in states:
        u = check_state(u)
        _guard_finite(kernel, [u])
        j, d = _class_and_period(kernel, u)
        if j == 0:
            vals.append(float(_value(hat_h0, u)))
            continue
        row = _step_row(kernel, u, d - j)
        s = sum(p * _value(hat_h0, x) for x, p in row.items())
        vals.append(float(s * rho ** (j - d)))
    return Func(list(states), vals)


def constant_rho_check(reports, tol=1e-3):
    """Whether ``rho_k`` is the same for every start; returns ``(ok, deviation)``."""
    reports = list(reports)
    if len(reports) <= 1:
        return True, 0.0
    if len({r.d for r in reports}) != 1:
        raise ValueError("reports come from kernels with different periods")
    arr = np.array([r.rho_k for r in reports])
    dev = float((arr.max(axis=0) - arr.min(axis=0)).max())
    return dev < tol, dev


# ----------------------------------------------------------------------
# domain of attraction


def _exact(v):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, int):
        return Fraction(v)
    return Fraction(repr(float(v)))


def _single_class(states, kernel=None, d=2):
    if kernel is not None:
        win = kernel.window_for(list(states) + [kernel.anchor], 2)
        struct = period(kernel, win, anchor=kernel.anchor)
        classes = {struct.class_of.get(s) for s in states}
    else:
        classes = {s % d for s in states}
    if len(classes) != 1 or None in classes:
        raise ValueError(
            "initial distribution charges more than one cyclic class; mixed support "
            "is not supported"
        )
    return classes.pop()


def domain_of_attraction(phi, family, kernel=None, window=Window(-200, 200)):
    """Limit law attracting the initial distribution ``phi``.

    ``xi = E[X0 / (|X0| + 1)]`` is computed exactly; returns
    ``(xi, sigma_xi)`` with ``sigma_xi`` evaluated on ``window``.

    Examples
    --------
    >>> from fractions import Fraction as F
    >>> from qsdlab.models import closed_forms
    >>> xi, _ = domain_of_attraction({8: F(1, 25), 6: F(8, 25), 4: F(16, 25)}, closed_forms(F(1, 5)))
    >>> xi
    Fraction(6472, 7875)
    """
    phi = check_probability_map({k: _exact(v) for k, v in dict(phi).items()})
    _single_class(phi, kernel)
    xi = sum((m * Fraction(y, abs(y) + 1) for y, m in phi.items()), Fraction(0))
    return xi, family.measure(xi, window)


def h_weighted(phi, hat_h):
    """``phi(y) hat_h(y)`` renormalized, exact when inputs are exact."""
    phi = {int(k): _exact(v) for k, v in dict(phi).items()}
    raw = {y: m * _exact(_value(hat_h, y)) for y, m in phi.items()}
    total = sum(raw.values())
    return {y: w / total for y, w in sorted(raw.items())}


class YaglomLimit(BaseEstimator):
    """Estimator interface to :func:`yaglom_periodic`.

    ``fit(kernel, x)`` stores the report and its main pieces as fitted
    attributes; ``transform(states)`` evaluates the assembled law.
    """

    def __init__(self, n_max=2000, tol=1e-4, min_iter=50, stop_early=True):
        self.n_max = n_max
        self.tol = tol
        self.min_iter = min_iter
        self.stop_early = stop_early

    def fit(self, kernel, x=0):
        rep = yaglom_periodic(kernel, x, n_max=self.n_max, tol=self.tol,
                              min_iter=self.min_iter, stop_early=self.stop_early)
        self.report_ = rep
        self.pi_ = rep.pi
        self.rho_ = rep.rho
        self.rho_k_ = rep.rho_k
        self.c_k_ = rep.c_k
        self.converged_ = rep.converged
        return self

    def transform(self, states):
        return np.array([self.pi_(int(y)) for y in states])

"""Kernels, windows and vectors on integer state spaces.

A :class:`Kernel` is a lazily evaluated substochastic transition operator.
Rows are produced on demand by a row function and cached, so countable
chains are represented without truncation until a :class:`Window` is
materialized into a sparse matrix.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .validation import STRUCTURAL_TOL, as_number, check_state

__all__ = [
    "Kernel",
    "Window",
    "KernelMatrix",
    "Measure",
    "Func",
    "PeriodStructure",
    "ValidationReport",
    "validate",
    "period",
    "apply_measure",
    "apply_func",
]


@dataclass(frozen=True)
class Window:
    """Closed integer interval ``[lo, hi]`` used to truncate a chain."""

    lo: int
    hi: int

    def __post_init__(self):
        object.__setattr__(self, "lo", check_state(self.lo, "lo"))
        object.__setattr__(self, "hi", check_state(self.hi, "hi"))
        if self.lo > self.hi:
            raise ValueError(f"empty window [{self.lo}, {self.hi}]")

    def __contains__(self, x):
        return self.lo <= x <= self.hi

    def __len__(self):
        return self.hi - self.lo + 1

    @classmethod
    def around(cls, x, radius):
        return cls(x - radius, x + radius)

    @classmethod
    def covering(cls, states):
        states = list(states)
        return cls(min(states), max(states))

    def union(self, other):
        return Window(min(self.lo, other.lo), max(self.hi, other.hi))

    def interior(self, kernel):
        """States whose in- and out-neighbourhoods both lie inside the window."""
        inside = []
        for x in kernel.states(self):
            x = int(x)
            if kernel.has_infinite_row(x) and not kernel.row_fits(x, self):
                continue
            if all(y in self for y, _ in kernel.row(x)[0]) and all(
                u in self for u in kernel.column(x)
            ):
                inside.append(x)
        return np.asarray(inside, dtype=np.int64)


@dataclass(frozen=True)
class KernelMatrix:
    """A kernel materialized on a window.

    ``exit`` is the genuine absorption mass of each row and ``leak`` the mass
    sent to states outside the window.
    """

    window: Window
    states: np.ndarray
    K: sp.csr_matrix
    KT: sp.csr_matrix
    exit: np.ndarray
    leak: np.ndarray

    def index(self, x):
        i = int(np.searchsorted(self.states, x))
        if i >= len(self.states) or self.states[i] != x:
            raise KeyError(f"state {x} not in window [{self.window.lo}, {self.window.hi}]")
        return i

    @property
    def killing(self):
        """Probability of dying in one step from each state."""
        return self.exit

    def dense(self):
        return self.K.toarray()


def _sorted_row(entries):
    acc = {}
    for y, p in entries:
        if p:
            acc[int(y)] = acc.get(int(y), 0) + p
    return tuple(sorted(acc.items()))


class Kernel:
    """Substochastic one-step operator on a set of integer states.

    Parameters
    ----------
    row_fn : callable
        ``row_fn(x)`` returns ``(entries, exit)`` where ``entries`` is an
        iterable of ``(y, p)`` pairs and ``exit`` the absorption mass.
    lower, upper : int or None
        Bounds of the state space, ``None`` meaning unbounded.
    member : callable, optional
        Extra predicate restricting the state space inside the bounds.
    max_jump : int
        Largest ``|y - x|`` over the finite rows, used for window sizing.
    column_fn : callable, optional
        ``column_fn(y)`` lists the states ``u`` with ``K(u, y) > 0``.
        Defaults to scanning ``[y - max_jump, y + max_jump]``.
    span_fn : callable, optional
        ``span_fn(x, n)`` bounds the states reachable in ``n`` steps.
    infinite_rows : iterable of int
        States whose true row has infinite support and is stored truncated.
    anchor : int
        Reference state used for absolute cyclic-class labels.
    model, params, meta :
        Descriptive metadata.
    """

    def __init__(
        self,
        row_fn,
        *,
        lower=None,
        upper=None,
        member=None,
        max_jump=1,
        column_fn=None,
        span_fn=None,
        infinite_rows=(),
        anchor=0,
        model="custom",
        params=None,
        meta=None,
    ):
        self._row_fn = row_fn
        self.lower = lower
        self.upper = upper
        self._member = member
        self.max_jump = int(max_jump)
        self._column_fn = column_fn
        self._span_fn = span_fn
        self.infinite_rows = frozenset(int(x) for x in infinite_rows)
        self.anchor = int(anchor)
        self.model = model
        self.params = dict(params or {})
        self.meta = dict(meta or {})
        self._rows = {}
        self._cols = {}
        self._matrices = {}

    def __repr__(self):
        p = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"Kernel(model={self.model!r}{', ' + p if p else ''})"

    # -- state space ---------------------------------------------------
    def contains(self, x):
        if self.lower is not None and x < self.lower:
            return False
        if self.upper is not None and x > self.upper:
            return False
        return self._member is None or bool(self._member(x))

    def states(self, window):
        lo = window.lo if self.lower is None else max(window.lo, self.lower)
        hi = window.hi if self.upper is None else min(window.hi, self.upper)
        if lo > hi:
            return np.zeros(0, dtype=np.int64)
        xs = np.arange(lo, hi + 1, dtype=np.int64)
        if self._member is not None:
            xs = xs[[bool(self._member(int(x))) for x in xs]]
        return xs

    def clip(self, lo, hi):
        if self.lower is not None:
            lo, hi = max(lo, self.lower), max(hi, self.lower)
        if self.upper is not None:
            lo, hi = min(lo, self.upper), min(hi, self.upper)
        return Window(lo, hi)

    def span(self, x, n):
        """Window containing every state reachable from ``x`` in <= n steps."""
        if self._span_fn is not None:
            lo, hi = self._span_fn(x, n)
        else:
            lo, hi = x - n * self.max_jump, x + n * self.max_jump
        return self.clip(lo, hi)

    def window_for(self, starts, n, margin=2):
        """Auto-sized window: reachable span plus ``margin`` further steps."""
        if isinstance(starts, (int, np.integer)):
            starts = [int(starts)]
        wins = [self.span(int(x), n + margin) for x in starts]
        return Window(min(w.lo for w in wins), max(w.hi for w in wins))

    # -- rows and columns ----------------------------------------------
    def row(self, x):
        """Return ``(entries, exit)`` with entries sorted by target state."""
        x = int(x)
        cached = self._rows.get(x)
        if cached is not None:
            return cached
        if not self.contains(x):
            raise KeyError(f"state {x} is outside the state space of {self!r}")
        entries, ex = self._row_fn(x)
        entries = _sorted_row(entries)
        for y, p in entries:
            if p < 0:
                raise ValueError(f"negative entry K({x},{y}) = {p}")
        if ex < 0:
            if ex < -STRUCTURAL_TOL or isinstance(ex, Fraction):
                raise ValueError(f"negative exit mass at state {x}")
            ex = 0.0  # round-off from 1 - sum(row)
        out = (entries, ex)
        self._rows[x] = out
        return out

    def entry(self, x, y):
        for z, p in self.row(x)[0]:
            if z == y:
                return p
        return 0

    def exit_mass(self, x):
        return self.row(x)[1]

    def column(self, y):
        """States ``u`` with ``K(u, y) > 0``."""
        y = int(y)
        cached = self._cols.get(y)
        if cached is not None:
            return cached
        if self._column_fn is not None:
            cands = self._column_fn(y)
        else:
            cands = range(y - self.max_jump, y + self.max_jump + 1)
        out = tuple(
            int(u) for u in cands if self.contains(int(u)) and self.entry(int(u), y) != 0
        )
        self._cols[y] = out
        return out

    def has_infinite_row(self, x):
        return int(x) in self.infinite_rows

    def row_fits(self, x, window):
        entries = self.row(x)[0]
        return not entries or (entries[0][0] in window and entries[-1][0] in window)

    @property
    def is_exact(self):
        """True when rows are stored as exact rationals."""
        return bool(self.meta.get("exact", False))

    # -- materialization -----------------------------------------------
    def matrix(self, window):
        """Materialize the kernel on ``window`` as a :class:`KernelMatrix`."""
        key = (window.lo, window.hi)
        cached = self._matrices.get(key)
        if cached is not None:
            return cached
        states = self.states(window)
        m = len(states)
        lo = int(states[0]) if m else 0
        contiguous = m == 0 or int(states[-1]) - lo + 1 == m
        pos = None if contiguous else {int(s): i for i, s in enumerate(states)}
        indptr = [0]
        indices, data = [], []
        ex = np.zeros(m)
        leak = np.zeros(m)
        for i, x in enumerate(states):
            entries, q = self.row(int(x))
            ex[i] = float(q)
            lost = 0.0
            for y, p in entries:
                if window.lo <= y <= window.hi:
                    j = (y - lo) if contiguous else pos.get(y)
                    if j is not None and 0 <= j < m:
                        indices.append(j)
                        data.append(float(p))
                        continue
                lost += float(p)
            leak[i] = lost
            indptr.append(len(indices))
        K = sp.csr_matrix(
            (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
            shape=(m, m),
        )
        K.sort_indices()
        KT = K.T.tocsr()
        KT.sort_indices()
        km = KernelMatrix(window, states, K, KT, ex, leak)
        self._matrices[key] = km
        return km

    # -- derived kernels -----------------------------------------------
    def power(self, m):
        """The ``m``-step kernel, with exact arithmetic preserved."""
        m = int(m)
        if m < 1:
            raise ValueError("power must be >= 1")
        if m == 1:
            return self
        base = self

        def row_fn(x):
            cur = {x: 1}
            for _ in range(m):
                nxt = {}
                for u, w in cur.items():
                    for y, p in base.row(u)[0]:
                        nxt[y] = nxt.get(y, 0) + w * p
                cur = nxt
            entries = tuple(sorted(cur.items()))
            return entries, 1 - sum(p for _, p in entries)

        span_fn = (lambda x, n: (lambda w: (w.lo, w.hi))(base.span(x, n * m)))
        return Kernel(
            row_fn,
            lower=self.lower,
            upper=self.upper,
            member=self._member,
            max_jump=self.max_jump * m,
            span_fn=span_fn,
            infinite_rows=self.infinite_rows,
            anchor=self.anchor,
            model=f"{self.model}^{m}",
            params=self.params,
            meta={**self.meta, "power": m},
        )

    def restrict(self, predicate, name="restricted"):
        """Restrict to states satisfying ``predicate``; lost mass becomes exit."""
        base = self

        def member(x):
            return base.contains(x) and bool(predicate(x))

        def row_fn(x):
            entries, q = base.row(x)
            kept = tuple((y, p) for y, p in entries if predicate(y))
            dropped = sum((p for y, p in entries if not predicate(y)), 0)
            return kept, q + dropped

        return Kernel(
            row_fn,
            lower=self.lower,
            upper=self.upper,
            member=member,
            max_jump=self.max_jump,
            span_fn=self._span_fn,
            infinite_rows=self.infinite_rows,
            anchor=self.anchor,
            model=f"{self.model}|{name}",
            params=self.params,
            meta=self.meta,
        )

    @classmethod
    def from_rows(cls, rows, exit=None, model="custom", params=None, anchor=None):
        """Finite kernel from ``{x: {y: p}}`` (or lists of pairs) and exit masses.

        Missing exit masses are filled with the row defect.
        """
        table = {}
        for x, entries in rows.items():
            items = entries.items() if isinstance(entries, dict) else entries
            table[int(x)] = _sorted_row((int(y), as_number(p, f"K({x},{y})")) for y, p in items)
        exits = {int(k): as_number(v, "exit") for k, v in (exit or {}).items()}
        states = sorted(table)
        if not states:
            raise ValueError("kernel needs at least one row")
        for x, entries in table.items():
            for y, _ in entries:
                if y not in table:
                    raise ValueError(f"entry K({x},{y}) points outside the listed states")
        stateset = frozenset(states)
        cols = {}
        for x, entries in table.items():
            for y, _ in entries:
                cols.setdefault(y, []).append(x)
        jump = max((abs(y - x) for x, e in table.items() for y, _ in e), default=0)

        def row_fn(x):
            entries = table[x]
            q = exits.get(x)
            if q is None:
                q = 1 - sum((p for _, p in entries), 0)
                q = q if abs(float(q)) > STRUCTURAL_TOL else 0
            return entries, q

        exact = all(isinstance(p, Fraction) for e in table.values() for _, p in e)
        return cls(
            row_fn,
            lower=states[0],
            upper=states[-1],
            member=stateset.__contains__,
            max_jump=max(jump, 1),
            column_fn=lambda y: cols.get(y, ()),
            span_fn=lambda x, n: (states[0], states[-1]),
            anchor=states[0] if anchor is None else anchor,
            model=model,
            params=params,
            meta={"exact": exact, "finite": True},
        )

    # -- serialization -------------------------------------------------
    def to_json(self, window):
        """Rows on ``window``; mass leaving the window is folded into ``exit``."""
        rows = []
        for x in self.states(window):
            entries, q = self.row(int(x))
            inside = [(y, p) for y, p in entries if y in window and self.contains(y)]
            out = sum((p for y, p in entries if not (y in window and self.contains(y))), 0)
            rows.append(
                {
                    "x": int(x),
                    "entries": [[y, _jsonable(p)] for y, p in inside],
                    "exit": _jsonable(q + out),
                }
            )
        return {
            "model": self.model,
            "window": [window.lo, window.hi],
            "params": {k: _jsonable(v) for k, v in self.params.items()},
            "rows": rows,
        }

    def dumps(self, window):
        return json.dumps(self.to_json(window), sort_keys=True)

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, str):
            doc = json.loads(doc)
        try:
            rows = {r["x"]: [(y, p) for y, p in r["entries"]] for r in doc["rows"]}
            exits = {r["x"]: r["exit"] for r in doc["rows"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError("malformed kernel document") from exc
        return cls.from_rows(rows, exits, model=doc.get("model", "custom"), params=doc.get("params"))


def _jsonable(v):
    if isinstance(v, Fraction):
        return float(v) if v.denominator != 1 else int(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# ----------------------------------------------------------------------
# vectors


class _Vector:
    """Shared machinery for measures and functions on a set of states."""

    kind = "vector"

    def __init__(self, states, values):
        states = np.asarray(states, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if states.ndim != 1 or values.shape != states.shape:
            raise ValueError("states and values must be 1-d arrays of equal length")
        if states.size and np.any(np.diff(states) <= 0):
            order = np.argsort(states, kind="stable")
            states, values = states[order], values[order]
            if np.any(np.diff(states) == 0):
                raise ValueError("duplicate states")
        if values.size and (np.any(values < 0) or np.any(np.isnan(values))):
            raise ValueError(f"{self.kind} values must be nonnegative")
        states.setflags(write=False)
        values.setflags(write=False)
        self.states = states
        self.values = values

    @classmethod
    def from_callable(cls, fn, states, **kw):
        states = np.asarray(states, dtype=np.int64)
        return cls(states, [float(fn(int(y))) for y in states], **kw)

    @classmethod
    def from_dict(cls, mapping, **kw):
        items = sorted((int(k), float(v)) for k, v in mapping.items())
        return cls([k for k, _ in items], [v for _, v in items], **kw)

    @property
    def window(self):
        return Window(int(self.states[0]), int(self.states[-1]))

    def __len__(self):
        return len(self.states)

    def __call__(self, y):
        i = np.searchsorted(self.states, y)
        if i < len(self.states) and self.states[i] == y:
            return float(self.values[i])
        return 0.0

    def on(self, states):
        """Values re-indexed onto ``states`` (zero where undefined)."""
        states = np.asarray(states, dtype=np.int64)
        out = np.zeros(len(states))
        if len(self.states) == 0:
            return out
        idx = np.searchsorted(self.states, states)
        idx = np.clip(idx, 0, len(self.states) - 1)
        hit = self.states[idx] == states
        out[hit] = self.values[idx[hit]]
        return out

    def as_dict(self):
        return {int(s): float(v) for s, v in zip(self.states, self.values)}

    def to_csv(self, fh=None):
        """Write ``state,value`` rows; returns the text when ``fh`` is None."""
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "value"])
        for s, v in zip(self.states, self.values):
            w.writerow([int(s), repr(float(v))])
        return buf.getvalue() if fh is None else None

    @classmethod
    def from_csv(cls, fh, **kw):
        if isinstance(fh, str):
            fh = io.StringIO(fh)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["state", "value"]:
            raise ValueError("expected header 'state,value'")
        states, values = [], []
        for row in reader:
            if not row:
                continue
            states.append(int(row[0]))
            values.append(float(row[1]))
        return cls(states, values, **kw)


class Measure(_Vector):
    """Nonnegative row vector.

    ``log_scale`` is the natural log of a global multiplier, so the true
    measure is ``exp(log_scale) * values``.
    """

    kind = "measure"

    def __init__(self, states, values, log_scale=0.0, probability=False):
        super().__init__(states, values)
        self.log_scale = float(log_scale)
        self.probability = bool(probability)
        if self.probability and abs(self.values.sum() - 1.0) > 1e-10:
            raise ValueError(f"probability measure sums to {self.values.sum()!r}")

    def __repr__(self):
        return f"Measure(n={len(self)}, mass={self.total():.6g})"

    def total(self):
        return float(self.values.sum())

    def normalized(self):
        s = self.total()
        if s <= 0:
            raise ValueError("cannot normalize a zero measure")
        return Measure(self.states, self.values / s, probability=True)

    def mass_on(self, predicate):
        mask = np.fromiter((bool(predicate(int(s))) for s in self.states), bool, len(self.states))
        return float(self.values[mask].sum())

    def mean(self):
        return float(np.dot(self.states, self.values) / self.values.sum())

    def tv(self, other):
        """Total-variation distance between the normalized measures."""
        states = np.union1d(self.states, other.states)
        p = self.on(states)
        q = other.on(states)
        return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


class Func(_Vector):
    """Nonnegative column vector."""

    kind = "function"

    def __repr__(self):
        return f"Func(n={len(self)})"


@dataclass(frozen=True)
class PeriodStructure:
    d: int
    class_of: dict = field(repr=False)
    anchor: int = 0

    def cls(self, x):
        return self.class_of[int(x)]

    def members(self, k):
        return sorted(x for x, c in self.class_of.items() if c == k % self.d)


@dataclass(frozen=True)
class ValidationReport:
    window: Window
    n_states: int
    max_defect: float
    substochastic: bool
    irreducible: bool
    exit_states: tuple
    n_components: int
    boundary_leak: float

    def to_dict(self):
        return {
            "window": [self.window.lo, self.window.hi],
            "n_states": self.n_states,
            "max_defect": self.max_defect,
            "substochastic": self.substochastic,
            "irreducible": self.irreducible,
            "exit_states": list(self.exit_states),
            "n_components": self.n_components,
            "boundary_leak": self.boundary_leak,
        }


def validate(kernel, window):
    """Structural checks of ``kernel`` on ``window``.

    Raises
    ------
    ValueError
        On negative entries or a row whose total mass exceeds one.
    """
    states = kernel.states(window)
    if len(states) == 0:
        raise ValueError("window contains no states")
    worst = 0.0
    exits = []
    for x in states:
        entries, q = kernel.row(int(x))
        if any(p < 0 for _, p in entries) or q < 0:
            raise ValueError(f"negative entry in row {int(x)}")
        mass = sum((p for _, p in entries), 0)
        if float(mass) > 1 + STRUCTURAL_TOL:
            raise ValueError(f"row {int(x)} has mass {float(mass)!r} > 1")
        worst = max(worst, abs(float(mass + q) - 1.0))
        if q > 0:
            exits.append(int(x))
    km = kernel.matrix(window)
    ncomp, _ = connected_components(km.K, directed=True, connection="strong")
    return ValidationReport(
        window=window,
        n_states=len(states),
        max_defect=worst,
        substochastic=worst <= STRUCTURAL_TOL,
        irreducible=ncomp == 1,
        exit_states=tuple(exits),
        n_components=int(ncomp),
        boundary_leak=float(km.leak.max()) if len(km.leak) else 0.0,
    )


def period(kernel, window, anchor=None):
    """Period and cyclic classes found by breadth-first labelling.

    Classes are labelled by distance from ``anchor`` modulo the period, so
    the class of a state does not depend on where a computation started.
    """
    anchor = kernel.anchor if anchor is None else int(anchor)
    if anchor not in window or not kernel.contains(anchor):
        raise ValueError(f"anchor {anchor} is not a state of the window")
    km = kernel.matrix(window)
    K = km.K
    a = km.index(anchor)
    dist = np.full(len(km.states), -1, dtype=np.int64)
    dist[a] = 0
    frontier = [a]
    while frontier:
        nxt = []
        for i in frontier:
            for j in K.indices[K.indptr[i] : K.indptr[i + 1]]:
                if dist[j] < 0:
                    dist[j] = dist[i] + 1
                    nxt.append(j)
        frontier = nxt
    g = 0
    for i in np.flatnonzero(dist >= 0):
        for j in K.indices[K.indptr[i] : K.indptr[i + 1]]:
            g = math.gcd(g, int(abs(dist[i] + 1 - dist[j])))
    if g == 0:
        raise ValueError("no cycle through the anchor inside the window; chain looks reducible")
    class_of = {int(km.states[i]): int(dist[i] % g) for i in np.flatnonzero(dist >= 0)}
    return PeriodStructure(d=g, class_of=class_of, anchor=anchor)


def _aligned(vec, kernel):
    win = vec.window
    km = kernel.matrix(win)
    v = vec.on(km.states)
    return km, v


def apply_measure(mu, kernel, return_loss=False):
    """Left action ``mu K`` on the window spanned by ``mu``.

    Mass sent outside the window or to the cemetery is dropped; with
    ``return_loss`` the dropped amounts ``(exit, boundary)`` are returned too.
    """
    if len(mu) == 0:
        return (mu, (0.0, 0.0)) if return_loss else mu
    km, v = _aligned(mu, kernel)
    out = Measure(km.states, km.KT @ v, log_scale=mu.log_scale)
    if return_loss:
        return out, (float(v @ km.exit), float(v @ km.leak))
    return out


def apply_func(kernel, h):
    """Right action ``K h`` on the window spanned by ``h``."""
    if len(h) == 0:
        return h
    km, v = _aligned(h, kernel)
    return Func(km.states, km.K @ v)

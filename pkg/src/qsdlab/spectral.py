"""Eigen-object checks, reversibility, twists and reversals, escape
probabilities, transfer identities and Martin kernels."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .chain import Func, Kernel, Measure, Window
from .engine import green_column, green_row
from .models import FirstReturnSeries, params_of
from .validation import SPECTRAL_TOL, STRUCTURAL_TOL, check_state

__all__ = [
    "EigenCheck",
    "eigen_check",
    "KolmogorovResult",
    "kolmogorov_check",
    "reversibility_measure",
    "TransformedKernel",
    "twist",
    "reverse",
    "LadderScale",
    "escape_probability",
    "transfer_hitting",
    "transfer_hitting_twisted",
    "check_same_t",
    "green_via_twist",
    "green_via_reversal",
    "MartinKernelTable",
    "martin_kernel",
    "remaining_lifetime_exit_kernel",
]


# ----------------------------------------------------------------------
# eigen checks


@dataclass(frozen=True)
class EigenCheck:
    """Residual of ``sigma K = t sigma`` or ``K h = t h`` on interior states.

    ``ratios`` holds ``(obj K)(y) / (t obj(y))`` (or ``(K h)/(t h)``) for
    each interior state, so a value below one flags strict super-harmonicity.
    """

    kind: str
    t: float
    residual: float
    normalized_residual: float
    states: np.ndarray = field(repr=False)
    ratios: np.ndarray = field(repr=False)

    def ratio(self, y):
        i = int(np.searchsorted(self.states, y))
        if i >= len(self.states) or self.states[i] != y:
            raise KeyError(f"state {y} is not interior")
        return float(self.ratios[i])

    def to_dict(self):
        return {"kind": self.kind, "t": self.t, "residual": self.residual,
                "normalized_residual": self.normalized_residual,
                "n_interior": int(len(self.states))}


def eigen_check(kernel, obj, t, tail_ratio=None):
    """Residual of an eigen-equation over the interior of ``obj``'s window.

    Parameters
    ----------
    kernel : Kernel
    obj : Measure or Func
    t : float
        Candidate eigenvalue.
    tail_ratio : float, optional
        For functions only: if ``obj`` continues geometrically with ratio
        ``tail_ratio`` beyond its window, the part of a truncated infinite
        row that was cut off is added back in closed form.
    """
    if not isinstance(obj, (Measure, Func)):
        raise TypeError("obj must be a Measure or a Func")
    t = float(t)
    window = obj.window
    km = kernel.matrix(window)
    v = obj.on(km.states)
    interior = window.interior(kernel)
    idx = np.searchsorted(km.states, interior)
    if isinstance(obj, Measure):
        kind = "measure"
        image = km.KT @ v
    else:
        kind = "function"
        image = km.K @ v
        if tail_ratio is not None:
            row_tail = kernel.meta.get("row_tail")
            for x in kernel.infinite_rows:
                if row_tail is not None and x in window:
                    last = int(km.states[-1])
                    scale = v[-1] / float(tail_ratio) ** last
                    image[km.index(x)] += scale * row_tail(x, float(tail_ratio))
    res = np.abs(image[idx] - t * v[idx])
    base = t * v[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(base > 0, image[idx] / base, np.nan)
        rel = np.where(base > 0, res / base, np.where(res > 0, np.inf, 0.0))
    return EigenCheck(
        kind=kind,
        t=t,
        residual=float(res.max()) if len(res) else 0.0,
        normalized_residual=float(rel.max()) if len(rel) else 0.0,
        states=interior,
        ratios=ratios,
    )


# ----------------------------------------------------------------------
# reversibility


@dataclass(frozen=True)
class KolmogorovResult:
    reversible: bool
    worst_ratio: float
    n_cycles: int
    asymmetric_edge: tuple | None = None


def _edges(kernel, window):
    states = [int(s) for s in kernel.states(window)]
    adj = {}
    for x in states:
        adj[x] = [(y, p) for y, p in kernel.row(x)[0] if y in window and kernel.contains(y)]
    return states, adj


def kolmogorov_check(kernel, window, max_cycle_len=6, tol=1e-12):
    """Kolmogorov's cycle criterion on the window-restricted graph.

    Every simple cycle of length ``<= max_cycle_len`` is enumerated once
    (from its smallest state) and the forward and backward products are
    compared. A one-way edge fails immediately.
    """
    if max_cycle_len < 3:
        raise ValueError("max_cycle_len must be >= 3")
    states, adj = _edges(kernel, window)
    w = {x: dict(a) for x, a in adj.items()}
    for x, nbrs in w.items():
        for y in nbrs:
            if w.get(y, {}).get(x, 0) == 0:
                return KolmogorovResult(False, math.inf, 0, (x, y))
    worst = 0.0
    count = 0
    for s in states:
        stack = [(s, [s])]
        while stack:
            v, path = stack.pop()
            for y in w[v]:
                if y == s and len(path) >= 3:
                    fwd = bwd = 1.0
                    cyc = path + [s]
                    for i in range(len(cyc) - 1):
                        fwd *= float(w[cyc[i]][cyc[i + 1]])
                        bwd *= float(w[cyc[i + 1]][cyc[i]])
                    count += 1
                    worst = max(worst, abs(fwd / bwd - 1.0))
                elif y > s and y not in path and len(path) < max_cycle_len:
                    stack.append((y, path + [y]))
    return KolmogorovResult(worst <= tol, worst, count)


def reversibility_measure(kernel, ref, window, gamma_ref=1, tol=STRUCTURAL_TOL):
    """Positive ``gamma`` with ``gamma(x)K(x,y) = gamma(y)K(y,x)`` on the window.

    Built along a breadth-first spanning tree from ``ref``; detailed balance
    is then checked on every edge (exactly when the kernel is exact).
    """
    ref = check_state(ref)
    states, adj = _edges(kernel, window)
    gam = {ref: gamma_ref}
    queue = deque([ref])
    while queue:
        x = queue.popleft()
        for y, p in adj[x]:
            if y not in gam:
                back = kernel.entry(y, x)
                if back == 0:
                    raise ValueError(f"edge {x}->{y} has no reverse; kernel is not reversible")
                gam[y] = gam[x] * p / back
                queue.append(y)
    worst = 0.0
    for x, nbrs in adj.items():
        if x not in gam:
            continue
        for y, p in nbrs:
            lhs, rhs = gam[x] * p, gam[y] * kernel.entry(y, x)
            worst = max(worst, abs(float(lhs - rhs)) / max(abs(float(lhs)), 1e-300))
    if worst > tol:
        raise ValueError(f"detailed balance fails (relative defect {worst:.3g})")
    xs = sorted(gam)
    out = Measure(xs, [float(gam[x]) for x in xs])
    out.exact_values = gam
    out.balance_defect = worst
    return out


# ----------------------------------------------------------------------
# transforms


class TransformedKernel(Kernel):
    """Twist or time reversal of a base kernel; see :func:`twist`, :func:`reverse`."""

    def __init__(self, row_fn, base, kind, generator, t, **kw):
        super().__init__(
            row_fn,
            lower=base.lower,
            upper=base.upper,
            member=base._member,
            max_jump=base.max_jump,
            span_fn=base._span_fn,
            anchor=base.anchor,
            model=f"{kind}({base.model})",
            params=base.params,
            meta={"exact": base.is_exact, **kw},
        )
        self.base = base
        self.kind = kind
        self.generator = generator
        self.t = t

    def max_row_defect(self, states):
        """Largest ``|row sum - 1|`` over ``states``."""
        worst = 0.0
        for x in states:
            entries, _ = self.row(int(x))
            worst = max(worst, abs(float(sum(p for _, p in entries)) - 1.0))
        return worst


def _callable(g):
    return g if callable(g) else (lambda y: g(y))


def _ratio_fn(g, ratio, name):
    if ratio is not None:
        return ratio
    gf = _callable(g)

    def r(x, y):
        gx = gf(x)
        if not gx > 0:
            raise ValueError(f"{name} vanishes at state {x}")
        return gf(y) / gx

    return r


def twist(kernel, h, t, ratio=None):
    """Doob transform ``K(x,y) h(y) / (t h(x))``.

    ``h`` is a callable (or :class:`Func`) that is ``t``-harmonic and
    positive; exact inputs give exact rows. ``ratio(x, y) = h(y)/h(x)``
    may be supplied when ``h`` itself overflows far out.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    r = _ratio_fn(h, ratio, "h")

    def row(x):
        entries = tuple((y, p * r(x, y) / t) for y, p in kernel.row(x)[0])
        return entries, max(0, 1 - sum(p for _, p in entries))

    return TransformedKernel(row, kernel, "twist", h, t)


def reverse(kernel, sigma, t, ratio=None):
    """Time reversal ``sigma(u) K(u,x) / (t sigma(x))``.

    ``ratio(x, u) = sigma(u)/sigma(x)`` plays the same role as in :func:`twist`.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    r = _ratio_fn(sigma, ratio, "sigma")

    def row(x):
        entries = tuple(
            (u, r(x, u) * kernel.entry(u, x) / t) for u in kernel.column(x)
        )
        return entries, max(0, 1 - sum(p for _, p in entries))

    return TransformedKernel(row, kernel, "reversal", sigma, t)


# ----------------------------------------------------------------------
# escape probabilities


class LadderScale:
    """Scale function of a stochastic nearest-neighbour walk on the integers.

    With ``p(i) = K(i,i+1)`` and ``q(i) = K(i,i-1)`` the increments are
    ``D(y) = prod q(i)/p(i)``, accumulated as logarithms. Infinite sums are
    taken from partial sums at ``Y0 * 2^k`` and Richardson-extrapolated in
    ``1/Y``, which removes the polynomial tails of the transforms of
    interest. A side whose partial sums keep growing is declared divergent.
    """

    def __init__(self, kernel, Y0=64, levels=8, center=0):
        self.kernel = kernel
        self.Y0 = int(Y0)
        self.levels = int(levels)
        self.center = int(center)
        Ymax = self.Y0 * 2 ** self.levels
        self.lo, self.hi = self.center - Ymax, self.center + Ymax
        ys = np.arange(self.lo, self.hi + 1)
        logr = np.empty(len(ys))
        for i, y in enumerate(ys):
            p = float(kernel.entry(int(y), int(y) + 1))
            q = float(kernel.entry(int(y), int(y) - 1))
            if p <= 0 or q <= 0:
                raise ValueError(f"state {int(y)} does not move both ways")
            logr[i] = math.log(q) - math.log(p)
        c = self.center - self.lo
        # log D(y) with D(center) = 1; D(y)/D(y-1) = q(y)/p(y)
        logD = np.empty(len(ys))
        logD[c] = 0.0
        logD[c + 1:] = np.cumsum(logr[c + 1:])
        logD[:c] = -np.cumsum(logr[1:c + 1][::-1])[::-1]
        self.ys = ys
        self.logD = logD
        self.plus = self._side(+1)
        self.minus = self._side(-1)
        if self.plus[0] == "divergent" and self.minus[0] == "divergent":
            raise ValueError("walk looks recurrent: the scale diverges in both directions")

    def _side(self, sign):
        c = self.center - self.lo
        if sign > 0:
            logs = self.logD[c:]
        else:
            logs = self.logD[:c][::-1]
        if logs.max() - logs[0] > 600:
            return ("divergent", math.inf, None)
        lim = [self.Y0 * 2 ** k for k in range(self.levels + 1)]
        part = [logsumexp(logs[: min(L, len(logs))]) for L in lim]
        vals = np.exp(np.asarray(part))
        inc = np.diff(vals)
        if inc[-1] > 1e-15 * vals[-1] and inc[-2] > 0 and inc[-1] / inc[-2] >= 0.75:
            return ("divergent", math.inf, None)
        table = list(vals)
        for j in range(1, len(table)):
            table = [(2 ** j * table[i + 1] - table[i]) / (2 ** j - 1)
                     for i in range(len(table) - 1)]
        return ("convergent", float(table[-1]), vals)

    def _D(self, y):
        return math.exp(self.logD[y - self.lo])

    def _partial(self, a, b):
        """sum_{y=a}^{b-1} D(y)."""
        if b <= a:
            return 0.0
        return float(np.exp(self.logD[a - self.lo:b - self.lo]).sum())

    def side_sums(self, x):
        """``(sum_{y<x} D(y), sum_{y>=x} D(y))``, possibly infinite."""
        x = check_state(x)
        c = self.center
        plus_total, minus_total = self.plus[1], self.minus[1]
        if x >= c:
            below = minus_total + self._partial(c, x)
            above = plus_total - self._partial(c, x)
        else:
            below = minus_total - self._partial(x, c)
            above = plus_total + self._partial(x, c)
        return below, above

    def escape(self, x):
        """Probability of drifting to ``+inf`` from ``x``."""
        below, above = self.side_sums(x)
        if math.isinf(below):
            return 1.0
        if math.isinf(above):
            return 0.0
        return below / (below + above)

    def exit_upper(self, x, lo, hi):
        """Probability of reaching ``hi`` before ``lo`` from ``x``."""
        return self._partial(lo, x) / self._partial(lo, hi)

    def hitting(self, x, y):
        """Probability of ever visiting ``y`` from ``x``."""
        if x == y:
            return 1.0
        if y > x:
            below_x, _ = self.side_sums(x)
            below_y, _ = self.side_sums(y)
            return 1.0 if math.isinf(below_y) else below_x / below_y
        _, above_x = self.side_sums(x)
        _, above_y = self.side_sums(y)
        return 1.0 if math.isinf(above_y) else above_x / above_y

    def green(self, x, y):
        """Expected number of visits to ``y`` from ``x``."""
        k = self.kernel
        ret = (float(k.entry(y, y))
               + float(k.entry(y, y + 1)) * self.hitting(y + 1, y)
               + float(k.entry(y, y - 1)) * self.hitting(y - 1, y))
        if ret >= 1:
            raise ValueError("state is recurrent")
        return self.hitting(x, y) / (1.0 - ret)


def escape_probability(kernel, x, **kw):
    """Probability that a transient nearest-neighbour walk drifts to ``+inf``."""
    return LadderScale(kernel, **kw).escape(x)


def _same_t(t, t_star):
    if t is not None and t_star is not None:
        check_same_t(t, t_star)


def transfer_hitting(F_star, x, y, sigma, sigma_star, t=None, t_star=None):
    """Move a reversed hitting probability from ``sigma_star`` to ``sigma``.

    Both measures must be invariant for the same ``t``; pass ``t`` and
    ``t_star`` to have that checked.
    """
    _same_t(t, t_star)
    return sigma(y) * sigma_star(x) / (sigma_star(y) * sigma(x)) * F_star


def transfer_hitting_twisted(F_star, x, y, h, h_star, t=None, t_star=None):
    """Same for twisted hitting probabilities, from ``h_star`` to ``h``."""
    _same_t(t, t_star)
    return F_star * h_star(x) / h(x) * h(y) / h_star(y)


def green_via_twist(G_tilde, x, y, h_star, t=None, t_star=None):
    """``G(x,y) = G~(x,y) h*(x)/h*(y)`` for the twist by ``h*``.

    Follows from ``K~^n(x,y) = K^n(x,y) h*(y) / (t^n h*(x))``.
    """
    _same_t(t, t_star)
    return G_tilde * h_star(x) / h_star(y)


def green_via_reversal(G_rev_yx, x, y, sigma_star, t=None, t_star=None):
    """``G(x,y) = (sigma*(y)/sigma*(x)) G<-(y,x)`` for the reversal by ``sigma*``."""
    _same_t(t, t_star)
    return sigma_star(y) / sigma_star(x) * G_rev_yx


def check_same_t(t1, t2):
    if abs(float(t1) - float(t2)) > SPECTRAL_TOL * max(1.0, abs(float(t1))):
        raise ValueError(f"eigenvalue mismatch: {t1} vs {t2}")


# ----------------------------------------------------------------------
# Martin kernels


@dataclass(frozen=True)
class MartinKernelTable:
    """Martin kernel values on ``xs x ys`` with optional closed-form comparator."""

    t: float
    kind: str
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    comparator: np.ndarray
    N: int
    meta: dict = field(default_factory=dict)

    def value(self, x, y):
        return float(self.values[list(self.xs).index(x), list(self.ys).index(y)])

    @property
    def abs_err(self):
        return np.abs(self.values - self.comparator)

    def to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "value", "comparator", "abs_err"])
        for i, x in enumerate(self.xs):
            for j, y in enumerate(self.ys):
                w.writerow([int(x), int(y), repr(float(self.values[i, j])),
                            repr(float(self.comparator[i, j])),
                            repr(float(self.abs_err[i, j]))])
        return buf.getvalue() if fh is None else None


def martin_kernel(kernel, t, kind, xs, ys, N=100_000, comparator=None, ref=0, radius=None):
    """Martin entrance or exit kernel from truncated Green sums.

    ``kind="entrance"`` gives ``G_t(x,y)/G_t(x,ref)`` and ``kind="exit"``
    gives ``G_t(x,y)/G_t(ref,y)``. ``comparator(x, y)`` fills the reference
    column of the table.
    """
    rho = kernel.meta.get("rho")
    if rho is not None and float(t) < float(rho) * (1 - 1e-12):
        raise ValueError(f"t={t} is below rho={rho}")
    xs = np.asarray([check_state(x) for x in xs])
    ys = np.asarray([check_state(y) for y in ys])
    z = 1.0 / float(t)
    vals = np.empty((len(xs), len(ys)))
    losses, regimes = [], set()
    if kind == "entrance":
        for i, x in enumerate(xs):
            g = green_row(kernel, int(x), z, N, radius=radius, pts=[ref, *ys.tolist()])
            vals[i] = [g[int(y)] / g[ref] for y in ys]
            losses.append(g.boundary_loss)
            regimes.add(g.regime)
    elif kind == "exit":
        for j, y in enumerate(ys):
            g = green_column(kernel, int(y), z, N, radius=radius, pts=[ref, *xs.tolist()])
            vals[:, j] = [g[int(x)] / g[ref] for x in xs]
            regimes.add(g.regime)
    else:
        raise ValueError("kind must be 'entrance' or 'exit'")
    comp = np.full_like(vals, np.nan)
    if comparator is not None:
        comp = np.array([[float(comparator(int(x), int(y))) for y in ys] for x in xs])
    return MartinKernelTable(float(t), kind, xs, ys, vals, comp, int(N),
                             {"boundary_loss": max(losses, default=0.0),
                              "regimes": sorted(regimes)})


def remaining_lifetime_exit_kernel(params, N=10_000):
    """Closed-form exit kernel ``M*(x,y)`` of the remaining-lifetime chain at ``rho``.

    With ``Ft_y = sum_{k>y} f_k R^k`` the twisted chain started at 0 makes a
    geometric number of excursions, each of which visits ``y >= 1`` with
    probability ``Ft_y / F(R) = 2 Ft_y``; hence ``G~(0,y) = 2 Ft_y`` and
    ``M*(x,y) = R^x (1{x>=y>0} + 2 Ft_y) / (2 Ft_y)``.
    """
    p = params_of(params)
    series = FirstReturnSeries(p, N)
    R = float(p.R)

    def m(x, y):
        if y == 0:
            return R ** x
        g0 = 2.0 * series.tail(R, y)
        return R ** x * ((1.0 if x >= y > 0 else 0.0) + g0) / g0

    return m

"""The walks on the integers and their closed-form spectral objects.

Five kernels are built here:

``gr``       gambler's ruin on {1, 2, ...}, killed with probability ``a`` at 1
``hub1``     the same walk relabelled to {0, 1, ...}
``hub2``     two spokes glued at a hub 0 which kills with probability ``a``
``remlife``  remaining lifetime of the return time to the hub
``age``      age (time since last visit) of the same renewal process

All share ``0 < b < 1/2``, ``a = 1 - b``, ``rho = 2 sqrt(ab)`` and
``R = 1/rho``. When ``b`` is given as a :class:`~fractions.Fraction` and the
relevant square roots are rational (``b = 1/5`` for instance) the nearest
neighbour kernels and closed forms are exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import mpmath
import numpy as np
from scipy.special import gammaln, hyp2f1

from .chain import Func, Kernel, Measure, Window
from .validation import as_number, check_b, check_nonnegative_int, check_state, check_xi

MODEL_NAMES = ("gr", "hub1", "hub2", "remlife", "age")
DEFAULT_N = 10_000
# row-0 entries of the remaining-lifetime chain below this are dropped
_UNDERFLOW = 1e-300


def _sqrt(q):
    """Square root, exact for perfect-square rationals."""
    if isinstance(q, Fraction):
        n, d = q.numerator, q.denominator
        rn, rd = math.isqrt(n), math.isqrt(d)
        if rn * rn == n and rd * rd == d:
            return Fraction(rn, rd)
        return math.sqrt(float(q))
    return math.sqrt(q)


def _num(v):
    """Keep Fractions, coerce everything else to float."""
    return v if isinstance(v, Fraction) else float(v)


@dataclass(frozen=True)
class ModelParams:
    """Parameter ``b`` of the walks together with derived constants."""

    b: object

    def __post_init__(self):
        object.__setattr__(self, "b", check_b(self.b))

    @property
    def exact(self):
        return isinstance(self.rho, Fraction)

    @property
    def a(self):
        return 1 - self.b

    @property
    def rho(self):
        r = 2 * _sqrt(self.a * self.b)
        return r if isinstance(r, Fraction) else float(r)

    @property
    def R(self):
        return 1 / self.rho

    @property
    def down(self):
        """``sqrt(b/a)``, the geometric decay rate of the invariant measures."""
        return _num(_sqrt(self.b / self.a))

    @property
    def up(self):
        """``sqrt(a/b)``, the growth rate of the harmonic functions."""
        return _num(_sqrt(self.a / self.b))

    def as_dict(self):
        return {"b": self.b}


def params_of(b):
    return b if isinstance(b, ModelParams) else ModelParams(b)


# ----------------------------------------------------------------------
# first-return series


class FirstReturnSeries:
    """Coefficients of ``F(z) = (1 - sqrt(1 - 4ab z^2)) / 2``.

    ``f_{2k} = C_{k-1} (ab)^k`` with ``C`` the Catalan numbers; odd
    coefficients vanish. Coefficients are held as logarithms, built from the
    ratio ``C_k / C_{k-1} = 2(2k-1)/(k+1)``, so nothing underflows.

    Parameters
    ----------
    params : ModelParams or number
    N : int
        Largest index kept.
    """

    def __init__(self, params, N=DEFAULT_N):
        self.params = params_of(params)
        self.N = check_nonnegative_int(N, "N", minimum=2)
        K = self.N // 2
        m = np.arange(1, max(K, 1), dtype=float)
        logC = np.concatenate([[0.0], np.cumsum(np.log(2.0 * (2.0 * m - 1.0) / (m + 1.0)))])[:K]
        k = np.arange(1, K + 1, dtype=float)
        log_f = np.full(self.N + 1, -np.inf)
        log_f[2 : 2 * K + 1 : 2] = logC + k * math.log(float(self.params.a * self.params.b))
        log_f.setflags(write=False)
        self.log_f = log_f

    @cached_property
    def coefficients(self):
        f = np.exp(self.log_f)
        f.setflags(write=False)
        return f

    def __getitem__(self, n):
        return float(self.coefficients[n]) if 0 <= n <= self.N else math.exp(self.log_term(n))

    def log_term(self, n):
        """``log f_n`` for any ``n`` (``-inf`` when ``f_n = 0``)."""
        if n < 2 or n % 2:
            return -math.inf
        k = n // 2
        return float(gammaln(2 * k - 1) - gammaln(k) - gammaln(k + 1)) + k * math.log(
            float(self.params.a * self.params.b)
        )

    def exact(self, n):
        """``f_n`` as a Fraction (requires a rational ``b``)."""
        b = self.params.b
        if not isinstance(b, Fraction):
            b = Fraction(b)
        if n < 2 or n % 2:
            return Fraction(0)
        k = n // 2
        catalan = math.comb(2 * k - 2, k - 1) // k
        return catalan * ((1 - b) * b) ** k

    def check_catalan(self, k_max=30):
        """Largest relative deviation from exact rationals for ``k <= k_max``."""
        worst = 0.0
        for k in range(1, min(k_max, self.N // 2) + 1):
            ref = float(self.exact(2 * k))
            worst = max(worst, abs(self.coefficients[2 * k] - ref) / ref)
        return worst

    def tail(self, z=1.0, n=None):
        """``sum_{k > n} f_k z^k`` evaluated in closed form.

        Consecutive terms have ratio ``(k - 1/2)/(k + 1) * 4ab z^2`` so the
        tail is a Gauss hypergeometric series; at ``z = R`` it is summed
        with Gauss's theorem.
        """
        n = self.N if n is None else int(n)
        w = 4.0 * float(self.params.a * self.params.b) * float(z) ** 2
        if w > 1 + 1e-12:
            raise ValueError(f"z={z} lies outside the disc of convergence")
        w = min(w, 1.0)
        K = max(n // 2, 0)
        first = self.log_term(2 * K + 2) + (2 * K + 2) * math.log(float(z))
        return math.exp(first) * _gauss_tail(K, w)

    def partial(self, z=1.0, n=None):
        n = self.N if n is None else int(n)
        idx = np.arange(min(n, self.N) + 1)
        lf = self.log_f[idx] + idx * math.log(float(z))
        return float(np.exp(lf[np.isfinite(lf)]).sum())

    def value(self, z=1.0):
        """Closed form ``F(z)``."""
        w = 4.0 * float(self.params.a * self.params.b) * float(z) ** 2
        return (1.0 - math.sqrt(max(1.0 - w, 0.0))) / 2.0

    @property
    def tail_mass(self):
        return self.tail(1.0, self.N)


def _gauss_tail(K, w):
    """``2F1(1, K + 1/2; K + 2; w)`` for ``0 <= w <= 1``."""
    if w == 1.0:
        return 2.0 * (K + 1)
    v = float(hyp2f1(1.0, K + 0.5, K + 2.0, w))
    if not math.isfinite(v):
        v = float(mpmath.hyp2f1(1, K + 0.5, K + 2, w))
    return v


def first_return_series(params, N=DEFAULT_N):
    return FirstReturnSeries(params, N)


# ----------------------------------------------------------------------
# kernels


def _nn_row(x, a, b):
    return ((x - 1, a), (x + 1, b)), 0


def gamblers_ruin(params):
    """Walk on {1, 2, ...}: up with ``b``, down with ``a``, killed below 1."""
    p = params_of(params)
    a, b = p.a, p.b

    def row(x):
        if x == 1:
            return ((2, b),), a
        return _nn_row(x, a, b)

    return Kernel(row, lower=1, anchor=1, model="gr", params=p.as_dict(),
                  meta={"exact": p.exact, "rho": p.rho, "family": p, "growth": float(p.up)})


def hub_one_spoke(params):
    """Gambler's ruin shifted to {0, 1, ...}; killing mass ``a`` at 0."""
    p = params_of(params)
    a, b = p.a, p.b

    def row(x):
        if x == 0:
            return ((1, b),), a
        return _nn_row(x, a, b)

    return Kernel(row, lower=0, anchor=0, model="hub1", params=p.as_dict(),
                  meta={"exact": p.exact, "rho": p.rho, "family": p, "growth": float(p.up)})


def hub_two_spoke(params):
    """Two copies of the walk glued at the hub 0 of the integers."""
    p = params_of(params)
    a, b = p.a, p.b
    half = b / 2

    def row(x):
        if x == 0:
            return ((-1, half), (1, half)), a
        if x > 0:
            return ((x - 1, a), (x + 1, b)), 0
        return ((x - 1, b), (x + 1, a)), 0

    return Kernel(row, anchor=0, model="hub2", params=p.as_dict(),
                  meta={"exact": p.exact, "rho": p.rho, "family": p, "growth": float(p.up)})


def remaining_lifetime(params, N=DEFAULT_N):
    """Remaining-lifetime chain on {0, 1, ...}.

    From 0 the chain jumps to ``y`` with probability ``f_{y+1}``; from
    ``x >= 1`` it moves to ``x - 1``. Row 0 is infinite: it is cut at index
    ``N`` (and where coefficients fall below 1e-300), the dropped mass is
    added to the exit mass and the cut is recorded in ``meta``.
    """
    p = params_of(params)
    series = FirstReturnSeries(p, N)
    f = series.coefficients
    keep = np.flatnonzero(f >= _UNDERFLOW)
    cut = int(keep[-1]) if len(keep) else 1
    row0 = tuple((int(k) - 1, float(f[k])) for k in keep)
    exit0 = max(0.0, 1.0 - math.fsum(q for _, q in row0))
    top = row0[-1][0] if row0 else 0
    support = frozenset(y for y, _ in row0)

    def row(x):
        if x == 0:
            return row0, exit0
        return ((x - 1, 1),), 0

    def column(y):
        out = [0] if y in support else []
        return out + [y + 1]

    def span(x, n):
        return 0, max(x, top)

    def row_tail(x, r):
        # sum over dropped targets y >= cut of K(0, y) r^y
        if x != 0:
            return 0.0
        return series.tail(r, cut) / r

    return Kernel(
        row,
        lower=0,
        max_jump=1,
        column_fn=column,
        span_fn=span,
        infinite_rows=(0,),
        anchor=0,
        model="remlife",
        params={**p.as_dict(), "N": N},
        meta={"rho": p.rho, "family": p, "series": series, "cut": cut,
              "tail_mass": series.tail(1.0, cut), "row_tail": row_tail},
    )


def age_hazard(params, j):
    """``r_j = f_j / (f_j + f_{j+1} + ...)``, exact ratio via a Gauss series."""
    p = params_of(params)
    if j < 2 or j % 2:
        return 0.0
    return 1.0 / _gauss_tail(j // 2 - 1, 4.0 * float(p.a * p.b))


def age_chain(params, N=DEFAULT_N):
    """Age chain on {0, ..., N}.

    Row 0 moves to 1 with probability ``b`` (killed otherwise); row ``j >= 1``
    resets to 0 with probability ``r_{j+1}`` and ages to ``j+1`` otherwise.
    State ``N`` is the truncation point: its ageing mass becomes exit mass.
    """
    p = params_of(params)
    N = check_nonnegative_int(N, "N", minimum=2)
    b = p.b

    def row(j):
        if j == 0:
            return ((1, b),), p.a
        r = age_hazard(p, j + 1)
        if j >= N:
            return ((0, r),), 1.0 - r
        return ((0, r), (j + 1, 1.0 - r)), 0

    def column(y):
        if y == 0:
            return range(1, N + 1, 2)
        return [y - 1]

    return Kernel(
        row,
        lower=0,
        upper=N,
        max_jump=1,
        column_fn=column,
        span_fn=lambda x, n: (0, min(x + n, N)),
        anchor=0,
        model="age",
        params={**p.as_dict(), "N": N},
        meta={"rho": p.rho, "family": p},
    )


def build_model(name, b, N=None):
    """Kernel for a model name in :data:`MODEL_NAMES`."""
    if name == "gr":
        return gamblers_ruin(b)
    if name == "hub1":
        return hub_one_spoke(b)
    if name == "hub2":
        return hub_two_spoke(b)
    if name == "remlife":
        return remaining_lifetime(b, DEFAULT_N if N is None else N)
    if name == "age":
        return age_chain(b, DEFAULT_N if N is None else N)
    raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")


def from_config(doc):
    """Kernel from a ``{"model": ..., "b": ..., "N": ...}`` document."""
    if not isinstance(doc, dict) or "model" not in doc or "b" not in doc:
        raise ValueError("model config needs 'model' and 'b'")
    return build_model(doc["model"], as_number(doc["b"], "b"), doc.get("N"))


# ----------------------------------------------------------------------
# closed forms


class ClosedFormFamily:
    """Closed-form invariant measures and harmonic functions of ``hub2``.

    Evaluators take a state ``y`` (and ``xi`` in [-1, 1]) and return exact
    rationals when the parameters allow it.
    """

    def __init__(self, params):
        self.params = params_of(params)
        p = self.params
        self.a, self.b, self.rho = p.a, p.b, p.rho
        self._s = p.down
        self._u = p.up
        self._c = (1 - self.rho) / (2 * self.a)

    def __repr__(self):
        return f"ClosedFormFamily(b={self.params.b})"

    @staticmethod
    def xi_of(x):
        """``x / (1 + |x|)`` as an exact rational."""
        x = check_state(x)
        return Fraction(x, 1 + abs(x))

    def pi_star(self, y):
        """Quasi-limiting law of the gambler's-ruin walk on {1, 2, ...}."""
        if y < 1:
            return 0
        return 2 * self._c * y * self._s ** (y - 1)

    def sigma(self, xi, y):
        xi = check_xi(xi)
        if y == 0:
            return 2 * self._c
        return self._c * (1 + abs(y) + xi * y) * self._s ** abs(y)

    def h(self, xi, y):
        xi = check_xi(xi)
        return (1 + abs(y) + xi * y) * self._u ** abs(y)

    def h_ratio(self, xi, x, y):
        """``h_xi(y) / h_xi(x)`` without forming either factor."""
        xi = check_xi(xi)
        return (1 + abs(y) + xi * y) / (1 + abs(x) + xi * x) * self._u ** (abs(y) - abs(x))

    def sigma_ratio(self, xi, x, y):
        """``sigma_xi(y) / sigma_xi(x)``, safe far from the origin."""
        xi = check_xi(xi)

        def g(v):
            return 2 if v == 0 else 1 + abs(v) + xi * v

        return g(y) / g(x) * self._s ** (abs(y) - abs(x))

    def gamma(self, y):
        if y == 0:
            return 2 * self._c
        return self._c * (self.b / self.a) ** abs(y)

    def hat_h(self, y):
        return (1 + abs(y)) * self._u ** abs(y)

    def pi(self, x, y):
        """Periodic Yaglom limit from ``x``: ``sigma_xi`` with ``xi = x/(1+|x|)``."""
        return self.sigma(self.xi_of(x), y)

    def pi_class(self, x, y, k):
        """Class-``k`` limit (``k=0`` even, ``k=1`` odd) started from ``x``."""
        if (y - k) % 2:
            return 0
        mass = 1 / (1 + self.rho) if k == 0 else self.rho / (1 + self.rho)
        return self.pi(x, y) / mass

    def escape_twisted(self, xi, x):
        """Probability that the ``h_xi``-twisted walk from ``x`` drifts to +inf."""
        xi = check_xi(xi)
        return (1 + xi) / 2 * self.h(1, x) / self.h(xi, x)

    def escape_reversed(self, xi, x):
        """Same for the walk reversed with respect to ``sigma_xi``."""
        xi = check_xi(xi)
        return (1 + xi) / 2 * self.sigma(1, x) / self.sigma(xi, x)

    # -- vector helpers ------------------------------------------------
    def measure(self, xi, window):
        w = window if isinstance(window, Window) else Window(*window)
        ys = np.arange(w.lo, w.hi + 1)
        return Measure(ys, [float(self.sigma(xi, int(y))) for y in ys])

    def func(self, xi, window):
        w = window if isinstance(window, Window) else Window(*window)
        ys = np.arange(w.lo, w.hi + 1)
        return Func(ys, [float(self.h(xi, int(y))) for y in ys])

    def gamma_measure(self, window):
        ys = np.arange(window.lo, window.hi + 1)
        return Measure(ys, [float(self.gamma(int(y))) for y in ys])

    def dump_csv(self, xi, window, fh=None):
        """CSV ``state,sigma_xi,h_xi,gamma,hat_h`` over ``window``."""
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "sigma_xi", "h_xi", "gamma", "hat_h"])
        for y in range(window.lo, window.hi + 1):
            w.writerow([y] + [repr(float(v)) for v in (
                self.sigma(xi, y), self.h(xi, y), self.gamma(y), self.hat_h(y))])
        return buf.getvalue() if fh is None else None


def closed_forms(params):
    return ClosedFormFamily(params)


def survival_asymptotic(params, x, n):
    """Leading-order ``K^{2n}(x, S)`` for ``hub2`` and even ``x >= 0``."""
    p = params_of(params)
    x = check_state(x)
    if x < 0 or x % 2:
        raise ValueError("x must be even and nonnegative")
    a, b = float(p.a), float(p.b)
    four = 4 * a * b
    return ((x + 1) * float(p.up) ** x * a / (1 - four) / math.sqrt(math.pi)
            * four ** n / n ** 1.5)


def ruin_asymptotic(params, x, y, n):
    """Leading-order ``P^{2n}(x, y)`` for the gambler's-ruin walk."""
    p = params_of(params)
    a, b = float(p.a), float(p.b)
    four = 4 * a * b
    return (x * math.sqrt(a / b) ** (x - 1) * y * math.sqrt(b / a) ** (y - 1)
            / math.sqrt(math.pi) * four ** n / n ** 1.5)


@dataclass(frozen=True)
class MinimalMeasures:
    t: float
    s1: float
    s2: float
    minus: Measure
    plus: Measure


def minimal_t_roots(params, t):
    p = params_of(params)
    a, b = float(p.a), float(p.b)
    t = float(t)
    if not float(p.rho) < t < 1:
        raise ValueError(f"t must lie in (rho, 1) = ({float(p.rho)}, 1), got {t}")
    disc = math.sqrt(t * t - 4 * a * b)
    return (t - disc) / (2 * a), (t + disc) / (2 * a)


def minimal_t_value(params, t, x):
    """``sigma_-(x)``, the extremal t-invariant measure escaping to -inf."""
    s1, s2 = minimal_t_roots(params, t)
    if x == 0:
        return 1.0
    if x > 0:
        return s1 ** x / 2
    D = s2 / (s2 - s1)
    C = 0.5 - D
    return C * s1 ** (-x) + D * s2 ** (-x)


def minimal_t_log_value(params, t, x):
    """``log sigma_-(x)``; stays finite where the value itself underflows."""
    s1, s2 = minimal_t_roots(params, t)
    if x == 0:
        return 0.0
    if x > 0:
        return x * math.log(s1) - math.log(2)
    n = -x
    D = s2 / (s2 - s1)
    C = 0.5 - D
    return n * math.log(s2) + math.log(C * (s1 / s2) ** n + D)


def minimal_t_measures(params, t, window=Window(-200, 200)):
    """Pair ``(sigma_-, sigma_+)`` with ``sigma_+(x) = sigma_-(-x)``."""
    s1, s2 = minimal_t_roots(params, t)
    ys = np.arange(window.lo, window.hi + 1)
    minus = Measure(ys, [minimal_t_value(params, t, int(y)) for y in ys])
    plus = Measure(ys, [minimal_t_value(params, t, -int(y)) for y in ys])
    return MinimalMeasures(float(t), s1, s2, minus, plus)


# ----------------------------------------------------------------------
# remaining-lifetime closed forms


def remaining_lifetime_qsd(params, window, N=DEFAULT_N):
    """``pi(y) = rho^y ((1-rho)/a) [1 - sum_{k<=y} f_k R^k]`` on ``window``."""
    p = params_of(params)
    series = FirstReturnSeries(p, max(N, window.hi + 2))
    rho, R = float(p.rho), float(p.R)
    k = np.arange(series.N + 1)
    terms = np.exp(series.log_f + k * math.log(R))
    cum = np.cumsum(terms)
    ys = np.arange(max(window.lo, 0), window.hi + 1)
    bracket = 1.0 - cum[ys]
    vals = np.exp(ys * math.log(rho)) * (1 - rho) / float(p.a) * bracket
    return Measure(ys, vals)


def remaining_lifetime_hat_h(params, window):
    """``R^y`` on ``window`` (rho-superharmonic, harmonic off the hub)."""
    p = params_of(params)
    ys = np.arange(max(window.lo, 0), window.hi + 1)
    return Func(ys, np.exp(ys * math.log(float(p.R))))

"""Input checks shared by the public entry points.

The helpers raise ``ValueError`` (or ``TypeError`` for wrong kinds) with a
short message naming the offending argument, in the spirit of
``sklearn.utils.validation``.
"""

from __future__ import annotations

import math
import numbers
from fractions import Fraction

import numpy as np

# Central tolerance knobs.
STRUCTURAL_TOL = 1e-12
SPECTRAL_TOL = 1e-10
PROBABILITY_TOL = 1e-10
RENORMALIZE_TOL = 1e-9


def as_number(value, name="value"):
    """Return ``value`` as a Fraction if it is rational-like, else a float.

    Strings such as ``"1/5"`` or ``"0.2"`` are parsed exactly.
    """
    if isinstance(value, bool):
        raise TypeError(f"{name} must be a number, got bool")
    if isinstance(value, Fraction):
        return value
    if isinstance(value, numbers.Integral):
        return Fraction(int(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"{name}={value!r} is not a number") from exc
    if isinstance(value, numbers.Real):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
        return v
    raise TypeError(f"{name} must be a number, got {type(value).__name__}")


def check_b(b):
    b = as_number(b, "b")
    if not 0 < b < Fraction(1, 2):
        raise ValueError(f"b must lie in (0, 1/2), got {b}")
    return b


def check_state(x, name="x"):
    if isinstance(x, bool) or not isinstance(x, numbers.Integral):
        if isinstance(x, (float, np.floating)) and float(x).is_integer():
            return int(x)
        raise TypeError(f"{name} must be an integer state, got {x!r}")
    return int(x)


def check_nonnegative_int(n, name="n", minimum=0):
    n = check_state(n, name)
    if n < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {n}")
    return n


def check_xi(xi):
    xi = as_number(xi, "xi")
    if not -1 <= xi <= 1:
        raise ValueError(f"xi must lie in [-1, 1], got {xi}")
    return xi


def check_positive(values, name="values"):
    arr = np.asarray(values, dtype=float)
    if arr.size and not np.all(arr > 0):
        raise ValueError(f"{name} must be strictly positive")
    return arr


def check_nonnegative(values, name="values"):
    arr = np.asarray(values, dtype=float)
    if arr.size and (np.any(arr < 0) or not np.all(np.isfinite(arr))):
        raise ValueError(f"{name} must be finite and nonnegative")
    return arr


def check_probability_map(dist, tol=RENORMALIZE_TOL):
    """Validate a finite map state -> mass.

    Masses are renormalized only when their total is within ``tol`` of one,
    otherwise the map is rejected. Exact inputs stay exact.
    """
    if not isinstance(dist, dict) or not dist:
        raise ValueError("distribution must be a non-empty mapping state -> mass")
    out = {}
    for key, mass in dist.items():
        try:
            state = int(key)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"state {key!r} is not an integer") from exc
        if str(key).strip() not in (str(state), f"+{state}") and not isinstance(key, int):
            raise ValueError(f"state {key!r} is not an integer")
        mass = as_number(mass, f"mass at {state}")
        if mass < 0:
            raise ValueError(f"negative mass at state {state}")
        out[state] = out.get(state, 0) + mass
    total = sum(out.values())
    if abs(float(total) - 1.0) > tol:
        raise ValueError(f"masses sum to {float(total)!r}, not 1 within {tol}")
    if total != 1:
        out = {k: v / total for k, v in out.items()}
    return {k: v for k, v in sorted(out.items()) if v != 0}

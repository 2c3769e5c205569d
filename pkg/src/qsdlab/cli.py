"""Command-line front end: ``qsdlab <command> [options]``.

Every command writes CSV or JSON to stdout (or ``--out``). Failures are
reported as a one-line JSON object on stderr with exit status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from fractions import Fraction

import numpy as np

from .chain import Window, period, validate
from .engine import law_table, ratio_diagnostics, simulate_conditional
from .models import (
    MODEL_NAMES,
    build_model,
    closed_forms,
    params_of,
)
from .spectral import martin_kernel, remaining_lifetime_exit_kernel
from .validation import as_number
from .yaglom import YaglomLimit, domain_of_attraction

TABLE_STEPS = (0, 10, 20, 30, 40, 50)


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# ----------------------------------------------------------------------
# helpers


def _parse_window(text):
    if text is None or text == "auto":
        return None
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise CLIError(f"--window must be 'auto' or 'lo:hi', got {text!r}") from None
    return Window(lo, hi)


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"expected a comma-separated list of integers, got {text!r}") from None


def _kernel(args):
    return build_model(args.model, as_number(args.b, "b"), args.N)


def _fmt(v):
    if isinstance(v, Fraction):
        return str(v)
    return repr(float(v))


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _rows_out(header, rows, fmt):
    if fmt == "json":
        return _json([dict(zip(header, r)) for r in rows])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, Fraction, np.floating)) else v for v in r])
    return buf.getvalue()


# ----------------------------------------------------------------------
# table


def table_limits(b, x):
    """Limiting row of the convergence table (exact when ``b`` is rational)."""
    fam = closed_forms(b)
    p = fam.params
    xi = fam.xi_of(x)
    q = p.b / p.a
    c = (1 - p.rho) / (2 * p.a)
    scale = (1 + p.rho) * c
    geo, lin = q / (1 - q), q / (1 - q) ** 2
    return (2 * scale, scale * (geo + 2 * (1 + xi) * lin),
            scale * (geo + 2 * (1 - xi) * lin), 0)


def table_from10(b=Fraction(1, 5), x=10, steps=TABLE_STEPS):
    """Rows ``(n, P(0), P(2N), P(-2N), survival)`` conditioned on survival."""
    from .engine import conditional_path

    if x % 2:
        raise ValueError("the convergence table needs an even start state")
    kernel = build_model("hub2", b)
    steps = sorted(set(int(s) for s in steps))
    if any(s % 2 for s in steps):
        raise ValueError("table steps must be even")
    rows = []
    wanted = set(steps)
    for n, v, log_s, km in conditional_path(kernel, x, steps[-1]):
        if n in wanted:
            st = km.states
            rows.append((n, float(v[st == 0].sum()), float(v[(st > 0) & (st % 2 == 0)].sum()),
                         float(v[(st < 0) & (st % 2 == 0)].sum()), math.exp(log_s)))
    rows.append(("inf", *table_limits(b, x)))
    return rows


def cmd_table(args):
    rows = table_from10(as_number(args.b, "b"), args.start, _int_list(args.steps_list or TABLE_STEPS))
    return _rows_out(["n", "p_zero", "p_pos_even", "p_neg_even", "survival"], rows, args.format)


# ----------------------------------------------------------------------
# yaglom / doa


def cmd_yaglom(args):
    kernel = _kernel(args)
    est = YaglomLimit(n_max=args.steps or 2000, tol=args.tol).fit(kernel, args.start)
    out = est.report_.to_dict(min_prob=1e-15)
    if args.model == "hub2":
        fam = closed_forms(as_number(args.b, "b"))
        xi = fam.xi_of(args.start)
        out["xi"] = str(xi)
        pi = est.pi_
        ref = np.array([float(fam.pi(args.start, int(y))) for y in pi.states])
        out["tv_to_closed_form"] = 0.5 * float(np.abs(pi.values - ref).sum()
                                               + max(0.0, 1.0 - ref.sum()))
    return _json(out)


def _load_dist(text):
    if text is None:
        raise CLIError("doa needs --dist (JSON map state -> mass, or a path to one)")
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    try:
        raw = json.loads(text, parse_float=Fraction, parse_int=Fraction)
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed distribution: {exc.msg}") from None
    if not isinstance(raw, dict) or not raw:
        raise CLIError("distribution must be a non-empty JSON object")
    try:
        return {int(k): v for k, v in raw.items()}
    except ValueError:
        raise CLIError("distribution keys must be integer states") from None


def cmd_doa(args):
    phi = _load_dist(args.dist)
    b = as_number(args.b, "b")
    xi, _ = domain_of_attraction(phi, closed_forms(b), kernel=build_model("hub2", b))
    return _json({"xi": str(xi), "xi_float": float(xi),
                  "support": sorted(phi), "model": "hub2"})


# ----------------------------------------------------------------------
# martin


def _comparator(args, kind, t):
    b = as_number(args.b, "b")
    p = params_of(b)
    if abs(float(t) - float(p.rho)) > 1e-12:
        return None
    if args.model == "hub2":
        fam = closed_forms(b)
        if kind == "entrance":
            return lambda x, y: fam.sigma_ratio(1 if x > 0 else -1, 0, y)
        return lambda x, y: fam.h(1 if y > 0 else -1, x)
    if args.model == "remlife" and kind == "exit":
        return remaining_lifetime_exit_kernel(p, args.N or 10_000)
    return None


def cmd_martin(args):
    kernel = _kernel(args)
    t = float(args.t) if args.t is not None else float(kernel.meta["rho"])
    xs = _int_list(args.xs)
    ys = _int_list(args.ys)
    table = martin_kernel(kernel, t, args.kind, xs, ys, N=args.N or 20_000,
                          comparator=_comparator(args, args.kind, t))
    if args.format == "json":
        return _json({"t": table.t, "kind": table.kind, "xs": xs, "ys": ys,
                      "values": table.values, "comparator": table.comparator,
                      "N": table.N, **table.meta})
    return table.to_csv()


# ----------------------------------------------------------------------
# validate / simulate / law / ratios / dump


def _window(args, kernel, span=40):
    w = _parse_window(args.window)
    if w is not None:
        return w
    lo = kernel.lower if kernel.lower is not None else args.start - span
    hi = kernel.upper if kernel.upper is not None else args.start + span
    return Window(max(lo, args.start - span), min(hi, args.start + span))


def cmd_validate(args):
    kernel = _kernel(args)
    w = _window(args, kernel)
    rep = validate(kernel, w).to_dict()
    ps = period(kernel, w)
    rep.update({"model": args.model, "period": ps.d})
    return _json(rep)


def cmd_simulate(args):
    kernel = _kernel(args)
    res = simulate_conditional(kernel, args.start, args.steps or 20, args.paths, seed=args.seed)
    if args.format == "json":
        law = {} if res.law is None else {int(s): float(p) for s, p in zip(res.law.states, res.law.values)}
        return _json({"start": res.start, "steps": res.steps, "paths": res.paths,
                      "survivors": res.survivors, "seed": res.seed, "law": law})
    rows = [] if res.law is None else list(zip(res.law.states.tolist(), res.law.values))
    return _rows_out(["state", "prob"], rows, "csv")


def cmd_law(args):
    kernel = _kernel(args)
    steps = _int_list(args.steps_list or "0,10,20,30,40,50")
    ys = _int_list(args.ys) if args.ys else list(range(args.start - 4, args.start + 5))
    ys = [y for y in ys if kernel.contains(y)]
    return law_table(kernel, args.start, steps, ys)


def cmd_ratios(args):
    kernel = _kernel(args)
    diag = ratio_diagnostics(kernel, args.start, args.steps or 1000)
    if args.format == "json":
        return _json({"start": diag.start, "d": diag.d, "rho_est": diag.rho_est,
                      "rho": float(kernel.meta["rho"])})
    return diag.to_csv()


def cmd_dump(args):
    fam = closed_forms(as_number(args.b, "b"))
    xi = as_number(args.xi, "xi") if args.xi is not None else fam.xi_of(args.start)
    w = _parse_window(args.window) or Window(-20, 20)
    return fam.dump_csv(xi, w)


COMMANDS = {
    "table": cmd_table,
    "yaglom": cmd_yaglom,
    "doa": cmd_doa,
    "martin": cmd_martin,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "law": cmd_law,
    "ratios": cmd_ratios,
    "dump": cmd_dump,
}


# ----------------------------------------------------------------------
# argument parsing


def _common(p, model="hub2", start=0):
    p.add_argument("--model", choices=MODEL_NAMES, default=model)
    p.add_argument("--b", default="0.2", help="spoke drift parameter in (0, 1/2)")
    p.add_argument("--start", type=int, default=start)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--window", default="auto", help="'auto' or 'lo:hi'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--N", type=int, default=None, help="series / Green truncation")
    p.add_argument("--config", default=None, help="JSON file with option defaults")


def build_parser():
    parser = _Parser(prog="qsdlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("table", aliases=["table-from10"], help="convergence table from a start state")
    _common(p, start=10)
    p.add_argument("--steps-list", default=None, help="comma-separated even steps")

    p = sub.add_parser("yaglom", help="periodic Yaglom limit report")
    _common(p)
    p.set_defaults(format="json")

    p = sub.add_parser("doa", help="domain of attraction of an initial distribution")
    _common(p)
    p.add_argument("--dist", default=None)
    p.set_defaults(format="json")

    p = sub.add_parser("martin", help="Martin entrance or exit kernel table")
    _common(p)
    p.add_argument("--kind", choices=("entrance", "exit"), default="entrance")
    p.add_argument("--t", default=None)
    p.add_argument("--xs", default="-40")
    p.add_argument("--ys", default="-3,-2,-1,0,1,2,3")

    p = sub.add_parser("validate", help="structural checks and period")
    _common(p)
    p.set_defaults(format="json")

    p = sub.add_parser("simulate", help="Monte Carlo conditional law")
    _common(p, start=10)
    p.add_argument("--paths", type=int, default=100_000)

    p = sub.add_parser("law", help="conditional law at selected steps")
    _common(p, start=10)
    p.add_argument("--steps-list", default=None, help="comma-separated steps")
    p.add_argument("--ys", default=None)

    p = sub.add_parser("ratios", help="survival-ratio diagnostics")
    _common(p)

    p = sub.add_parser("dump", help="closed-form sigma, h, gamma, hat_h as CSV")
    _common(p, start=10)
    p.add_argument("--xi", default=None)
    return parser


_ALIASES = {"table-from10": "table"}


def _apply_config(args, argv):
    if not args.config:
        return args
    with open(args.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise CLIError("--config must hold a JSON object")
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in doc.items():
        key = key.replace("-", "_")
        if not hasattr(args, key):
            raise CLIError(f"unknown config key {key!r}")
        if key not in given:
            setattr(args, key, value)
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = _ALIASES.get(args.command, args.command)
        args = _apply_config(args, argv)
        text = COMMANDS[command](args)
    except (CLIError, ValueError, KeyError, TypeError, OSError, FloatingPointError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\""), "command": command}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 2
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

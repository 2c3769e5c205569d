import io
import math
from fractions import Fraction as F

import numpy as np
import pytest

from qsdlab.chain import Kernel, Window
from qsdlab.engine import green
from qsdlab.models import (
    ModelParams,
    minimal_t_log_value,
    remaining_lifetime,
    remaining_lifetime_hat_h,
)
from qsdlab.spectral import (
    LadderScale,
    check_same_t,
    eigen_check,
    escape_probability,
    green_via_reversal,
    green_via_twist,
    kolmogorov_check,
    martin_kernel,
    remaining_lifetime_exit_kernel,
    reverse,
    reversibility_measure,
    transfer_hitting,
    transfer_hitting_twisted,
    twist,
)

RHO = 0.8


def walk(p, q):
    """Stochastic nearest-neighbour walk on the integers."""
    return Kernel(lambda x: (((x - 1, q), (x + 1, p)), 0), model="walk")


def cycle3(p):
    """Three states on a ring, probability ``p`` clockwise."""
    return Kernel(lambda x: ((((x - 1) % 3, 1 - p), ((x + 1) % 3, p)), 0),
                  lower=0, upper=2, max_jump=2, model="ring")


# -- eigen checks ------------------------------------------------------


@pytest.mark.parametrize("xi", [-1, -0.5, 0, 0.5, 1])
def test_hub2_family_is_eigen(hub2, fam, xi):
    w = Window(-60, 60)
    assert eigen_check(hub2, fam.measure(xi, w), RHO).normalized_residual < 1e-12
    assert eigen_check(hub2, fam.func(xi, w), RHO).normalized_residual < 1e-12


def test_wrong_eigenvalue_detected(hub2, fam):
    chk = eigen_check(hub2, fam.func(0, Window(-30, 30)), 0.9)
    assert chk.normalized_residual > 0.05
    assert chk.to_dict()["kind"] == "function"


def test_remaining_lifetime_superharmonic_defect():
    rl = remaining_lifetime(0.2)
    top = rl.meta["cut"] + 2
    chk = eigen_check(rl, remaining_lifetime_hat_h(ModelParams(0.2), Window(0, top)),
                      RHO, tail_ratio=1.25)
    assert chk.ratio(0) == pytest.approx(0.5, abs=1e-9)
    for y in (1, 5, 50):
        assert chk.ratio(y) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(KeyError):
        chk.ratio(top + 5)


def test_eigen_check_rejects_other_objects(hub2):
    with pytest.raises(TypeError):
        eigen_check(hub2, np.ones(3), RHO)


# -- reversibility -----------------------------------------------------


def test_hub2_passes_kolmogorov(hub2_exact):
    res = kolmogorov_check(hub2_exact, Window(-6, 6))
    assert res.reversible
    assert res.asymmetric_edge is None


def test_ring_fails_kolmogorov():
    res = kolmogorov_check(cycle3(0.7), Window(0, 2))
    assert not res.reversible
    assert res.n_cycles >= 1
    # forward/backward product ratio is (0.7/0.3)^3
    assert res.worst_ratio == pytest.approx((0.7 / 0.3) ** 3 - 1, rel=1e-12)
    assert kolmogorov_check(cycle3(0.5), Window(0, 2)).reversible


def test_one_way_edge():
    k = Kernel(lambda x: (((x + 1, 1),) if x < 3 else ((x, 1),), 0), lower=0, upper=3)
    res = kolmogorov_check(k, Window(0, 3))
    assert not res.reversible and res.asymmetric_edge == (0, 1)
    with pytest.raises(ValueError, match="no reverse"):
        reversibility_measure(k, 0, Window(0, 3))
    with pytest.raises(ValueError):
        kolmogorov_check(k, Window(0, 3), max_cycle_len=2)


def test_reversibility_measure_exact(hub2_exact, fam_exact):
    gam = reversibility_measure(hub2_exact, 0, Window(-8, 8), gamma_ref=F(1, 4))
    assert gam.balance_defect == 0
    for y in range(-8, 9):
        assert gam.exact_values[y] == fam_exact.gamma(y)


def test_reversibility_measure_rejects_ring():
    with pytest.raises(ValueError, match="detailed balance"):
        reversibility_measure(cycle3(0.7), 0, Window(0, 2))


# -- transforms ------------------------------------------------------


def test_twist_on_negative_side(hub2_exact, fam_exact):
    # h_1 is 2^|y| on the negative side, where the twist is a fair walk
    tw = twist(hub2_exact, lambda y: fam_exact.h(1, y), F(4, 5))
    for x in (-1, -5, -20):
        row = dict(tw.row(x)[0])
        assert row[x - 1] == row[x + 1] == F(1, 2)
    assert tw.max_row_defect(range(-10, 11)) == 0
    tw2 = twist(hub2_exact, lambda y: fam_exact.h(-1, y), F(4, 5))
    row = dict(tw2.row(5)[0])
    assert row[4] == F(1, 2) and row[6] == F(1, 2)


def test_twist_rejects_bad_inputs(hub2):
    with pytest.raises(ValueError):
        twist(hub2, lambda y: 1.0, 0)
    tw = twist(hub2, lambda y: 0.0 if y == 3 else 1.0, RHO)
    with pytest.raises(ValueError, match="vanishes"):
        tw.row(3)


def test_reversal_is_stochastic(hub2, fam):
    rv = reverse(hub2, lambda y: fam.sigma(0.3, y), RHO)
    assert rv.max_row_defect(range(-15, 16)) < 1e-14
    assert rv.kind == "reversal" and rv.base is hub2


def test_minimal_reversal_drifts_down(hub2):
    p = ModelParams(0.2)
    t = 0.9
    # minimal measure escaping to -inf, built from log values
    rv = reverse(hub2, None, t, ratio=lambda x, y: math.exp(
        minimal_t_log_value(p, t, y) - minimal_t_log_value(p, t, x)))
    assert rv.max_row_defect(range(-20, 21)) < 1e-12
    assert escape_probability(rv, 0, Y0=32, levels=5) < 1e-6


# -- ladder --------------------------------------------------------------


def test_gamblers_ruin_exit():
    p, q = 0.6, 0.4
    lad = LadderScale(walk(p, q), Y0=64, levels=2)
    r = q / p
    for x in (1, 3, 7):
        exact = (1 - r ** x) / (1 - r ** 10)
        assert lad.exit_upper(x, 0, 10) == pytest.approx(exact, rel=1e-12)
    assert lad.escape(0) == 1.0
    assert LadderScale(walk(q, p), Y0=64, levels=2).escape(0) == 0.0
    assert lad.hitting(0, -3) == pytest.approx(r ** 3, rel=1e-6)
    assert lad.hitting(0, 3) == 1.0


def test_recurrent_walk_rejected():
    with pytest.raises(ValueError, match="recurrent"):
        LadderScale(walk(0.5, 0.5), Y0=16, levels=4).escape(0)


@pytest.mark.parametrize("xi", [-0.6, 0, 0.5])
def test_ladder_matches_closed_escape(hub2, fam, xi):
    tw = twist(hub2, None, RHO, ratio=lambda x, y: fam.h_ratio(xi, x, y))
    rv = reverse(hub2, None, RHO, ratio=lambda x, y: fam.sigma_ratio(xi, x, y))
    for x in (-3, 0, 4):
        assert escape_probability(tw, x, Y0=32, levels=5) == pytest.approx(
            float(fam.escape_twisted(xi, x)), abs=1e-9)
        assert escape_probability(rv, x, Y0=32, levels=5) == pytest.approx(
            float(fam.escape_reversed(xi, x)), abs=1e-9)


# -- transfer identities ------------------------------------------------


def _ladders(hub2, fam, xi):
    tw = twist(hub2, None, RHO, ratio=lambda x, y: fam.h_ratio(xi, x, y))
    rv = reverse(hub2, None, RHO, ratio=lambda x, y: fam.sigma_ratio(xi, x, y))
    return LadderScale(tw, Y0=32, levels=5), LadderScale(rv, Y0=32, levels=5)


@pytest.mark.parametrize("x,y", [(0, 3), (2, -2), (-1, 4)])
def test_hitting_transfer(hub2, fam, x, y):
    tw5, rv5 = _ladders(hub2, fam, 0.5)
    tw0, rv0 = _ladders(hub2, fam, 0)
    moved = transfer_hitting(rv0.hitting(x, y), x, y,
                             lambda s: fam.sigma(0.5, s), lambda s: fam.sigma(0, s))
    assert moved == pytest.approx(rv5.hitting(x, y), rel=1e-10)
    moved = transfer_hitting_twisted(tw0.hitting(x, y), x, y,
                                     lambda s: fam.h(0.5, s), lambda s: fam.h(0, s))
    assert moved == pytest.approx(tw5.hitting(x, y), rel=1e-10)


def test_transfer_identity_at_same_xi(fam):
    s = lambda y: fam.sigma(0.2, y)  # noqa: E731
    assert transfer_hitting(0.37, 1, 4, s, s) == pytest.approx(0.37, rel=1e-15)


def test_green_via_twist_matches_direct(hub2, fam):
    tw, rv = _ladders(hub2, fam, 0)
    h0 = lambda y: fam.h(0, y)  # noqa: E731
    via = green_via_twist(tw.green(0, 2), 0, 2, h0, t=RHO, t_star=RHO)
    direct = green(hub2, 0, 2, 1 / RHO, 100_000).estimate
    assert via == pytest.approx(direct, rel=1e-2)
    s0 = lambda y: fam.sigma(0, y)  # noqa: E731
    via = green_via_reversal(rv.green(2, 0), 0, 2, s0)
    assert via == pytest.approx(direct, rel=1e-2)


def test_eigenvalue_mismatch():
    check_same_t(0.8, 0.8)
    with pytest.raises(ValueError, match="mismatch"):
        transfer_hitting(0.5, 0, 1, abs, abs, t=0.8, t_star=0.9)
    with pytest.raises(ValueError, match="mismatch"):
        green_via_twist(1.0, 0, 1, abs, t=0.8, t_star=0.85)


# -- Martin kernels ------------------------------------------------------


def test_martin_entrance_table(hub2, fam):
    ys = [0, 2, -3]
    tab = martin_kernel(hub2, RHO, "entrance", [-30], ys, N=50_000,
                        comparator=lambda x, y: fam.sigma_ratio(-1, 0, y))
    assert tab.abs_err.max() < 5e-3
    assert tab.value(-30, 0) == pytest.approx(1.0)
    text = tab.to_csv()
    rows = text.strip().splitlines()
    assert rows[0] == "x,y,value,comparator,abs_err"
    assert len(rows) == 1 + len(ys)
    buf = io.StringIO()
    tab.to_csv(buf)
    assert buf.getvalue() == text


def test_martin_exit_remaining_lifetime():
    rl = remaining_lifetime(0.2)
    m = remaining_lifetime_exit_kernel(ModelParams(0.2))
    tab = martin_kernel(rl, RHO, "exit", [0, 5], [40], N=20_000, comparator=m)
    assert tab.abs_err.max() < 1e-6
    assert m(0, 0) == 1.0


def test_martin_rejects_bad_input(hub2):
    with pytest.raises(ValueError, match="below rho"):
        martin_kernel(hub2, 0.5, "exit", [0], [0])
    with pytest.raises(ValueError, match="kind"):
        martin_kernel(hub2, RHO, "sideways", [0], [0], N=10)

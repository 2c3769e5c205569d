import math
from fractions import Fraction as F

import numpy as np
import pytest

from qsdlab.chain import Kernel, Window
from qsdlab.engine import (
    SurvivalRatio,
    conditional_law,
    green,
    green_row,
    hat_h_estimate,
    law_table,
    max_workers,
    ratio_diagnostics,
    simulate_conditional,
    simulate_hitting,
)
from qsdlab.models import closed_forms, gamblers_ruin, hub_two_spoke, remaining_lifetime


def test_table_cells_from_state_10(hub2):
    cl = conditional_law(hub2, 10, 20)
    assert cl.law(0) == pytest.approx(0.38, abs=0.005)
    assert cl.survival == pytest.approx(0.31, abs=0.005)
    cl = conditional_law(hub2, 10, 50)
    even = cl.law.mass_on(lambda y: y > 0 and y % 2 == 0)
    neg = cl.law.mass_on(lambda y: y < 0 and y % 2 == 0)
    assert (cl.law(0), even, neg) == pytest.approx((0.46, 0.49, 0.05), abs=0.005)
    assert cl.survival == pytest.approx(0.00047, rel=0.05)


def test_survival_matches_exact_rational_power(hub2, hub2_exact):
    exact = sum(p for _, p in hub2_exact.power(40).row(10)[0])
    assert isinstance(exact, F)
    assert conditional_law(hub2, 10, 40).survival == pytest.approx(float(exact), rel=1e-12)


def test_start_law_is_point_mass(hub2):
    cl = conditional_law(hub2, 10, 0)
    assert cl.law(10) == 1 and cl.survival == 1


def test_log_scaled_survival_does_not_underflow(hub2):
    cl = conditional_law(hub2, 0, 4000)
    assert cl.survival == 0.0 and math.isfinite(cl.log_survival)
    assert cl.law.total() == pytest.approx(1.0)


def test_law_table_csv(hub2):
    text = law_table(hub2, 10, [0, 2], [0, 10])
    lines = text.splitlines()
    assert lines[0] == "n,cond_prob_of[0],cond_prob_of[10],survival"
    assert lines[1].startswith("0,0.0,1.0,")


def test_ratio_sequences(hub2):
    diag = ratio_diagnostics(hub2, 0, 1000)
    assert diag.d == 2
    two_step = diag.s[998] * diag.s[999]
    assert two_step == pytest.approx(0.64, abs=1e-2)
    # one-step factors alternate between rho^2 (leaving the hub) and 1
    assert diag.s[999] == pytest.approx(1.0, abs=1e-12)
    assert diag.s[998] == pytest.approx(0.64, abs=1e-2)
    assert "n,s_n,rho_est" == diag.to_csv().splitlines()[0]


def test_ratio_from_gamblers_ruin():
    diag = ratio_diagnostics(gamblers_ruin(0.2), 2, 1000)
    assert diag.rho_at(1000) ** 2 == pytest.approx(0.64, abs=1e-2)


def test_green_renewal_identities():
    g = gamblers_ruin(0.2)
    assert green(g, 1, 1, 1.0, 1000).estimate == pytest.approx(1.25, abs=1e-6)
    assert green(g, 1, 1, 1.25, 100_000).estimate == pytest.approx(2.0, abs=0.05)
    assert green(g, 1, 2, 0.0, 10).value == 0.0


def test_green_rejects_divergent_z():
    with pytest.raises(ValueError):
        green(gamblers_ruin(0.2), 1, 1, 1.3, 100)


def test_green_symmetry_under_reversibility(hub2, fam):
    gam = fam.gamma
    for x, y in ((0, 3), (-2, 5), (4, 1)):
        gxy = green(hub2, x, y, 1.1, 5000).estimate
        gyx = green(hub2, y, x, 1.1, 5000).estimate
        assert gam(x) * gxy == pytest.approx(gam(y) * gyx, rel=1e-10)


def test_green_row_regimes(hub2):
    assert green_row(hub2, 0, 1.0, 5000).regime == "converged"
    assert green_row(hub2, 0, 1.25, 2000).regime == "power"


def test_simulation_is_deterministic(hub2):
    a = simulate_conditional(hub2, 10, 20, 20_000, seed=7)
    b = simulate_conditional(hub2, 10, 20, 20_000, seed=7)
    c = simulate_conditional(hub2, 10, 20, 20_000, seed=8)
    assert np.array_equal(a.law.values, b.law.values) and a.survivors == b.survivors
    assert a.survivors != c.survivors or not np.array_equal(a.law.values, c.law.values)


def test_simulation_matches_exact_law(hub2):
    sim = simulate_conditional(hub2, 10, 20, 200_000, seed=1)
    exact = conditional_law(hub2, 10, 20)
    n = sim.survivors
    for y in (0, 2, 4, 6):
        p = exact.law(y)
        assert abs(sim.law(y) - p) < 4 * math.sqrt(p * (1 - p) / n)
    surv = exact.survival
    assert abs(n / sim.paths - surv) < 4 * math.sqrt(surv * (1 - surv) / sim.paths)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("QSDLAB_THREADS", "3")
    assert max_workers() == 3
    monkeypatch.setenv("QSDLAB_THREADS", "junk")
    assert max_workers() >= 1


def test_hitting_simulation_fair_walk():
    rows = {x: {x - 1: 0.5, x + 1: 0.5} for x in range(1, 10)}
    rows[0] = {1: 1.0}
    rows[10] = {9: 1.0}
    k = Kernel.from_rows(rows)
    res = simulate_hitting(k, 3, 0, 10, 100_000, seed=3)
    assert abs(res.p_hi - 0.3) < 4 * res.stderr
    assert res.died == 0 and res.unresolved == 0


def test_hat_h_on_hub2(hub2):
    states = [0, 2, 4]
    est = hat_h_estimate(hub2, 0, states, 1000)
    want = [(y + 1) * 2.0 ** y for y in states]
    got = [est.extrapolated(y) for y in states]
    assert got == pytest.approx(want, rel=1e-2)
    # the plain ratio converges like 1/n and is still a little low
    assert [est.func(y) for y in states] == pytest.approx(want, rel=2e-2)


def test_hat_h_on_remaining_lifetime():
    est = hat_h_estimate(remaining_lifetime(0.2), 0, [0, 2, 4, 6], 1000)
    for y in (2, 4, 6):
        assert est.extrapolated(y) == pytest.approx(1.25 ** y, rel=1e-2)


def test_hat_h_rejects_other_class(hub2):
    with pytest.raises(ValueError):
        hat_h_estimate(hub2, 0, [0, 1], 100)


def test_survival_ratio_estimator(hub2):
    est = SurvivalRatio(n=400).fit(hub2, [0, 2])
    assert est.get_params() == {"n": 400, "x0": 0, "tol": 1e-3}
    assert est.transform([0])[0] == pytest.approx(1.0)
    assert est.hat_h_(2) == pytest.approx(12, rel=5e-2)

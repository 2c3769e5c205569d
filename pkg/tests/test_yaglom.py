import json
from fractions import Fraction as F

import numpy as np
import pytest

from qsdlab.chain import Measure, Window
from qsdlab.models import age_chain, remaining_lifetime
from qsdlab.yaglom import (
    YaglomLimit,
    assemble_periodic,
    constant_rho_check,
    cross_class_weights,
    domain_of_attraction,
    extend_cross_class,
    h_weighted,
    periodic_hat_h,
    yaglom_many,
    yaglom_periodic,
)

W = Window(-120, 120)


def _even_class_limit(fam, x):
    ys = np.arange(W.lo, W.hi + 1)
    vals = np.array([float(fam.pi_class(x, int(y), 0)) for y in ys])
    return Measure(ys, vals / vals.sum(), probability=True)


@pytest.fixture(scope="module")
def report10(hub2):
    return yaglom_periodic(hub2, 10, n_max=2000, stop_early=False)


def test_numeric_limit_matches_closed_form(report10, fam):
    ref = np.array([float(fam.pi(10, int(y))) for y in report10.pi.states])
    assert 0.5 * np.abs(report10.pi.values - ref).sum() < 1e-2
    assert report10.rho_k == pytest.approx((0.64, 1.0), abs=1e-3)
    assert report10.c_k[0] == pytest.approx(5 / 9, abs=1e-3)
    assert report10.rho == pytest.approx(0.8, abs=1e-3)


def test_report_json(report10):
    doc = json.loads(json.dumps(report10.to_dict()))
    assert {"x", "d", "rho", "rho_k", "c_k", "pi", "residual", "cycle_closure",
            "converged", "status", "n_used"} <= set(doc)
    assert doc["d"] == 2


def test_assembly_from_exact_class_limit(hub2, fam):
    rep = assemble_periodic(hub2, _even_class_limit(fam, 10), W)
    assert rep.rho_k == pytest.approx((0.64, 1.0), abs=1e-12)
    assert rep.c_k[0] == pytest.approx(5 / 9, abs=1e-12)
    assert rep.residual < 1e-8 and rep.cycle_closure < 1e-10
    even = rep.pi.mass_on(lambda y: y % 2 == 0)
    assert even == pytest.approx(1 / 1.8, abs=1e-9)
    ref = np.array([float(fam.pi(10, int(y))) for y in rep.pi.states])
    assert np.max(np.abs(rep.pi.values - ref)) < 1e-12


def test_assembly_rejects_mixed_classes(hub2):
    with pytest.raises(ValueError):
        assemble_periodic(hub2, Measure([0, 1], [0.5, 0.5]), Window(-10, 10))


def test_constant_rho_over_starts(hub2):
    reps = yaglom_many(hub2, [0, 2, -4], n_max=600, stop_early=False)
    ok, dev = constant_rho_check(reps, tol=2e-3)
    assert ok and dev < 2e-3
    for r in reps:
        assert r.rho_k[1] == pytest.approx(1.0, abs=1e-12)


def test_limit_at_one_increases_with_start(hub2):
    reps = yaglom_many(hub2, [-6, -1, 0, 1, 6], n_max=800, stop_early=False)
    p1 = [r.pi(1) for r in reps]
    assert all(a < b for a, b in zip(p1, p1[1:]))


def test_cross_class_weights_exact(hub2_exact, fam_exact):
    w = cross_class_weights(hub2_exact, 1, fam_exact.hat_h)
    assert w.j == 1 and w.weights == {0: F(1, 4), 2: F(3, 4)}


def test_periodic_hat_h_reproduces_closed_form(hub2_exact, fam_exact):
    states = list(range(-5, 6))
    hh = periodic_hat_h(hub2_exact, fam_exact.hat_h, states)
    for y in states:
        assert hh(y) == pytest.approx(float(fam_exact.hat_h(y)), rel=1e-14)


def test_cross_class_extension_matches_closed_form(hub2, fam):
    lim, w = extend_cross_class(hub2, 5, fam.hat_h, lambda x: _even_class_limit(fam, x))
    ref = _even_class_limit(fam, 5)
    assert np.max(np.abs(lim.on(ref.states) - ref.values)) < 1e-9
    assert sum(w.weights.values()) == pytest.approx(1.0)


def test_cross_class_refuses_infinite_rows():
    with pytest.raises(ValueError):
        cross_class_weights(remaining_lifetime(0.2), 1, lambda y: 1.25 ** y)


def test_doa_exact(fam_exact, hub2_exact):
    xi, sig = domain_of_attraction({8: 0.04, 6: 0.32, 4: 0.64}, fam_exact, kernel=hub2_exact)
    assert xi == F(6472, 7875)
    assert sig.total() == pytest.approx(1.0)
    xi, _ = domain_of_attraction({8: F(9, 28), 6: F(1, 2), 4: F(5, 28)}, fam_exact)
    assert xi == F(6, 7) == fam_exact.xi_of(6)


def test_doa_rejects_mixed_support_and_bad_mass(fam_exact, hub2_exact):
    with pytest.raises(ValueError):
        domain_of_attraction({3: 0.5, 4: 0.5}, fam_exact, kernel=hub2_exact)
    with pytest.raises(ValueError):
        domain_of_attraction({4: 0.5, 6: 0.3}, fam_exact)


def test_h_weighting(hub2_exact, fam_exact):
    k2 = dict(hub2_exact.power(2).row(6)[0])
    assert h_weighted(k2, fam_exact.hat_h) == {4: F(5, 28), 6: F(1, 2), 8: F(9, 28)}


def test_remaining_lifetime_class_limit_at_hub():
    rep = yaglom_periodic(remaining_lifetime(0.2), 0, n_max=2000, stop_early=False)
    assert rep.class_limits[0](0) == pytest.approx(0.45, abs=1e-2)


def test_age_chain_has_no_limit():
    rep = yaglom_periodic(age_chain(0.2, 3000), 0, n_max=2000, stop_early=False)
    assert not rep.converged
    # conditional mean at steps 2n, n = 100, ..., 1000
    means = [rep.mean_trace[n - 2] for n in range(100, 1001, 100)]
    assert all(a < b for a, b in zip(means, means[1:]))


def test_estimator_interface(hub2):
    est = YaglomLimit(n_max=300, stop_early=False)
    assert est.get_params()["n_max"] == 300
    est.fit(hub2, 0)
    assert est.pi_.total() == pytest.approx(1.0)
    assert est.transform([0])[0] == pytest.approx(est.pi_(0))
    assert len(est.c_k_) == 2

import numpy as np
import pytest

from geoclo.economics import (EconSpec, constraint_violation, npv, npv_batch, robust_objective,
                              thermal_energy)
from geoclo.simulator import ControlSchedule, ProductionSeries


def _series():
    # two steps, one injector, two producers
    times = np.array([100.0, 200.0])
    qp = np.array([[400.0, 600.0], [500.0, 500.0]])
    tp = np.array([[150.0, 140.0], [135.0, 125.0]])
    qi = np.array([[1000.0], [1000.0]])
    return ProductionSeries(times, qp, tp, np.full((2, 2), 240.0), np.full((2, 1), 300.0), qi)


def test_energy_hand_computed():
    s = _series()
    spec = EconSpec()
    # 1000 * 4200 * 100 d * (400*150 + 600*140 - 1000*20) J / 3.6e9
    expected = 1000 * 4200 * 100 * (60000 + 84000 - 20000) / 3.6e9
    assert thermal_energy(s, spec, 0) == pytest.approx(expected, rel=1e-14)


def test_npv_hand_computed():
    s = _series()
    spec = EconSpec(energy_price=40, water_prod_cost=0.5, water_inj_cost=0.5,
                    discount_rate=0.05)
    total = 0.0
    for t, (heat, qp, qi) in enumerate([(124000.0, 1000.0, 1000.0),
                                        (500 * 135 + 500 * 125 - 20000.0, 1000.0, 1000.0)]):
        e = 1000 * 4200 * 100 * heat / 3.6e9
        cash = 40 * e - 0.5 * qp * 100 - 0.5 * qi * 100
        total += cash / 1.05**((t + 1) * 100 / 365)
    b = npv(s, spec)
    assert b.total == pytest.approx(total, rel=1e-13)
    assert b.violation == pytest.approx(5.0)
    assert not b.feasible
    assert b.feasible_steps.tolist() == [[True, True], [True, False]]


def test_zero_discount_is_plain_sum():
    b = npv(_series(), EconSpec(discount_rate=0.0))
    assert np.all(b.discount == 1.0)
    assert b.total == pytest.approx(b.discounted_net.sum())


def test_t0_shifts_discounting():
    s = _series()
    a = npv(s, EconSpec(), step_days=100.0, t0_days=0.0)
    b = npv(s, EconSpec(), step_days=100.0, t0_days=365.0)
    assert b.total == pytest.approx(a.total / 1.05, rel=1e-12)


def test_batch_matches_scalar():
    s = _series()
    obs = s.observed()[None]
    ctrl = np.hstack([s.injector_rates, s.producer_bhps])[None]
    v, viol = npv_batch(obs, ctrl, 1, 2, EconSpec(), 100.0)
    b = npv(s, EconSpec(), step_days=100.0)
    assert v[0] == pytest.approx(b.total, rel=1e-13)
    assert viol[0] == pytest.approx(b.violation)


def test_batch_margin_raises_floor_per_producer():
    # two producers, two steps; temperatures 131/129.5 and 120/140
    obs = np.array([[[1.0, 1.0, 131.0, 129.5, 200.0], [1.0, 1.0, 120.0, 140.0, 200.0]]])
    ctrl = np.ones((1, 2, 3))
    v0, viol0 = npv_batch(obs, ctrl, 1, 2, EconSpec(), 100.0)
    v1, viol1 = npv_batch(obs, ctrl, 1, 2, EconSpec(), 100.0, margin=np.array([2.0, 0.0]))
    assert viol0[0] == 10.5
    # producer 1 floor 132: 1 + 12; producer 2 floor 130: 0.5 + 0
    assert viol1[0] == 13.5
    assert v1[0] == v0[0]


def test_violation_definition():
    assert constraint_violation(np.array([[131.0, 129.5], [120.0, 140.0]]), EconSpec()) == 10.5


def test_negative_rate_rejected():
    s = _series()
    bad = ProductionSeries(s.times, -s.producer_rates, s.producer_temps, s.producer_bhps,
                           s.injector_bhps, s.injector_rates)
    with pytest.raises(ValueError, match="negative"):
        thermal_energy(bad, EconSpec(), 0)


def test_robust_objective_mean_and_feasibility():
    s = _series()
    hot = ProductionSeries(s.times, s.producer_rates, s.producer_temps + 10, s.producer_bhps,
                           s.injector_bhps, s.injector_rates)
    sched = ControlSchedule([[1000.0, 1000.0]], [[240.0, 240.0], [240.0, 240.0]], 100.0)
    members = [hot] * 9 + [s]
    r = robust_objective(sched, members, lambda m, _: m, EconSpec())
    exp = (9 * npv(hot, EconSpec(), 100.0).total + npv(s, EconSpec(), 100.0).total) / 10
    assert r.mean_npv == pytest.approx(exp)
    assert r.feasible_fraction == 0.9 and r.feasible
    r2 = robust_objective(sched, [hot] * 8 + [s] * 2, lambda m, _: m, EconSpec())
    assert not r2.feasible


def test_robust_objective_excludes_failed_members():
    s = _series()
    sched = ControlSchedule([[1000.0, 1000.0]], [[240.0, 240.0], [240.0, 240.0]], 100.0)
    r = robust_objective(sched, [s] * 9 + [None], lambda m, _: m, EconSpec())
    assert r.excluded == [9]
    with pytest.raises(RuntimeError):
        robust_objective(sched, [s] * 8 + [None] * 2, lambda m, _: m, EconSpec())


def test_spec_validation():
    with pytest.raises(ValueError):
        EconSpec(energy_price=-1)
    with pytest.raises(ValueError):
        EconSpec(feasible_fraction=1.5)

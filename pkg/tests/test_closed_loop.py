import json

import numpy as np
import pytest

from geoclo.closed_loop import (LoopState, TruthOracle, _repair, make_workflow,
                                observation_kinds, optimize_known_field, random_baseline,
                                resolve_truth, robust_violation, run_full_loop,
                                run_stage2_step)
from geoclo.config import default_config, merge, rng_for
from geoclo.grid_field import PermField, coeffs_from_field
from geoclo.ies import Ensemble
from geoclo.simulator import random_schedule

TINY = {"surrogate": {"epochs": 3, "epochs_stage1": 3},
        "de": {"n_ind": 8, "g_max": 3}, "ies": {"n_ensemble": 10, "max_iter": 2},
        "loop": {"n_train_stage1": 10, "n_train_stage2": 10, "n_test": 5,
                 "n_random_baseline": 5},
        "controls": {"n_steps": 11}}


def _cfg():
    return merge(default_config(desk=True), TINY)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("loop")
    report = run_full_loop(_cfg(), out)
    return out, report


def test_robust_violation_kth_smallest():
    v = np.array([0, 0, 0, 0, 0, 0, 0, 0, 0, 3.0])
    assert robust_violation(v, 0.9) == 0.0
    v2 = np.array([0, 0, 0, 0, 0, 0, 0, 0, 1.5, 3.0])
    assert robust_violation(v2, 0.9) == 1.5
    # ceil(0.9 * 7) = 7: every member must be feasible
    assert robust_violation(np.array([0, 0, 0, 0, 0, 0, 2.0]), 0.9) == 2.0
    batch = np.vstack([v, v2])
    assert robust_violation(batch, 0.9).tolist() == [0.0, 1.5]


def test_loop_completes_and_audits_each_step(tiny_run):
    out, report = tiny_run
    assert report["status"] == "complete"
    audits = [json.loads((out / "audit" / f"step{k:02d}.json").read_text())
              for k in (9, 10, 11)]
    # decision vector shrinks by one step (9 controls) per executed step
    assert [a["n_variables"] for a in audits] == [27, 18, 9]
    assert all(len(a["controls"]) == 9 and len(a["observations"]) == 14 for a in audits)
    for a in audits:
        assert a["feasible"] == (a["de_best_violation"] == 0.0)


def test_executed_schedule_and_stage1_head(tiny_run):
    out, _ = tiny_run
    ex = json.loads((out / "executed_schedule.json").read_text())
    rates = np.array(ex["injector_rates"]).T  # stored per well
    assert rates.shape == (11, 4)
    assert np.all(rates[:8] == 1200.0)
    assert np.all((rates >= 1100.0) & (rates <= 1300.0))


def test_rmse_recorded_at_every_assimilation(tiny_run):
    out, report = tiny_run
    lines = (out / "rmse_spread.csv").read_text().splitlines()
    assert lines[0] == "stage,rmse,spread"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["prior", "step8", "step9", "step10",
                                                      "step11"]
    for key in ("realized_npv", "reference_npv", "random_max_feasible_npv"):
        assert np.isfinite(report[key])


def test_manifest_excludes_timing(tiny_run):
    out, _ = tiny_run
    m = json.loads((out / "loop_manifest.json").read_text())
    assert m["status"] == "complete" and "elapsed_s" not in m["summary"]


def test_observation_ledger_is_append_only(desk_basis):
    wf = make_workflow(_cfg())
    truth = resolve_truth(wf)
    oracle = TruthOracle(wf.setup, truth, np.random.default_rng(0))
    std = np.ones(14)
    a = oracle.observe(wf.reference(2), std)
    b = oracle.observe(wf.reference(3), std)
    assert b.shape == (3, 14) and np.array_equal(a, b[:2])
    assert oracle.n_runs == 2


def test_oracle_exposes_no_truth(desk_basis):
    wf = make_workflow(_cfg())
    truth = resolve_truth(wf)
    oracle = TruthOracle(wf.setup, truth, np.random.default_rng(0))
    public = {k: v for k, v in vars(oracle).items() if not k.startswith("_")}
    assert not any(isinstance(v, PermField) for v in public.values())
    xi = coeffs_from_field(wf.basis, truth).xi
    assert oracle.holds_truth(xi[None], wf.basis)
    assert not oracle.holds_truth(xi[None] + 1e-3, wf.basis)


def test_canary_stops_leaked_truth():
    wf = make_workflow(_cfg())
    truth = resolve_truth(wf)
    oracle = TruthOracle(wf.setup, truth, np.random.default_rng(0))
    xi = coeffs_from_field(wf.basis, truth).xi
    members = rng_for(0, "t").standard_normal((5, wf.basis.n_modes))
    members[2] = xi
    wf.stage2 = object()
    state = LoopState(8, Ensemble(members), np.zeros((8, 14)), wf.reference(8))
    with pytest.raises(RuntimeError, match="leak"):
        run_stage2_step(wf, state, oracle)


def test_stage_bounds_checked():
    wf = make_workflow(_cfg())
    oracle = TruthOracle(wf.setup, resolve_truth(wf), np.random.default_rng(0))
    state = LoopState(11, Ensemble(np.zeros((3, wf.basis.n_modes))), np.zeros((11, 14)),
                      wf.reference(11))
    with pytest.raises(ValueError, match="outside stage 2"):
        run_stage2_step(wf, state, oracle)


def test_observation_kinds():
    assert observation_kinds(2, 1) == ["rate", "rate", "temp", "temp", "bhp"]


def test_random_baseline_repair_reaches_floor():
    """On the desk truth uniform draws break the temperature floor; the
    repaired draws meet it, stay in bounds and keep the fixed head."""
    wf = make_workflow(default_config(desk=True))
    oracle = TruthOracle(wf.setup, resolve_truth(wf), np.random.default_rng(0))
    raw = random_baseline(wf, oracle, 3, None, "t", repair_rounds=0)
    assert not any(r["feasible"] for r in raw) and all(r["repairs"] == 0 for r in raw)
    fixed = random_baseline(wf, oracle, 3, None, "t")
    assert all(r["feasible"] and r["repairs"] >= 1 for r in fixed)
    assert all(f["npv"] != r["npv"] for f, r in zip(fixed, raw))

    head = wf.reference(wf.n_stage1)
    rng = np.random.default_rng(1)
    tail = random_schedule(rng, wf.setup.n_inj, wf.setup.n_prod, wf.n_steps - head.n_steps,
                           wf.setup.bounds, wf.step_days)
    s, res, k = _repair(wf, oracle, head.concat(tail), head.n_steps, 10)
    b = wf.setup.bounds
    assert res.feasible and k >= 1
    m = s.to_matrix()
    assert np.array_equal(m[:head.n_steps], head.to_matrix())
    assert m[:, :4].min() >= b.rate_min and m[:, :4].max() <= b.rate_max
    assert m[:, 4:].min() >= b.bhp_min and m[:, 4:].max() <= b.bhp_max


def test_known_field_verification_rounds(tmp_path):
    """Each failed simulator check raises the violating producers' floors;
    rounds stop at the first feasible schedule or the configured cap."""
    cfg = merge(_cfg(), {"dataset": {"n_train": 10, "n_test": 5}, "de": {"verify_rounds": 2}})
    rep = optimize_known_field(cfg, tmp_path)
    lines = (tmp_path / "de" / "verification.csv").read_text().splitlines()
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert lines[0].startswith("round,margin_P1,") and len(rows) == rep["verify_rounds"] + 1
    assert np.all(rows[0, 1:6] == 0.0) and np.all(np.diff(rows[:, 1:6], axis=0) >= 0)
    assert rows[-1, 1:6].tolist() == rep["margin"]
    assert rows[-1, -1] == rep["truth_violation"]
    assert np.all(rows[:-1, -1] > 0)
    if rep["truth_violation"] > 0:
        assert len(rows) == 3

"""End-to-end acceptance checks at desk scale.

Each test prints one PASS/FAIL line (collected into the terminal summary).
The closed loop and the known-field optimization are run once per session
and shared by the criteria that read their results.
"""
import json
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES
from geoclo.cli import main
from geoclo.closed_loop import optimize_known_field, run_full_loop
from geoclo.config import default_config, merge
from geoclo.de_optimizer import DeConfig, run as de_run
from geoclo.grid_field import GridSpec, build_kle_basis, fields_from_coeffs
from geoclo.ies import Ensemble, IesConfig, ObservationSet, assimilate
from geoclo.nn import gradient_check
from geoclo.simulator import record_runs
from geoclo.surrogate import SurrogateConfig, loss_gradient_check

pytestmark = pytest.mark.slow


def _fmt(x):
    return "n/a" if x is None else f"{x:.5g}"


def _report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module", autouse=True)
def sim_runs():
    """Every simulation run in this module, for the conservation audit."""
    with record_runs() as runs:
        yield runs


@pytest.fixture(scope="module")
def loop_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("loop")
    with threadpool_limits(1):
        rep = run_full_loop(default_config(desk=True), out)
    return out, rep


@pytest.fixture(scope="module")
def known_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("known")
    with threadpool_limits(1):
        rep = optimize_known_field(default_config(desk=True), out)
    return out, rep


def test_criterion_01_kle_statistics():
    t0 = time.perf_counter()
    basis = build_kle_basis(GridSpec.full())
    rng = np.random.default_rng(2024)
    n, s1, s2 = 10_000, 0.0, 0.0
    for _ in range(10):
        lnk = fields_from_coeffs(basis, rng.standard_normal((1000, basis.n_modes)))
        s1 = s1 + lnk.sum(0)
        s2 = s2 + (lnk**2).sum(0)
    mean = s1 / n
    var = (s2 - n * mean**2) / (n - 1)
    dev_mean = float(np.max(np.abs(mean - 3.6)))
    dev_var = float(np.max(np.abs(var / basis.truncated_variance() - 1)))
    dt = time.perf_counter() - t0
    ok = dev_mean < 0.05 and dev_var < 0.10 and dt < 60
    _report(1, ok, f"61x61, {basis.n_modes} modes: max|mean-3.6|={dev_mean:.4f} (<0.05), "
                   f"max var rel err={dev_var:.4f} (<0.10), {dt:.1f}s (<60)")
    assert ok


def test_criterion_03_autodiff():
    from test_nn import PRIMITIVES, _loss
    from geoclo.nn import Tensor
    import zlib
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, shapes) in PRIMITIVES.items():
        for seed in range(10):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            params = {k: rng.standard_normal(s) for k, s in shapes.items()}
            w = rng.standard_normal(fn({k: Tensor(v) for k, v in params.items()}).shape)
            chk = gradient_check(lambda p: _loss(fn(p), w), params, n_probes=10, rng=rng)
            worst[name] = max(worst.get(name, 0.0), chk.max_rel_error)
    cfg = SurrogateConfig(n_steps=17, n_inj=4, n_prod=5)
    comp = loss_gradient_check(cfg, np.random.default_rng(0), n_probes=10).max_rel_error
    dt = time.perf_counter() - t0
    prim = max(worst.values())
    ok = prim < 1e-4 and comp < 1e-4 and dt < 60
    _report(3, ok, f"{len(worst)} primitives x 10 seeds max rel err={prim:.2e}, composite "
                   f"surrogate={comp:.2e} (<1e-4), {dt:.1f}s (<60)")
    assert ok


def test_criterion_05_de_sanity():
    t0 = time.perf_counter()
    sph = de_run(DeConfig(-5 * np.ones(10), 5 * np.ones(10), n_ind=50, g_max=200, F=0.5,
                          Cr=0.7, seed=1), lambda X: np.sum(X**2, axis=1), vectorized=True)
    ros = de_run(DeConfig([-2.0, -2.0], [2.0, 2.0], n_ind=50, g_max=1000, F=0.5, Cr=0.7,
                          seed=1),
                 lambda X: (1 - X[:, 0])**2 + 100 * (X[:, 1] - X[:, 0]**2)**2,
                 vectorized=True)
    mono = all(all(b <= a for a, b in zip(bs, bs[1:])) for bs in
               ([r["best"] for r in sph.trace], [r["best"] for r in ros.trace]))
    dt = time.perf_counter() - t0
    ok = sph.best_f < 1e-6 and ros.best_f < 1e-4 and mono and dt < 30
    _report(5, ok, f"sphere {sph.best_f:.2e} (<1e-6), rosenbrock {ros.best_f:.2e} (<1e-4), "
                   f"monotone={mono}, {dt:.1f}s (<30)")
    assert ok


def test_criterion_07_ies_linear_gaussian():
    t0 = time.perf_counter()
    G = np.array([[1.0, 0.5], [0.2, 1.0], [1.0, 1.0]])
    d = np.array([1.5, 0.6, 1.4])
    std = np.full(3, 0.5)
    cd_inv = np.diag(1 / std**2)
    cov = np.linalg.inv(np.eye(2) + G.T @ cd_inv @ G)
    mean = cov @ G.T @ cd_inv @ d
    rng = np.random.default_rng(7)
    ens, _ = assimilate(Ensemble(rng.standard_normal((5000, 2))), ObservationSet(d, std),
                        lambda M: M @ G.T, IesConfig(max_iter=10), rng=rng)
    m_err = float(np.max(np.abs(ens.members.mean(0) - mean) / np.abs(mean)))
    c = np.cov(ens.members.T)
    c_err = float(np.linalg.norm(c - cov) / np.linalg.norm(cov))
    dt = time.perf_counter() - t0
    ok = m_err < 0.05 and c_err < 0.15 and dt < 60
    _report(7, ok, f"N_e=5000: mean rel err={m_err:.3f} (<0.05), covariance rel err "
                   f"(Frobenius)={c_err:.3f} (<0.15), {dt:.1f}s (<60)")
    assert ok


def test_criterion_06_known_field_optimization(known_run):
    out, rep = known_run
    total = sum(rep["phase_s"].values())
    best_rand = rep["random_max_feasible_npv"]
    ok = (rep["truth_npv"] >= rep["reference_npv"]
          and rep["n_random_feasible"] >= 200 and rep["truth_npv"] >= best_rand
          and rep["truth_violation"] == 0.0 and total < 1800)
    _report(6, ok, f"truth NPV {rep['truth_npv']:.5g} vs reference {rep['reference_npv']:.5g}"
                   f", best of {rep['n_random_feasible']}/{rep['n_random']} feasible random "
                   f"{_fmt(best_rand)}; "
                   f"violation {rep['truth_violation']:.3g}; {total:.0f}s (<1800)")
    assert ok


def test_criterion_04_surrogate_accuracy(loop_run):
    out, rep = loop_run
    s2 = rep["stage2_surrogate"]
    t = rep["phase_s"]["stage2_surrogate"]
    lo, hi = s2["slope_range"]
    ok = s2["min_r2"] >= 0.95 and 0.9 <= lo and hi <= 1.1 and t < 1200
    _report(4, ok, f"stage-2 surrogate, {s2['n_samples']} held-out runs: min R2="
                   f"{s2['min_r2']:.4f} (>=0.95), slopes [{lo:.3f}, {hi:.3f}] "
                   f"(within [0.9, 1.1]), {t:.0f}s (<1200)")
    assert ok


def test_criterion_08_closed_loop_trend(loop_run):
    out, rep = loop_run
    r, s = rep["rmse"], rep["spread"]
    lines = (out / "rmse_spread.csv").read_text().splitlines()
    elapsed = rep["elapsed_s"]
    ok = (rep["status"] == "complete" and r[-1] < r[0] and s[-1] < s[0]
          and len(lines) == len(r) + 1 and elapsed < 3600)
    _report(8, ok, f"RMSE {r[0]:.3f} -> {r[-1]:.3f}, spread {s[0]:.3f} -> {s[-1]:.3f} over "
                   f"{len(r)} assimilations, {elapsed:.0f}s (<3600)")
    assert ok


def test_criterion_09_closed_loop_benefit(loop_run):
    out, rep = loop_run
    best_rand = rep["random_max_feasible_npv"]
    t = rep["phase_s"]["baseline"]
    ok = (rep["realized_npv"] > rep["reference_npv"]
          and rep["n_random_feasible"] >= 200 and rep["realized_npv"] >= best_rand
          and t < 900)
    _report(9, ok, f"realized NPV {rep['realized_npv']:.5g} vs reference "
                   f"{rep['reference_npv']:.5g}, best of {rep['n_random_feasible']}/"
                   f"{rep['n_random']} feasible random {_fmt(best_rand)}; "
                   f"baseline {t:.0f}s (<900)")
    assert ok


def test_criterion_10_envelopes(loop_run):
    out, rep = loop_run
    ratio = rep["envelope_ratio"]
    ok = ratio <= 0.5
    _report(10, ok, f"final/prior prediction std ratio {ratio:.3f} (<=0.5)")
    assert ok


TINY = {"surrogate": {"epochs": 3, "epochs_stage1": 3},
        "de": {"n_ind": 8, "g_max": 3}, "ies": {"n_ensemble": 10, "max_iter": 2},
        "loop": {"n_train_stage1": 10, "n_train_stage2": 10, "n_test": 5,
                 "n_random_baseline": 5},
        "dataset": {"n_train": 10, "n_test": 5},
        "controls": {"n_steps": 11}}


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_11_reproducibility(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    runs = [("simulate", []), ("loop", ["--config", str(cfg)]),
            ("optimize", ["--config", str(cfg)])]
    diffs, n_files = [], 0
    for cmd, extra in runs:
        trees = []
        for rep in range(2):
            out = tmp_path / f"{cmd}{rep}"
            code = main([cmd, "--desk", "--threads", "1", "--out", str(out)] + extra)
            assert code == 0, cmd
            trees.append(_tree(out))
        a, b = trees
        n_files += len(a)
        diffs += [f"{cmd}/{k}" for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]
    kinds = {k.rsplit(".", 1)[-1] for r, _ in runs for k in _tree(tmp_path / f"{r}0")}
    ok = not diffs and {"json", "csv", "svg"} <= kinds
    _report(11, ok, f"{n_files} files over {len(runs)} repeated runs ({', '.join(sorted(kinds))}"
                    f"): {len(diffs)} differ" + (f" e.g. {diffs[:3]}" if diffs else ""))
    assert ok


def test_criterion_02_simulator_conservation(sim_runs, desk_spec, desk_wells, desk_basis):
    # runs last: audits every simulation made by the criteria above, plus a timed
    # 25-step desk run
    from geoclo.grid_field import sample_field
    from geoclo.simulator import random_schedule, simulate
    rng = np.random.default_rng(11)
    simulate(desk_spec, desk_wells, sample_field(desk_basis, rng.standard_normal(96)),
             random_schedule(rng, 4, 5, 25))
    mb = max(r.mass_balance for r in sim_runs)
    t_lo = min(r.t_min for r in sim_runs)
    t_hi = max(r.t_max for r in sim_runs)
    over = max(r.overshoot for r in sim_runs)
    t25 = max(r.seconds for r in sim_runs if r.n_steps == 25)
    ok = mb < 1e-8 and t_lo >= 20.0 and t_hi <= 200.0 and t25 < 5.0
    _report(2, ok, f"{len(sim_runs)} runs: max mass-balance residual {mb:.2e} (<1e-8), "
                   f"T in [{t_lo:.2f}, {t_hi:.2f}] (within [20, 200]; raw roundoff "
                   f"{over:.1e}), slowest 25-step run {t25:.2f}s (<5)")
    assert ok

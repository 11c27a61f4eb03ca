"""Two-stage closed-loop workflow.

Stage 1 runs constant controls, then assimilates the observed data with a
field-only surrogate. Stage 2 alternates, one control step at a time,
robust DE optimization of all remaining steps (mean NPV over the current
ensemble, evaluated with the field+control surrogate), application of the
first optimized step to the true reservoir, and re-assimilation of the full
observation ledger.

The true field lives inside :class:`TruthOracle`; the optimizer and the
assimilator only ever see ensemble coefficients and observations.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import Setup, build_setup, config_hash, rng_for, seed_for
from .de_optimizer import DeConfig, run as de_run
from .economics import npv, npv_batch
from .grid_field import (KleBasis, PermField, build_kle_basis, coeffs_from_field,
                         field_to_csv, fields_from_coeffs, load_field, sample_field)
from .plots import emit_plots
from .ies import (Ensemble, ObservationSet, assimilate, field_stats, metrics,
                  noise_std_for_channels)
from .simulator import (ControlSchedule, Dataset, ProductionSeries, constant_schedule,
                        generate_dataset, random_schedule, simulate)
from .surrogate import (SurrogateConfig, SurrogateModel, evaluate, latent_drive, encode,
                        predict_batch, rollout, train)

__all__ = [
    "TruthOracle", "LoopState", "StepAudit", "Workflow", "observation_kinds",
    "robust_violation", "make_fitness", "random_baseline", "optimize_known_field",
    "run_stage1", "run_stage2_step", "run_full_loop", "envelope_stats",
]

logger = logging.getLogger(__name__)


def observation_kinds(n_prod: int, n_inj: int) -> list[str]:
    return ["rate"] * n_prod + ["temp"] * n_prod + ["bhp"] * n_inj


def _channel_labels(setup: Setup) -> list[str]:
    p = [w.name for w in setup.wells if w.kind == "producer"]
    i = [w.name for w in setup.wells if w.kind == "injector"]
    return [f"{n}_rate" for n in p] + [f"{n}_temp" for n in p] + [f"{n}_bhp" for n in i]


class TruthOracle:
    """Sole holder of the true field.

    It runs the simulator on the truth, perturbs the observations with
    measurement noise and scores estimates against the truth. Nothing
    else in the loop receives the field or its coefficients.
    """

    def __init__(self, setup: Setup, truth: PermField, rng: np.random.Generator):
        self.__truth = truth
        self.__setup = setup
        self.__rng = rng
        self.__noisy: list[np.ndarray] = []
        self.n_runs = 0

    def run(self, schedule: ControlSchedule) -> ProductionSeries:
        self.n_runs += 1
        return simulate(self.__setup.spec, self.__setup.wells, self.__truth, schedule)

    def observe(self, schedule: ControlSchedule, noise_std: np.ndarray) -> np.ndarray:
        """Noisy observations for every executed step.

        Noise for a step is drawn the first time that step is observed
        and never redrawn, so earlier rows stay fixed.
        """
        clean = self.run(schedule).observed()
        while len(self.__noisy) < clean.shape[0]:
            t = len(self.__noisy)
            self.__noisy.append(clean[t] + self.__rng.standard_normal(clean.shape[1]) * noise_std)
        return np.array(self.__noisy[:clean.shape[0]])

    def score(self, members: np.ndarray, basis: KleBasis) -> tuple[float, float]:
        return metrics(members, basis, self.__truth)

    def realized_npv(self, schedule: ControlSchedule) -> float:
        return npv(self.run(schedule), self.__setup.econ, schedule.step_days).total

    def holds_truth(self, members: np.ndarray, basis: KleBasis, tol: float = 1e-9) -> bool:
        """Canary: True if any member reproduces the true field."""
        lnk = fields_from_coeffs(basis, np.atleast_2d(members))
        return bool(np.any(np.max(np.abs(lnk - self.__truth.lnk), axis=1) < tol))

    def field_csv(self, path) -> None:
        field_to_csv(path, self.__truth)


@dataclass
class StepAudit:
    step: int
    n_variables: int
    controls: list[float]
    observations: list[float]
    rmse: float
    spread: float
    forecast_npv: float
    feasible_fraction: float
    feasible: bool
    de_best_violation: float
    ies_status: str
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LoopState:
    step: int
    ensemble: Ensemble
    ledger: np.ndarray
    """(n_observed_steps, n_channels) noisy observations, append-only."""
    executed: ControlSchedule
    incumbent: np.ndarray | None = None
    audit: list[StepAudit] = field(default_factory=list)
    rmse: list[tuple[str, float, float]] = field(default_factory=list)


@dataclass
class Workflow:
    """Everything the loop needs besides the truth."""

    setup: Setup
    basis: KleBasis
    stage1: SurrogateModel | None = None
    stage2: SurrogateModel | None = None
    noise_std: np.ndarray | None = None
    model_err1: np.ndarray | None = None
    model_err2: np.ndarray | None = None
    reports: dict = field(default_factory=dict)

    @property
    def cfg(self) -> dict:
        return self.setup.cfg

    @property
    def n_stage1(self) -> int:
        return int(self.cfg["loop"]["n_stage1"])

    @property
    def n_steps(self) -> int:
        return int(self.cfg["controls"]["n_steps"])

    @property
    def step_days(self) -> float:
        return float(self.cfg["controls"]["step_days"])

    def reference(self, n_steps: int) -> ControlSchedule:
        c = self.cfg["controls"]
        return constant_schedule(self.setup.n_inj, self.setup.n_prod, n_steps, c["ref_rate"],
                                 c["ref_bhp"], self.step_days)

    def surrogate_config(self, n_steps: int, use_controls: bool, epochs: int,
                         seed_name: str) -> SurrogateConfig:
        s = self.cfg["surrogate"]
        g = self.setup.grid
        return SurrogateConfig(
            n_steps=n_steps, n_inj=self.setup.n_inj, n_prod=self.setup.n_prod,
            grid_shape=(g.ny, g.nx), latent_dim=s["latent_dim"],
            enc_channels=tuple(s["enc_channels"]), kernel=s["kernel"],
            lstm_hidden=s["lstm_hidden"], use_controls=use_controls,
            activation=s["activation"], recon_weight=s["recon_weight"],
            weight_decay=s["weight_decay"], epochs=epochs, learning_rate=s["learning_rate"],
            batch_size=s["batch_size"], seed=seed_for(self.cfg["seed"], seed_name))

    def obs_std(self, model_err: np.ndarray | None) -> np.ndarray:
        std = self.noise_std
        if model_err is not None and self.cfg["ies"]["model_error"]:
            std = np.sqrt(std**2 + model_err**2)
        return std


def make_workflow(cfg: dict) -> Workflow:
    setup = build_setup(cfg)
    k = cfg["kle"]
    basis = build_kle_basis(setup.grid, k["mean"], k["sigma"], k["corr_len_x"],
                            k["corr_len_y"], k["energy_fraction"], k["max_modes"])
    return Workflow(setup, basis)


def resolve_truth(wf: Workflow) -> PermField:
    lp = wf.cfg["loop"]
    if lp["truth_path"]:
        fld = load_field(lp["truth_path"])
        if fld.grid != wf.setup.grid:
            raise ValueError(f"truth field {lp['truth_path']} is on a different grid")
        return fld
    rng = rng_for(lp["truth_seed"], "truth")
    return sample_field(wf.basis, rng.standard_normal(wf.basis.n_modes))


# -- objective ----------------------------------------------------------------

def robust_violation(member_violation: np.ndarray, fraction: float) -> np.ndarray:
    """Violation of the ensemble constraint "at least ``fraction`` of members
    feasible": the k-th smallest member violation, k = ceil(fraction N).
    Zero exactly when the constraint holds. Works on the last axis."""
    n = member_violation.shape[-1]
    k = max(1, math.ceil(fraction * n - 1e-12))
    return np.sort(member_violation, axis=-1)[..., k - 1]


def make_fitness(model: SurrogateModel, drives: np.ndarray, frozen: np.ndarray,
                 n_free: int, wf: Workflow, t0_days: float, on_eval=None,
                 margin: float | np.ndarray = 0.0):
    """Vectorized DE fitness: ``-mean NPV`` over members plus robust violation.

    ``frozen`` holds already-executed control rows inside the surrogate
    window; DE variables fill the remaining ``n_free`` rows. Only the free
    steps enter the NPV (earlier cash flow is sunk). ``margin`` is added to
    the temperature floor (per producer or scalar).
    """
    n_c = model.config.n_controls
    n_e = drives.shape[0]
    k = frozen.shape[0]
    econ = wf.setup.econ

    def fitness(X):
        P = X.shape[0]
        free = X.reshape(P, n_free, n_c)
        ctrl = np.concatenate([np.broadcast_to(frozen, (P, k, n_c)), free], axis=1)
        if on_eval is not None:
            on_eval(ctrl)
        big = np.repeat(ctrl, n_e, axis=0)
        d = np.tile(drives, (P, 1))
        obs = rollout(model, d, big)[:, k:]
        vals, viol = npv_batch(obs, big[:, k:], wf.setup.n_inj, wf.setup.n_prod, econ,
                               wf.step_days, t0_days, margin)
        vals = vals.reshape(P, n_e)
        viol = viol.reshape(P, n_e)
        return -vals.mean(axis=1), robust_violation(viol, econ.feasible_fraction)

    return fitness


def _de_config(wf: Workflow, n_dims_steps: int, seed_name: str) -> DeConfig:
    d = wf.cfg["de"]
    lo, hi = wf.setup.bounds.vector_bounds(wf.setup.n_inj, wf.setup.n_prod, n_dims_steps)
    return DeConfig(lo, hi, n_ind=d["n_ind"], F=d["F"], Cr=d["Cr"], strategy=d["strategy"],
                    g_max=d["g_max"], seed=seed_for(wf.cfg["seed"], seed_name),
                    constraint=d["constraint"], penalty_weight=d["penalty_weight"])


# -- surrogates -------------------------------------------------------------

def _train_and_test(wf: Workflow, ds: Dataset, n_train: int, cfg: SurrogateConfig, tag: str):
    train_ds = ds.subset(np.arange(n_train))
    model = train(train_ds, cfg)
    report = None
    err = None
    if len(ds) > n_train:
        report = evaluate(model, ds.subset(np.arange(n_train, len(ds))))
        err = np.array(report.rmse)
        logger.info("%s surrogate held-out R2 min %.4f", tag, min(report.r2))
    wf.reports[tag] = report
    return model, err


def prepare_stage1(wf: Workflow, out_dir: Path | None = None) -> SurrogateModel:
    """Train (or load) the field-only surrogate on prior fields under the
    constant stage-1 controls, and fix the observation-noise levels."""
    lp = wf.cfg["loop"]
    n1 = wf.n_stage1
    n_train, n_test = int(lp["n_train_stage1"]), int(lp["n_test"])
    rng = rng_for(wf.cfg["seed"], "stage1-data")
    xi = rng.standard_normal((n_train + n_test, wf.basis.n_modes))
    fields = [PermField(wf.setup.grid, l) for l in fields_from_coeffs(wf.basis, xi)]
    ds = generate_dataset(wf.setup.spec, wf.setup.wells, fields, [wf.reference(n1)],
                          seed=seed_for(wf.cfg["seed"], "stage1-data"))
    if lp["stage1_checkpoint"]:
        model = SurrogateModel.load(lp["stage1_checkpoint"])
        rep = evaluate(model, ds.subset(np.arange(n_train, len(ds))), allow_overlap=True) \
            if len(ds) > n_train else None
        err = None if rep is None else np.array(rep.rmse)
        wf.reports["stage1"] = rep
    else:
        cfg = wf.surrogate_config(n1, False, wf.cfg["surrogate"]["epochs_stage1"], "stage1-model")
        model, err = _train_and_test(wf, ds, n_train, cfg, "stage1")
    obs = ds.observed()[:n_train].reshape(-1, ds.observed().shape[-1])
    ranges = obs.max(0) - obs.min(0)
    wf.noise_std = noise_std_for_channels(
        observation_kinds(wf.setup.n_prod, wf.setup.n_inj), ranges,
        wf.cfg["ies"]["noise_rel"], wf.cfg["ies"]["noise_temp"])
    wf.stage1, wf.model_err1 = model, err
    if out_dir is not None:
        model.save(out_dir / "models" / "stage1")
        if wf.reports.get("stage1") is not None:
            wf.reports["stage1"].write(out_dir / "surrogate_stage1", time_nodes=(0, n1 - 1))
    return model


def prepare_stage2(wf: Workflow, members: np.ndarray, out_dir: Path | None = None,
                   tag: str = "stage2") -> SurrogateModel:
    """Train (or load) the field+control surrogate on posterior members and
    random remaining-horizon schedules (stage-1 rows held constant).

    Training fields cycle through the members so each one is covered when
    ``n_train >= N_e``; held-out samples pair randomly chosen members with
    fresh schedules, which is the population the optimizer queries.
    """
    lp = wf.cfg["loop"]
    n1, n_tot = wf.n_stage1, wf.n_steps
    n2 = n_tot - n1
    n_train, n_test = int(lp["n_train_stage2"]), int(lp["n_test"])
    n = n_train + n_test
    rng = rng_for(wf.cfg["seed"], f"{tag}-data")
    n_e = members.shape[0]
    pick = np.r_[rng.permutation(np.arange(n_train) % n_e), rng.integers(0, n_e, n_test)]
    fields = [PermField(wf.setup.grid, l) for l in fields_from_coeffs(wf.basis, members[pick])]
    head = wf.reference(n1)
    scheds = [head.concat(random_schedule(rng, wf.setup.n_inj, wf.setup.n_prod, n2,
                                          wf.setup.bounds, wf.step_days)) for _ in range(n)]
    ds = generate_dataset(wf.setup.spec, wf.setup.wells, fields, scheds,
                          seed=seed_for(wf.cfg["seed"], f"{tag}-data")).window(n1, None)
    if lp["stage2_checkpoint"] and tag == "stage2":
        model = SurrogateModel.load(lp["stage2_checkpoint"])
        rep = evaluate(model, ds.subset(np.arange(n_train, n)), allow_overlap=True) \
            if n_test else None
        wf.reports[tag] = rep
        err = None if rep is None else np.array(rep.rmse)
    else:
        cfg = wf.surrogate_config(n2, True, wf.cfg["surrogate"]["epochs"], f"{tag}-model")
        model, err = _train_and_test(wf, ds, n_train, cfg, tag)
    wf.stage2, wf.model_err2 = model, err
    if out_dir is not None:
        model.save(out_dir / "models" / tag)
        if wf.reports.get(tag) is not None:
            wf.reports[tag].write(out_dir / f"surrogate_{tag}", time_nodes=(0, n2 - 1))
    return model


# -- assimilation -----------------------------------------------------------

def _ledger_obs(wf: Workflow, ledger: np.ndarray) -> ObservationSet:
    n_t = ledger.shape[0]
    n1 = wf.n_stage1
    std1 = wf.obs_std(wf.model_err1)
    std2 = wf.obs_std(wf.model_err2) if n_t > n1 else std1
    std = np.vstack([np.tile(std1, (min(n_t, n1), 1))] + ([np.tile(std2, (n_t - n1, 1))]
                                                          if n_t > n1 else []))
    labels = [f"{c}@{t + 1}" for t in range(n_t) for c in _channel_labels(wf.setup)]
    return ObservationSet(ledger.ravel(), std.ravel(), labels)


def _forward(wf: Workflow, executed: ControlSchedule, n_obs_steps: int):
    n1 = wf.n_stage1
    head = wf.reference(n1).to_matrix()
    tail = None
    if n_obs_steps > n1:
        ex = executed.to_matrix()[n1:]
        n2 = wf.n_steps - n1
        pad = np.repeat(ex[-1:], n2 - ex.shape[0], axis=0)
        tail = np.vstack([ex, pad])

    def g(M):
        lnk = fields_from_coeffs(wf.basis, M)
        out = [predict_batch(wf.stage1, lnk, head)[:, :min(n1, n_obs_steps)]]
        if tail is not None:
            out.append(predict_batch(wf.stage2, lnk, tail)[:, :n_obs_steps - n1])
        out = np.concatenate(out, axis=1)
        return out.reshape(M.shape[0], -1)

    return g


def _assimilate(wf: Workflow, state: LoopState, tag: str):
    obs = _ledger_obs(wf, state.ledger)
    cfg = wf.setup.ies
    rng = rng_for(wf.cfg["seed"], f"ies-{tag}")
    ens, diag = assimilate(state.ensemble, obs, _forward(wf, state.executed,
                                                         state.ledger.shape[0]), cfg, rng=rng)
    return ens, diag


def run_stage1(wf: Workflow, oracle: TruthOracle, out_dir: Path | None = None) -> LoopState:
    """Constant controls for the stage-1 steps, then one assimilation."""
    if wf.stage1 is None:
        prepare_stage1(wf, out_dir)
    n1 = wf.n_stage1
    executed = wf.reference(n1)
    ledger = oracle.observe(executed, wf.noise_std)
    rng = rng_for(wf.cfg["seed"], "ensemble")
    m0 = rng.standard_normal((int(wf.cfg["ies"]["n_ensemble"]), wf.basis.n_modes))
    state = LoopState(n1, Ensemble(m0), ledger, executed)
    r0, s0 = oracle.score(m0, wf.basis)
    state.rmse.append(("prior", r0, s0))
    ens, diag = _assimilate(wf, state, "stage1")
    if diag.status == "stalled":
        raise RuntimeError("stage 1: IES stalled (lambda overflow without acceptance)")
    state.ensemble = ens
    r1, s1 = oracle.score(ens.members, wf.basis)
    state.rmse.append((f"step{n1}", r1, s1))
    if out_dir is not None:
        diag.write_csv(out_dir / "ies" / "stage1.csv")
    logger.info("stage 1: RMSE %.4f -> %.4f, spread %.4f -> %.4f", r0, r1, s0, s1)
    return state


def run_stage2_step(wf: Workflow, state: LoopState, oracle: TruthOracle,
                    out_dir: Path | None = None) -> LoopState:
    """Optimize all remaining steps, apply the first, re-assimilate."""
    n1, n_tot = wf.n_stage1, wf.n_steps
    if not n1 <= state.step < n_tot:
        raise ValueError(f"step {state.step} is outside stage 2 ({n1}..{n_tot - 1})")
    if wf.stage2 is None:
        raise RuntimeError("stage-2 surrogate not available")
    k = state.step - n1
    n_free = n_tot - state.step
    members = state.ensemble.members
    if oracle.holds_truth(members, wf.basis):
        raise RuntimeError("information leak: ensemble passed to the optimizer contains the truth")
    model = wf.stage2
    drives = latent_drive(model, encode(model, fields_from_coeffs(wf.basis, members)))
    frozen = state.executed.to_matrix()[n1:]
    fit = make_fitness(model, drives, frozen, n_free, wf, state.step * wf.step_days)
    de_cfg = _de_config(wf, n_free, f"de-step{state.step}")
    init = []
    if wf.cfg["de"]["seed_reference"]:
        init.append(wf.reference(n_free).to_vector())
    if wf.cfg["loop"]["warm_start"] and state.incumbent is not None:
        init.append(state.incumbent)
    res = de_run(de_cfg, fit, vectorized=True, init=np.array(init) if init else None)
    warn = []
    if res.best_violation > 0:
        warn.append("no robust-feasible schedule found; using the least-violating one")
        logger.warning("step %d: %s", state.step + 1, warn[-1])
    best = res.best_x.reshape(n_free, -1)
    state.incumbent = res.best_x[best.shape[1]:] if n_free > 1 else None
    # frac of members feasible for the chosen schedule
    ctrl = np.vstack([frozen, best])[None]
    obs_pred = rollout(model, drives, np.repeat(ctrl, drives.shape[0], axis=0))[:, k:]
    _, viol = npv_batch(obs_pred, np.repeat(ctrl, drives.shape[0], axis=0)[:, k:],
                        wf.setup.n_inj, wf.setup.n_prod, wf.setup.econ, wf.step_days,
                        state.step * wf.step_days)
    frac = float(np.mean(viol == 0))
    step_sched = ControlSchedule.from_matrix(best[:1], wf.setup.n_inj, wf.step_days)
    state.executed = state.executed.concat(step_sched)
    n_before = state.ledger.shape[0]
    state.ledger = oracle.observe(state.executed, wf.noise_std)
    assert state.ledger.shape[0] == n_before + 1
    ens, diag = _assimilate(wf, state, f"step{state.step + 1}")
    state.ensemble = ens
    rm, sp = oracle.score(ens.members, wf.basis)
    state.rmse.append((f"step{state.step + 1}", rm, sp))
    audit = StepAudit(state.step + 1, de_cfg.n_dims, best[0].tolist(),
                      state.ledger[-1].tolist(), rm, sp, float(-res.best_f), frac,
                      bool(res.best_violation == 0), float(res.best_violation), diag.status,
                      warn)
    state.audit.append(audit)
    if out_dir is not None:
        res.write_trace_csv(out_dir / "de" / f"step{state.step + 1:02d}.csv")
        diag.write_csv(out_dir / "ies" / f"step{state.step + 1:02d}.csv")
        (out_dir / "audit" / f"step{state.step + 1:02d}.json").write_text(
            json.dumps(audit.to_dict(), indent=2, sort_keys=True))
    logger.info("step %d: forecast NPV %.4g, RMSE %.4f, spread %.4f", state.step + 1,
                -res.best_f, rm, sp)
    state.step += 1
    return state


# -- baselines and reports --------------------------------------------------

def _repair(wf: Workflow, oracle: TruthOracle, s: ControlSchedule, n_head: int,
            rounds: int):
    """Push a random schedule towards the temperature floor.

    Each round, every producer that drops below the floor is set to the
    maximum BHP over the free steps. When all such producers are already
    there, the other producers' BHPs and all injection rates move a quarter
    of the way to their lower bounds. Stops at the first feasible schedule.
    """
    b, econ = wf.setup.bounds, wf.setup.econ
    inj, bhp = s.injector_rates.copy(), s.producer_bhps.copy()
    free = slice(n_head, None)
    for k in range(rounds + 1):
        s = ControlSchedule(inj, bhp, wf.step_days)
        series = oracle.run(s)
        res = npv(series, econ, wf.step_days)
        if res.feasible or k == rounds:
            return s, res, k
        cold = np.any(series.producer_temps < econ.critical_temperature, axis=0)
        if np.all(bhp[cold, free] == b.bhp_max):
            bhp[~cold, free] -= 0.25 * (bhp[~cold, free] - b.bhp_min)
            inj[:, free] -= 0.25 * (inj[:, free] - b.rate_min)
        bhp[cold, free] = b.bhp_max


def random_baseline(wf: Workflow, oracle: TruthOracle, n: int, head: ControlSchedule | None,
                    seed_name: str, repair_rounds: int = 10) -> list[dict]:
    """Simulate ``n`` random schedules on the truth (after the fixed ``head``).

    Uniform draws rarely satisfy the temperature floor, so each draw is
    repaired by :func:`_repair` (at most ``repair_rounds`` extra runs).
    ``repairs`` in each row counts the rounds used.
    """
    rng = rng_for(wf.cfg["seed"], seed_name)
    n_head = 0 if head is None else head.n_steps
    rows = []
    for i in range(n):
        s = random_schedule(rng, wf.setup.n_inj, wf.setup.n_prod, wf.n_steps - n_head,
                            wf.setup.bounds, wf.step_days)
        if head is not None:
            s = head.concat(s)
        s, b, k = _repair(wf, oracle, s, n_head, repair_rounds)
        rows.append({"index": i, "npv": b.total, "violation": b.violation,
                     "feasible": b.feasible, "repairs": k})
    return rows


def envelope_stats(wf: Workflow, prior: np.ndarray, final: np.ndarray,
                   schedule: ControlSchedule) -> dict:
    """Simulated predictions of both ensembles under the executed controls.

    Returns per-(step, channel) means/stds and the std ratio: for each
    channel the final-ensemble std averaged over steps divided by the prior
    one, then averaged over channels.
    """
    def sim(members):
        lnk = fields_from_coeffs(wf.basis, members)
        return np.array([simulate(wf.setup.spec, wf.setup.wells,
                                  PermField(wf.setup.grid, l), schedule).observed()
                         for l in lnk])

    a, b = sim(prior), sim(final)
    sa, sb = a.std(axis=0), b.std(axis=0)
    den = sa.mean(axis=0)
    ratio_c = np.divide(sb.mean(axis=0), den, out=np.zeros_like(den), where=den > 0)
    return {"prior_mean": a.mean(0), "prior_std": sa, "final_mean": b.mean(0),
            "final_std": sb, "ratio_per_channel": ratio_c, "ratio": float(ratio_c.mean())}


def _csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(float(v)) if
                              isinstance(v, (float, np.floating)) else str(v) for v in r))
    path.write_text("\n".join(lines) + "\n")


def _mkdirs(out: Path) -> None:
    for d in ("models", "audit", "de", "ies", "fields", "plots"):
        (out / d).mkdir(parents=True, exist_ok=True)


def run_full_loop(cfg: dict, out_dir, *, envelopes: bool = True) -> dict:
    """Stage 1, every stage-2 step, baselines and the final report."""
    out = Path(out_dir)
    _mkdirs(out)
    t_start = time.time()
    wf = make_workflow(cfg)
    truth = resolve_truth(wf)
    oracle = TruthOracle(wf.setup, truth, rng_for(cfg["seed"], "observation-noise"))
    del truth
    report: dict = {"status": "running"}
    state = None
    clock = _PhaseClock()
    try:
        with clock("stage1_surrogate"):
            prepare_stage1(wf, out)
        with clock("stage1_assimilation"):
            state = run_stage1(wf, oracle, out)
        with clock("stage2_surrogate"):
            prepare_stage2(wf, state.ensemble.members, out)
        with clock("stage2_loop"):
            while state.step < wf.n_steps:
                state = run_stage2_step(wf, state, oracle, out)
                if cfg["loop"]["retrain"] and state.step < wf.n_steps:
                    prepare_stage2(wf, state.ensemble.members, None,
                                   tag=f"stage2-{state.step}")
        report["status"] = "complete"
    except Exception as exc:  # partial report with failure marker
        logger.exception("closed loop failed")
        report["status"] = "failed"
        report["error"] = f"{type(exc).__name__}: {exc}"
    if state is not None:
        _write_outputs(wf, state, oracle, out, report, envelopes and
                       report["status"] == "complete", clock)
    report["elapsed_s"] = time.time() - t_start
    report["phase_s"] = clock.seconds
    if "stage2" in wf.reports:
        report["stage2_surrogate"] = wf.reports["stage2"].to_dict()
    manifest = {"toolkit": "geoclo", "version": __version__, "config": cfg,
                "config_hash": config_hash(cfg), "status": report["status"],
                "summary": {k: v for k, v in report.items() if k not in _TIMING_KEYS}}
    (out / "loop_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    emit_plots(out)
    return report


def _write_outputs(wf, state, oracle, out, report, envelopes, clock):
    _csv(out / "rmse_spread.csv", ["stage", "rmse", "spread"],
         [(tag, r, s) for tag, r, s in state.rmse])
    report["rmse"] = [r for _, r, _ in state.rmse]
    report["spread"] = [s for _, _, s in state.rmse]
    realized = None
    if state.executed.n_steps == wf.n_steps:
        series = oracle.run(state.executed)
        b = npv(series, wf.setup.econ, wf.step_days)
        realized = b.total
        (out / "realized_npv.csv").write_text(b.to_csv())
        (out / "executed_schedule.json").write_text(
            json.dumps(state.executed.to_dict(), indent=2, sort_keys=True))
        ref = oracle.realized_npv(wf.reference(wf.n_steps))
        with clock("baseline"):
            base = random_baseline(wf, oracle, int(wf.cfg["loop"]["n_random_baseline"]),
                                   wf.reference(wf.n_stage1), "loop-baseline")
        _csv(out / "baseline_npv.csv", ["index", "npv", "violation", "feasible", "repairs"],
             [(r["index"], r["npv"], r["violation"], int(r["feasible"]), r["repairs"])
              for r in base])
        feas = [r["npv"] for r in base if r["feasible"]]
        report.update({"realized_npv": realized, "realized_violation": b.violation,
                       "reference_npv": ref,
                       "random_max_feasible_npv": max(feas) if feas else None,
                       "random_max_npv": max(r["npv"] for r in base) if base else None,
                       "n_random": len(base), "n_random_feasible": len(feas)})
    rows = []
    for a in state.audit:
        rows.append((a.step, a.forecast_npv, a.feasible_fraction, a.rmse, a.spread))
    _csv(out / "npv_trace.csv", ["step", "forecast_npv", "feasible_fraction", "rmse", "spread"],
         rows)
    grid = wf.setup.grid
    pm, pv = field_stats(np.array(state.ensemble.prior), wf.basis)
    fm, fv = field_stats(state.ensemble.members, wf.basis)
    dummy = PermField(grid, fm)
    oracle.field_csv(out / "fields" / "truth.csv")
    field_to_csv(out / "fields" / "prior_mean.csv", dummy, pm, "lnk_mean")
    field_to_csv(out / "fields" / "prior_var.csv", dummy, pv, "lnk_var")
    field_to_csv(out / "fields" / "final_mean.csv", dummy, fm, "lnk_mean")
    field_to_csv(out / "fields" / "final_var.csv", dummy, fv, "lnk_var")
    if envelopes:
        with clock("envelopes"):
            env = envelope_stats(wf, np.array(state.ensemble.prior), state.ensemble.members,
                                 state.executed)
        labels = _channel_labels(wf.setup)
        truth_obs = oracle.run(state.executed).observed()
        rows = []
        for t in range(truth_obs.shape[0]):
            for c, name in enumerate(labels):
                rows.append((t + 1, name, truth_obs[t, c], state.ledger[t, c],
                             env["prior_mean"][t, c], env["prior_std"][t, c],
                             env["final_mean"][t, c], env["final_std"][t, c]))
        _csv(out / "envelopes.csv", ["step", "channel", "truth", "observed", "prior_mean",
                                     "prior_std", "final_mean", "final_std"], rows)
        report["envelope_ratio"] = env["ratio"]
        report["envelope_ratio_per_channel"] = env["ratio_per_channel"].tolist()


_TIMING_KEYS = ("elapsed_s", "phase_s")


class _PhaseClock:
    """Wall-clock seconds per named phase (kept out of manifests)."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0


# -- known-field optimization ------------------------------------------------

def optimize_known_field(cfg: dict, out_dir, field_lnk: PermField | None = None) -> dict:
    """Optimize a full schedule when the field is known.

    A control-only surrogate is trained on random schedules for the known
    field, DE maximizes its NPV, and the result is checked on the simulator
    against the constant reference and a batch of random schedules.
    """
    out = Path(out_dir)
    _mkdirs(out)
    wf = make_workflow(cfg)
    fld = field_lnk if field_lnk is not None else resolve_truth(wf)
    n_t = wf.n_steps
    n_train, n_test = int(cfg["dataset"]["n_train"]), int(cfg["dataset"]["n_test"])
    rng = rng_for(cfg["seed"], "known-data")
    scheds = [random_schedule(rng, wf.setup.n_inj, wf.setup.n_prod, n_t, wf.setup.bounds,
                              wf.step_days) for _ in range(n_train + n_test)]
    clock = _PhaseClock()
    with clock("dataset"):
        ds = generate_dataset(wf.setup.spec, wf.setup.wells, [fld], scheds,
                              seed=seed_for(cfg["seed"], "known-data"))
    scfg = wf.surrogate_config(n_t, True, cfg["surrogate"]["epochs"], "known-model")
    with clock("surrogate"):
        model, _ = _train_and_test(wf, ds, n_train, scfg, "known")
    model.save(out / "models" / "known")
    if wf.reports.get("known") is not None:
        wf.reports["known"].write(out / "surrogate_known", time_nodes=(0, n_t - 1))
    drives = latent_drive(model, encode(model, fld.lnk[None]))
    de_cfg = _de_config(wf, n_t, "de-known")
    init = np.array([wf.reference(n_t).to_vector()]) if cfg["de"]["seed_reference"] else None
    spec, wells, econ = wf.setup.spec, wf.setup.wells, wf.setup.econ
    # DE on the surrogate, verified on the simulator. A producer that breaks
    # the floor on the simulator gets its surrogate floor raised by the
    # shortfall and DE is rerun.
    margin = np.zeros(wf.setup.n_prod)
    rounds = []
    with clock("de"):
        for r in range(int(cfg["de"]["verify_rounds"]) + 1):
            fit = make_fitness(model, drives, np.zeros((0, scfg.n_controls)), n_t, wf, 0.0,
                               margin=margin)
            res = de_run(de_cfg, fit, vectorized=True, init=init)
            best = ControlSchedule.from_vector(res.best_x, wf.setup.n_inj, wf.setup.n_prod,
                                               wf.step_days)
            series = simulate(spec, wells, fld, best)
            b_opt = npv(series, econ, wf.step_days)
            rounds.append((r, *margin, -res.best_f, res.best_violation, b_opt.total,
                           b_opt.violation))
            if b_opt.feasible:
                break
            shortfall = econ.critical_temperature - series.producer_temps.min(axis=0)
            margin = margin + np.maximum(shortfall, 0.0)
    if not b_opt.feasible:
        logger.warning("optimized schedule still breaks the temperature floor after %d "
                       "verification rounds", len(rounds) - 1)
    res.write_trace_csv(out / "de" / "convergence.csv")
    _csv(out / "de" / "verification.csv",
         ["round", *(f"margin_P{i + 1}" for i in range(wf.setup.n_prod)), "surrogate_npv",
          "surrogate_violation", "truth_npv", "truth_violation"], rounds)
    b_ref = npv(simulate(spec, wells, fld, wf.reference(n_t)), econ, wf.step_days)
    oracle = TruthOracle(wf.setup, fld, np.random.default_rng(0))
    with clock("baseline"):
        base = random_baseline(wf, oracle, int(cfg["loop"]["n_random_baseline"]), None,
                               "known-baseline")
    feas = [r["npv"] for r in base if r["feasible"]]
    res.write_best_json(out / "best.json", {"schedule": best.to_dict(),
                                             "truth_npv": b_opt.total})
    _csv(out / "baseline_npv.csv", ["index", "npv", "violation", "feasible", "repairs"],
         [(r["index"], r["npv"], r["violation"], int(r["feasible"]), r["repairs"])
          for r in base])
    report = {"status": "complete", "surrogate_npv": -res.best_f,
              "surrogate_violation": res.best_violation, "truth_npv": b_opt.total,
              "truth_violation": b_opt.violation, "reference_npv": b_ref.total,
              "verify_rounds": len(rounds) - 1, "margin": margin.tolist(),
              "random_max_feasible_npv": max(feas) if feas else None,
              "n_random": len(base), "n_random_feasible": len(feas),
              "surrogate_min_r2": (min(wf.reports["known"].r2)
                                   if wf.reports.get("known") else None)}
    manifest = {"toolkit": "geoclo", "version": __version__, "config": cfg,
                "config_hash": config_hash(cfg), "status": "complete", "summary": report}
    report = dict(report, phase_s=clock.seconds)
    (out / "optimize_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    emit_plots(out)
    return report

"""Command-line entry points.

Every subcommand reads ``--config`` (JSON) plus ``--set key=value``
overrides, writes only under ``--out`` and finishes by writing
``run_manifest.json`` atomically. Exit status: 0 success, 2 invalid
configuration or input, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_setup, config_hash, load_config, rng_for, seed_for

__all__ = ["main", "build_parser", "write_manifest", "verify_run", "MANIFEST", "InputError"]

logger = logging.getLogger("geoclo")

MANIFEST = "run_manifest.json"
TIMING = "timing.json"
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class InputError(ValueError):
    """A required input artifact is missing or malformed."""


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact_hashes(out: Path) -> dict[str, str]:
    skip = {MANIFEST, TIMING}
    return {p.relative_to(out).as_posix(): _sha256(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.relative_to(out).as_posix() not in skip}


def _atomic_json(path: Path, doc: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict[str, Path],
                   status: str, started: str, error: str | None = None) -> dict:
    """Manifest of a finished run; wall-clock times go to ``timing.json``
    so the manifest itself is reproducible."""
    doc = {
        "toolkit": "geoclo", "version": __version__, "command": command,
        "config": cfg, "config_hash": config_hash(cfg),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())
                   if p is not None and Path(p).is_file()},
        "artifacts": _artifact_hashes(out), "status": status, "timing": TIMING,
    }
    if error:
        doc["error"] = error
    _atomic_json(out / TIMING, {"started": started, "finished": _now()})
    _atomic_json(out / MANIFEST, doc)
    return doc


def verify_run(run_dir) -> list[str]:
    """Problems found when re-hashing a run directory (empty if intact)."""
    run = Path(run_dir)
    p = run / MANIFEST
    if not p.exists():
        raise InputError(f"{p}: manifest not found")
    doc = json.loads(p.read_text())
    problems = []
    if doc.get("config_hash") != config_hash(doc.get("config", {})):
        problems.append("config_hash does not match the echoed config")
    for rel, h in doc.get("artifacts", {}).items():
        f = run / rel
        if not f.exists():
            problems.append(f"{rel}: missing")
        elif _sha256(f) != h:
            problems.append(f"{rel}: hash mismatch")
    listed = set(doc.get("artifacts", {}))
    for rel in _artifact_hashes(run):
        if rel not in listed:
            problems.append(f"{rel}: not listed in manifest")
    if doc.get("status") != "complete":
        problems.append(f"run status is {doc.get('status')!r}")
    return problems


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _require(path, what: str) -> Path:
    if path is None:
        raise InputError(f"{what}: path required")
    p = Path(path)
    if not p.exists() and not p.with_suffix(".json").exists():
        raise InputError(f"{what}: expected {p}")
    return p


# -- subcommands ---------------------------------------------------------------

def _basis(setup):
    from .grid_field import build_kle_basis
    k = setup.cfg["kle"]
    return build_kle_basis(setup.grid, k["mean"], k["sigma"], k["corr_len_x"],
                           k["corr_len_y"], k["energy_fraction"], k["max_modes"])


def _load_field(args, setup, basis):
    from .grid_field import load_field, sample_field
    if args.field:
        fld = load_field(_require(args.field, "--field"))
        if fld.grid != setup.grid:
            raise InputError(f"{args.field}: field grid differs from the configured grid")
        return fld
    rng = rng_for(setup.cfg["loop"]["truth_seed"], "truth")
    return sample_field(basis, rng.standard_normal(basis.n_modes))


def cmd_gen_fields(args, cfg, out, inputs):
    from .grid_field import save_field, field_to_csv, sample_field
    setup = build_setup(cfg)
    basis = _basis(setup)
    rng = rng_for(cfg["seed"], "gen-fields")
    xi = rng.standard_normal((args.count, basis.n_modes))
    (out / "fields").mkdir(exist_ok=True)
    for i, c in enumerate(xi):
        fld = sample_field(basis, c)
        save_field(out / "fields" / f"field_{i:04d}", fld, mean=cfg["kle"]["mean"],
                   sigma=cfg["kle"]["sigma"], seed=seed_for(cfg["seed"], "gen-fields"))
        field_to_csv(out / "fields" / f"field_{i:04d}.csv", fld)
    np.savetxt(out / "coefficients.csv", xi, delimiter=",", fmt="%.17g")
    logger.info("wrote %d fields with %d KLE modes", args.count, basis.n_modes)


def _schedule(args, setup):
    from .simulator import ControlSchedule, constant_schedule
    c = setup.cfg["controls"]
    if args.schedule:
        s = ControlSchedule.from_dict(json.loads(_require(args.schedule, "--schedule").read_text()))
        s.check_bounds(setup.bounds)
        return s
    return constant_schedule(setup.n_inj, setup.n_prod, c["n_steps"], c["ref_rate"],
                             c["ref_bhp"], c["step_days"])


def cmd_simulate(args, cfg, out, inputs):
    from .economics import npv
    from .simulator import mass_balance_residual, simulate
    setup = build_setup(cfg)
    fld = _load_field(args, setup, _basis(setup))
    inputs["field"] = args.field and Path(args.field).with_suffix(".bin")
    inputs["schedule"] = args.schedule and Path(args.schedule)
    sched = _schedule(args, setup)
    series, diag = simulate(setup.spec, setup.wells, fld, sched, diagnostics=True)
    (out / "series.csv").write_text(series.to_csv(setup.wells))
    b = npv(series, setup.econ, sched.step_days)
    (out / "npv.json").write_text(b.to_json())
    (out / "npv.csv").write_text(b.to_csv())
    _, rel = mass_balance_residual(diag)
    (out / "diagnostics.json").write_text(json.dumps(
        {"mass_balance_relative": rel, "t_min": float(min(diag.t_min)), "t_max": float(max(diag.t_max))},
        indent=2, sort_keys=True))
    logger.info("NPV %.6g, violation %.3g, mass-balance residual %.2e", b.total, b.violation, rel)


def cmd_gen_dataset(args, cfg, out, inputs):
    from .grid_field import PermField, fields_from_coeffs
    from .simulator import generate_dataset, random_schedule
    setup = build_setup(cfg)
    basis = _basis(setup)
    n = cfg["dataset"]["n_train"] + cfg["dataset"]["n_test"]
    rng = rng_for(cfg["seed"], "gen-dataset")
    c = cfg["controls"]
    if args.field or args.known_field:
        fields = [_load_field(args, setup, basis)]
    else:
        xi = rng.standard_normal((n, basis.n_modes))
        fields = [PermField(setup.grid, l) for l in fields_from_coeffs(basis, xi)]
    scheds = [random_schedule(rng, setup.n_inj, setup.n_prod, c["n_steps"], setup.bounds,
                              c["step_days"]) for _ in range(n)]
    ds = generate_dataset(setup.spec, setup.wells, fields, scheds,
                          seed=seed_for(cfg["seed"], "gen-dataset"), out_dir=out / "dataset")
    logger.info("dataset: %d samples, %d skipped", len(ds), len(ds.skipped))


def _dataset(path):
    from .simulator import load_dataset
    return load_dataset(_require(path, "--dataset"))


def cmd_train(args, cfg, out, inputs):
    from .closed_loop import make_workflow
    from .surrogate import evaluate, train
    ds = _dataset(args.dataset)
    wf = make_workflow(cfg)
    n_train = min(cfg["dataset"]["n_train"], len(ds))
    scfg = wf.surrogate_config(ds.controls.shape[1], not args.no_controls,
                               cfg["surrogate"]["epochs"], "train")
    model = train(ds.subset(np.arange(n_train)), scfg)
    model.save(out / "model")
    lines = ["epoch,recon,seque,total"]
    h = model.history
    lines += [f"{i + 1},{a!r},{b!r},{c!r}" for i, (a, b, c) in
              enumerate(zip(h["recon"], h["seque"], h["total"]))]
    (out / "history.csv").write_text("\n".join(lines) + "\n")
    if len(ds) > n_train:
        rep = evaluate(model, ds.subset(np.arange(n_train, len(ds))))
        rep.write(out / "evaluation", time_nodes=(0, ds.controls.shape[1] - 1))
        logger.info("held-out R2 min %.4f", min(rep.r2))


def cmd_evaluate(args, cfg, out, inputs):
    from .surrogate import SurrogateModel, evaluate
    model = SurrogateModel.load(_require(args.model, "--model"))
    ds = _dataset(args.dataset)
    idx = np.arange(cfg["dataset"]["n_train"], len(ds)) if args.held_out else np.arange(len(ds))
    rep = evaluate(model, ds.subset(idx))
    rep.write(out, time_nodes=(0, ds.controls.shape[1] - 1))
    logger.info("R2 per channel: %s", np.round(rep.r2, 4).tolist())


def cmd_optimize(args, cfg, out, inputs):
    from .closed_loop import make_workflow, optimize_known_field
    fld = None
    if args.field:
        fld = _load_field(args, build_setup(cfg), make_workflow(cfg).basis)
    rep = optimize_known_field(cfg, out, fld)
    logger.info("truth NPV %.6g (reference %.6g, best random %s)", rep["truth_npv"],
                rep["reference_npv"], rep["random_max_feasible_npv"])


def cmd_assimilate(args, cfg, out, inputs):
    from .closed_loop import (TruthOracle, make_workflow, prepare_stage1, resolve_truth,
                              run_stage1)
    from .ies import save_ensemble
    wf = make_workflow(cfg)
    truth = _load_field(args, wf.setup, wf.basis) if args.field else resolve_truth(wf)
    oracle = TruthOracle(wf.setup, truth, rng_for(cfg["seed"], "observation-noise"))
    for d in ("models", "ies"):
        (out / d).mkdir(exist_ok=True)
    prepare_stage1(wf, out)
    state = run_stage1(wf, oracle, out)
    save_ensemble(out / "ensemble", state.ensemble)
    (out / "rmse_spread.csv").write_text(
        "stage,rmse,spread\n" + "".join(f"{t},{r!r},{s!r}\n" for t, r, s in state.rmse))


def cmd_loop(args, cfg, out, inputs):
    from .closed_loop import run_full_loop
    rep = run_full_loop(cfg, out, envelopes=not args.no_envelopes)
    if rep["status"] != "complete":
        raise RuntimeError(rep.get("error", "closed loop failed"))


def cmd_report(args, cfg, out, inputs):
    from .plots import emit_plots
    run = _require(args.run, "--run")
    written, skipped = emit_plots(run, out_dir=out)
    (out / "plots_index.txt").write_text(
        "".join(f"written {p.relative_to(out).as_posix()}\n" for p in written)
        + "".join(f"skipped {s}\n" for s in skipped))


COMMANDS = {
    "gen-fields": cmd_gen_fields, "simulate": cmd_simulate, "gen-dataset": cmd_gen_dataset,
    "train": cmd_train, "evaluate": cmd_evaluate, "optimize": cmd_optimize,
    "assimilate": cmd_assimilate, "loop": cmd_loop, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoclo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"geoclo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON configuration file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration value (repeatable)")
        s.add_argument("--out", required=name != "verify", help="output directory")
        s.add_argument("--desk", action="store_true", help="start from the 16x16 desk defaults")
        s.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    add("gen-fields", "sample KLE permeability fields").add_argument(
        "--count", type=int, default=10)
    s = add("simulate", "run the simulator on one field and schedule")
    s.add_argument("--field")
    s.add_argument("--schedule")
    s = add("gen-dataset", "simulate random schedules on prior (or one known) field(s)")
    s.add_argument("--field")
    s.add_argument("--known-field", action="store_true",
                   help="use the configured truth field for every sample")
    s = add("train", "train a surrogate on a saved dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--no-controls", action="store_true", help="field-only surrogate")
    s = add("evaluate", "score a surrogate against simulator runs")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--held-out", action="store_true",
                   help="use only samples after dataset.n_train")
    s = add("optimize", "known-field schedule optimization with simulator verification")
    s.add_argument("--field")
    s = add("assimilate", "stage-1 assimilation with constant controls")
    s.add_argument("--field")
    s = add("loop", "full two-stage closed loop")
    s.add_argument("--no-envelopes", action="store_true")
    s = add("report", "render SVG plots from a run directory")
    s.add_argument("--run", required=True)
    s = add("verify", "re-hash a run directory against its manifest")
    s.add_argument("run", nargs="?", help="run directory (defaults to --out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "verify":
        target = args.run or args.out
        if target is None:
            print("verify: run directory required", file=sys.stderr)
            return EXIT_INVALID
        try:
            problems = verify_run(target)
        except InputError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        for p in problems:
            print(p)
        print("ok" if not problems else f"{len(problems)} problem(s)")
        return EXIT_OK if not problems else EXIT_RUNTIME
    try:
        cfg = load_config(args.config, args.set, desk=args.desk)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    inputs = {"config": Path(args.config) if args.config else None}
    ctx = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=args.threads)
    try:
        COMMANDS[args.command](args, cfg, out, inputs)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        write_manifest(out, args.command, cfg, inputs, "invalid", started, str(exc))
        return EXIT_INVALID
    except Exception as exc:
        logger.exception("%s failed", args.command)
        write_manifest(out, args.command, cfg, inputs, "failed", started,
                       f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    finally:
        if ctx is not None:
            ctx.unregister()
    write_manifest(out, args.command, cfg, inputs, "complete", started)
    return EXIT_OK

"""Run configuration: defaults, overrides, validation and seed splitting.

A configuration is a nested JSON document. :data:`DEFAULTS` holds the
baseline values; :func:`desk_overrides` shrinks the problem to the 16x16
desk scale used for fast runs. Unknown keys are rejected, and every
validation error names the offending field path.
"""
from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .de_optimizer import CONSTRAINTS, STRATEGIES
from .economics import EconSpec
from .grid_field import GridSpec
from .ies import IesConfig
from .simulator import (DEFAULT_INJECTOR_POS, DEFAULT_PRODUCER_POS, ControlBounds,
                        ReservoirSpec, default_wells)

__all__ = [
    "DEFAULTS", "ConfigError", "default_config", "desk_overrides", "merge", "apply_set",
    "parse_set", "validate", "load_config", "config_hash", "seed_for", "rng_for", "Setup",
    "build_setup",
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the field path."""


DEFAULTS: dict = {
    "seed": 0,
    "grid": {"nx": 61, "ny": 61, "length_x": 1220.0, "length_y": 1220.0, "thickness": 30.0},
    "reservoir": {
        "porosity": 0.1, "rock_heat_capacity": 2.7e6, "fluid_density": 1000.0,
        "fluid_heat_capacity": 4200.0, "fluid_viscosity": 2.5e-4,
        "fluid_compressibility": 4.5e-10, "therm_cond_water": 0.6, "therm_cond_rock": 2.0,
        "init_pressure": 380.0, "init_temperature": 200.0, "injection_temperature": 20.0,
        "substeps": 10,
    },
    "wells": {
        "injectors": [list(p) for p in DEFAULT_INJECTOR_POS],
        "producers": [list(p) for p in DEFAULT_PRODUCER_POS],
    },
    "controls": {
        "n_steps": 25, "step_days": 150.0, "rate_min": 1100.0, "rate_max": 1300.0,
        "bhp_min": 230.0, "bhp_max": 250.0, "ref_rate": 1200.0, "ref_bhp": 240.0,
    },
    "kle": {"mean": 3.6, "sigma": 1.0, "corr_len_x": 305.0, "corr_len_y": 305.0,
            "energy_fraction": 0.95, "max_modes": 200},
    "surrogate": {
        "latent_dim": 32, "enc_channels": [8, 16, 32], "kernel": 3, "lstm_hidden": 64,
        "activation": "tanh", "recon_weight": 1.0, "weight_decay": 0.0,
        "epochs": 2000, "epochs_stage1": 3000, "learning_rate": 1e-3, "batch_size": 32,
    },
    "dataset": {"n_train": 500, "n_test": 100},
    "de": {"n_ind": 300, "g_max": 1000, "F": 0.5, "Cr": 0.7, "strategy": "rand1",
           "constraint": "feasibility", "penalty_weight": 1e6, "seed_reference": True,
           "verify_rounds": 10},
    "ies": {"n_ensemble": 1000, "max_iter": 10, "lambda_init": 10.0, "lambda_decrease": 2.0,
            "lambda_increase": 4.0, "tol": 1e-3, "noise_rel": 0.02, "noise_temp": 1.0,
            "model_error": True},
    "economics": {"energy_price": 40.0, "water_prod_cost": 0.5, "water_inj_cost": 0.5,
                  "discount_rate": 0.05, "critical_temperature": 130.0,
                  "feasible_fraction": 0.9},
    "loop": {"n_stage1": 8, "truth_seed": 1, "truth_path": None, "n_train_stage1": 500,
             "n_train_stage2": 1000, "n_test": 100, "stage1_checkpoint": None,
             "stage2_checkpoint": None, "retrain": False, "warm_start": False,
             "n_random_baseline": 1000},
}


def desk_overrides() -> dict:
    """16x16 desk-scale settings (runs in minutes on one core)."""
    return {
        "grid": {"nx": 16, "ny": 16},
        "reservoir": {"rock_heat_capacity": 3.4e6},
        "surrogate": {"epochs": 600, "epochs_stage1": 600, "recon_weight": 0.01},
        "dataset": {"n_train": 200, "n_test": 50},
        "de": {"n_ind": 30, "g_max": 150},
        "ies": {"n_ensemble": 100},
        "loop": {"n_train_stage1": 500, "n_train_stage2": 200, "n_test": 50,
                 "n_random_baseline": 200},
    }


def default_config(desk: bool = False) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    return merge(cfg, desk_overrides()) if desk else cfg


def merge(base: dict, over: dict, path: str = "") -> dict:
    """Recursively overlay ``over`` onto a copy of ``base``; unknown keys fail."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"{p}: unknown configuration key")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{p}: expected a section (object), got {type(v).__name__}")
            out[k] = merge(out[k], v, p)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_set(expr: str) -> tuple[list[str], object]:
    """Split ``a.b.c=value``; the value is parsed as JSON, else kept as text."""
    if "=" not in expr:
        raise ConfigError(f"{expr}: --set expects key=value")
    key, raw = expr.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def apply_set(cfg: dict, exprs) -> dict:
    out = copy.deepcopy(cfg)
    for e in exprs or ():
        keys, val = parse_set(e)
        node = out
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"{'.'.join(keys[:i + 1])}: unknown configuration section")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"{'.'.join(keys)}: unknown configuration key")
        node[keys[-1]] = val
    return out


# -- validation -------------------------------------------------------------

def _num(cfg, path, lo=None, hi=None, integer=False, lo_open=False):
    node = cfg
    for k in path.split("."):
        node = node[k]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {node!r}")
    if integer and int(node) != node:
        raise ConfigError(f"{path}: expected an integer, got {node!r}")
    if lo is not None and (node <= lo if lo_open else node < lo):
        raise ConfigError(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {node}")
    if hi is not None and node > hi:
        raise ConfigError(f"{path}: must be <= {hi}, got {node}")


def validate(cfg: dict) -> dict:
    """Check types and ranges; returns ``cfg`` unchanged on success."""
    merge(DEFAULTS, cfg)  # rejects unknown keys
    _num(cfg, "seed", 0, integer=True)
    for k in ("nx", "ny"):
        _num(cfg, f"grid.{k}", 2, integer=True)
    for k in ("length_x", "length_y", "thickness"):
        _num(cfg, f"grid.{k}", 0, lo_open=True)
    _num(cfg, "reservoir.porosity", 0, 1, lo_open=True)
    for k in ("rock_heat_capacity", "fluid_density", "fluid_heat_capacity",
              "fluid_viscosity", "fluid_compressibility", "therm_cond_water",
              "therm_cond_rock", "init_pressure"):
        _num(cfg, f"reservoir.{k}", 0, lo_open=True)
    _num(cfg, "reservoir.substeps", 1, integer=True)
    for kind in ("injectors", "producers"):
        pos = cfg["wells"][kind]
        if not isinstance(pos, list) or not pos:
            raise ConfigError(f"wells.{kind}: expected a non-empty list of [fx, fy]")
        for i, p in enumerate(pos):
            if (not isinstance(p, list) or len(p) != 2
                    or not all(isinstance(v, (int, float)) and 0 <= v <= 1 for v in p)):
                raise ConfigError(f"wells.{kind}[{i}]: expected [fx, fy] within [0, 1]")
    c = cfg["controls"]
    _num(cfg, "controls.n_steps", 1, integer=True)
    _num(cfg, "controls.step_days", 0, lo_open=True)
    for k in ("rate_min", "rate_max", "bhp_min", "bhp_max", "ref_rate", "ref_bhp"):
        _num(cfg, f"controls.{k}", 0)
    if c["rate_min"] > c["rate_max"]:
        raise ConfigError("controls.rate_min: exceeds controls.rate_max")
    if c["bhp_min"] > c["bhp_max"]:
        raise ConfigError("controls.bhp_min: exceeds controls.bhp_max")
    _num(cfg, "kle.sigma", 0)
    _num(cfg, "kle.corr_len_x", 0, lo_open=True)
    _num(cfg, "kle.corr_len_y", 0, lo_open=True)
    _num(cfg, "kle.energy_fraction", 0, 1, lo_open=True)
    _num(cfg, "kle.max_modes", 1, integer=True)
    s = cfg["surrogate"]
    for k in ("latent_dim", "kernel", "lstm_hidden", "batch_size"):
        _num(cfg, f"surrogate.{k}", 1, integer=True)
    for k in ("epochs", "epochs_stage1"):
        _num(cfg, f"surrogate.{k}", 0, integer=True)
    _num(cfg, "surrogate.learning_rate", 0, lo_open=True)
    _num(cfg, "surrogate.recon_weight", 0)
    _num(cfg, "surrogate.weight_decay", 0)
    if s["activation"] not in ("tanh", "relu"):
        raise ConfigError(f"surrogate.activation: expected tanh or relu, got {s['activation']!r}")
    _num(cfg, "dataset.n_train", 1, integer=True)
    _num(cfg, "dataset.n_test", 0, integer=True)
    d = cfg["de"]
    _num(cfg, "de.n_ind", 4, integer=True)
    _num(cfg, "de.g_max", 0, integer=True)
    _num(cfg, "de.F", 0)
    _num(cfg, "de.Cr", 0, 1, lo_open=True)
    _num(cfg, "de.verify_rounds", 0, integer=True)
    if d["strategy"] not in STRATEGIES:
        raise ConfigError(f"de.strategy: expected one of {STRATEGIES}, got {d['strategy']!r}")
    if d["constraint"] not in CONSTRAINTS:
        raise ConfigError(f"de.constraint: expected one of {CONSTRAINTS}")
    _num(cfg, "ies.n_ensemble", 2, integer=True)
    _num(cfg, "ies.max_iter", 0, integer=True)
    _num(cfg, "ies.lambda_init", 0, lo_open=True)
    _num(cfg, "ies.lambda_decrease", 1, lo_open=True)
    _num(cfg, "ies.lambda_increase", 1, lo_open=True)
    _num(cfg, "ies.noise_rel", 0, lo_open=True)
    _num(cfg, "ies.noise_temp", 0, lo_open=True)
    for k in ("energy_price", "water_prod_cost", "water_inj_cost", "discount_rate"):
        _num(cfg, f"economics.{k}", 0)
    _num(cfg, "economics.feasible_fraction", 0, 1)
    lp = cfg["loop"]
    _num(cfg, "loop.n_stage1", 1, integer=True)
    if lp["n_stage1"] >= c["n_steps"]:
        raise ConfigError("loop.n_stage1: must be smaller than controls.n_steps")
    for k in ("n_train_stage1", "n_train_stage2"):
        _num(cfg, f"loop.{k}", 1, integer=True)
    _num(cfg, "loop.n_random_baseline", 0, integer=True)
    _num(cfg, "loop.truth_seed", 0, integer=True)
    return cfg


def load_config(path=None, sets=None, desk: bool = False) -> dict:
    """Defaults, then the JSON file at ``path``, then ``--set`` overrides."""
    cfg = default_config(desk)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        cfg = merge(cfg, doc)
    cfg = apply_set(cfg, sets)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- seeds ------------------------------------------------------------------

def seed_for(global_seed: int, component: str) -> int:
    """32-bit seed for ``component``: SeedSequence of (seed, crc32(name))."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(global_seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(global_seed, component))


# -- concrete objects -------------------------------------------------------

@dataclass(eq=False)
class Setup:
    grid: GridSpec
    spec: ReservoirSpec
    wells: list
    bounds: ControlBounds
    econ: EconSpec
    ies: IesConfig
    cfg: dict

    @property
    def n_inj(self) -> int:
        return sum(w.kind == "injector" for w in self.wells)

    @property
    def n_prod(self) -> int:
        return sum(w.kind == "producer" for w in self.wells)


def build_setup(cfg: dict) -> Setup:
    g = cfg["grid"]
    grid = GridSpec(int(g["nx"]), int(g["ny"]), g["length_x"] / g["nx"], g["length_y"] / g["ny"],
                    float(g["thickness"]))
    spec = ReservoirSpec(grid, **cfg["reservoir"])
    wells = default_wells(grid, [tuple(p) for p in cfg["wells"]["injectors"]],
                          [tuple(p) for p in cfg["wells"]["producers"]])
    c = cfg["controls"]
    bounds = ControlBounds(c["rate_min"], c["rate_max"], c["bhp_min"], c["bhp_max"])
    r = cfg["reservoir"]
    econ = EconSpec(fluid_density=r["fluid_density"],
                    fluid_heat_capacity=r["fluid_heat_capacity"],
                    injection_temperature=r["injection_temperature"], **cfg["economics"])
    i = cfg["ies"]
    ies = IesConfig(max_iter=i["max_iter"], lambda_init=i["lambda_init"],
                    lambda_decrease=i["lambda_decrease"], lambda_increase=i["lambda_increase"],
                    tol=i["tol"], seed=seed_for(cfg["seed"], "ies"))
    return Setup(grid, spec, wells, bounds, econ, ies, cfg)

"""Differential evolution over a bounded box.

Minimization throughout; maximize by returning the negated objective.
A fitness function may return a bare value or ``(value, violation)``,
where ``violation >= 0`` is the total constraint violation (0 means
feasible). With ``vectorized=True`` it receives the whole trial matrix of
a generation and returns arrays, which lets a surrogate evaluate a
generation in one batch.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DeConfig", "Population", "DeResult", "initialize", "mutate", "crossover",
    "select", "better", "run", "reflect", "sample_indices",
]

logger = logging.getLogger(__name__)

STRATEGIES = ("rand1", "best1", "target1")
CONSTRAINTS = ("feasibility", "penalty")


@dataclass
class DeConfig:
    """``strategy``: rand1 ``x_r1 + F(x_r2 - x_r3)``, best1 ``x_best + F(x_r1 - x_r2)``,
    target1 ``x_i + F(x_r1 - x_r2)``.

    ``constraint``: ``"feasibility"`` (feasible beats infeasible, smaller
    violation beats larger) or ``"penalty"`` (compare
    ``f + penalty_weight * violation**2``).
    """

    lower: np.ndarray
    upper: np.ndarray
    n_ind: int = 300
    F: float = 0.5
    Cr: float = 0.7
    strategy: str = "rand1"
    g_max: int = 1000
    seed: int = 0
    constraint: str = "feasibility"
    penalty_weight: float = 1e6

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper must be 1-D and equally long")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not 0.0 < self.Cr <= 1.0:
            raise ValueError(f"Cr must be in (0, 1], got {self.Cr}")
        if self.F < 0:
            raise ValueError(f"F must be non-negative, got {self.F}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint rule {self.constraint!r}")
        need = 4 if self.strategy == "rand1" else 3
        if self.n_ind < need:
            raise ValueError(f"{self.strategy} needs n_ind >= {need}, got {self.n_ind}")
        if self.g_max < 0:
            raise ValueError("g_max must be non-negative")

    @property
    def n_dims(self) -> int:
        return self.lower.size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lower"] = self.lower.tolist()
        d["upper"] = self.upper.tolist()
        return d


@dataclass
class Population:
    individuals: np.ndarray
    fitness: np.ndarray
    violation: np.ndarray
    generation: int = 0
    best_x: np.ndarray | None = None
    best_f: float = math.inf
    best_v: float = math.inf

    def update_best(self, rule: str, weight: float) -> None:
        for i in range(self.fitness.size):
            if self.best_x is None or better(self.fitness[i], self.violation[i],
                                             self.best_f, self.best_v, rule, weight,
                                             strict=True):
                self.best_x = self.individuals[i].copy()
                self.best_f = float(self.fitness[i])
                self.best_v = float(self.violation[i])


@dataclass
class DeResult:
    best_x: np.ndarray
    best_f: float
    best_violation: float
    trace: list[dict] = field(default_factory=list)
    population: Population | None = None
    n_evals: int = 0

    def write_trace_csv(self, path) -> None:
        cols = ["generation", "best", "mean", "worst", "feasible_fraction", "best_violation"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.trace:
                w.writerow([row["generation"]] + [repr(float(row[c])) for c in cols[1:]])

    def write_best_json(self, path, extra: dict | None = None) -> None:
        doc = {"best_x": self.best_x.tolist(), "best_fitness": self.best_f,
               "best_violation": self.best_violation, "n_evals": self.n_evals,
               "generations": len(self.trace) - 1}
        doc.update(extra or {})
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


# -- primitives --------------------------------------------------------------

def reflect(v: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Fold out-of-bounds components back into ``[lower, upper]``."""
    v = np.asarray(v, dtype=float)
    width = upper - lower
    out = np.array(v, copy=True)
    bad = (v < lower) | (v > upper)
    if not bad.any():
        return out
    w = np.where(width > 0, width, 1.0)
    t = np.mod(v - lower, 2.0 * w)
    folded = lower + np.where(t <= w, t, 2.0 * w - t)
    folded = np.where(width > 0, folded, lower)
    out[bad] = folded[bad]
    return out


def sample_indices(rng: np.random.Generator, n: int, exclude: int, k: int) -> np.ndarray:
    """``k`` distinct indices from ``range(n)`` without ``exclude``."""
    idx = rng.choice(n - 1, size=k, replace=False)
    return idx + (idx >= exclude)


def _as_pair(res):
    if isinstance(res, tuple):
        f, v = res
    else:
        f, v = res, 0.0
    return f, v


def _clean(f, v, generation):
    f = np.asarray(f, dtype=float).copy()
    v = np.broadcast_to(np.asarray(v, dtype=float), f.shape).copy()
    nan = np.isnan(f)
    if nan.any():
        logger.warning("generation %d: %d NaN fitness values treated as +inf",
                       generation, int(nan.sum()))
        f[nan] = np.inf
    v[np.isnan(v)] = np.inf
    if np.any(v < 0):
        raise ValueError("constraint violation must be non-negative")
    return f, v


def _evaluate(fitness, X, vectorized, generation):
    try:
        if vectorized:
            f, v = _as_pair(fitness(X))
        else:
            pairs = [_as_pair(fitness(x)) for x in X]
            f = [p[0] for p in pairs]
            v = [p[1] for p in pairs]
    except Exception as exc:
        raise RuntimeError(f"fitness evaluation failed at generation {generation}: {exc}") \
            from exc
    f, v = _clean(f, v, generation)
    if f.shape != (X.shape[0],):
        raise ValueError(f"fitness returned shape {f.shape}, expected ({X.shape[0]},)")
    return f, v


def initialize(config: DeConfig, fitness=None, *, rng: np.random.Generator | None = None,
               vectorized: bool = False) -> Population:
    """Uniform random population inside the bounds, evaluated if ``fitness`` is given."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    u = rng.random((config.n_ind, config.n_dims))
    X = config.lower + u * (config.upper - config.lower)
    if fitness is None:
        f = np.full(config.n_ind, np.inf)
        v = np.zeros(config.n_ind)
    else:
        f, v = _evaluate(fitness, X, vectorized, 0)
    pop = Population(X, f, v)
    if fitness is not None:
        pop.update_best(config.constraint, config.penalty_weight)
    return pop


def mutate(pop: Population, config: DeConfig, i: int, rng: np.random.Generator,
           return_indices: bool = False):
    """Mutant vector for target ``i``, reflected into bounds."""
    X = pop.individuals
    n = X.shape[0]
    need = 3 if config.strategy == "rand1" else 2
    if n < need + 1:
        raise ValueError(f"{config.strategy} needs at least {need + 1} individuals, got {n}")
    r = sample_indices(rng, n, i, need)
    if config.strategy == "rand1":
        v = X[r[0]] + config.F * (X[r[1]] - X[r[2]])
    elif config.strategy == "best1":
        base = pop.best_x if pop.best_x is not None else X[int(np.argmin(pop.fitness))]
        v = base + config.F * (X[r[0]] - X[r[1]])
    else:
        v = X[i] + config.F * (X[r[0]] - X[r[1]])
    v = reflect(v, config.lower, config.upper)
    return (v, r) if return_indices else v


def crossover(target: np.ndarray, mutant: np.ndarray, config: DeConfig,
              rng: np.random.Generator) -> np.ndarray:
    """Binomial crossover; component ``j_rand`` always comes from the mutant."""
    target, mutant = np.asarray(target), np.asarray(mutant)
    if target.shape != mutant.shape:
        raise ValueError("target and mutant lengths differ")
    d = target.size
    mask = rng.random(d) <= config.Cr
    mask[rng.integers(d)] = True
    return np.where(mask, mutant, target)


def better(f_a: float, v_a: float, f_b: float, v_b: float, rule: str = "feasibility",
           weight: float = 1e6, strict: bool = False) -> bool:
    """True if candidate ``a`` should replace ``b`` (ties go to ``a`` unless ``strict``)."""
    if rule == "penalty":
        pa, pb = f_a + weight * v_a**2, f_b + weight * v_b**2
        return pa < pb if strict else pa <= pb
    if v_a == 0 and v_b == 0:
        return f_a < f_b if strict else f_a <= f_b
    if v_a == 0 or v_b == 0:
        return v_a == 0
    return v_a < v_b if strict else v_a <= v_b


def select(target, trial, f_target, f_trial, config: DeConfig,
           v_target: float = 0.0, v_trial: float = 0.0):
    """Return ``(survivor, fitness, violation)``; the trial wins ties."""
    f_target = math.inf if np.isnan(f_target) else f_target
    f_trial = math.inf if np.isnan(f_trial) else f_trial
    if better(f_trial, v_trial, f_target, v_target, config.constraint, config.penalty_weight):
        return trial, f_trial, v_trial
    return target, f_target, v_target


def _trace_row(pop: Population) -> dict:
    f = pop.fitness
    finite = f[np.isfinite(f)]
    return {"generation": pop.generation, "best": pop.best_f,
            "mean": float(finite.mean()) if finite.size else math.inf,
            "worst": float(f.max()),
            "feasible_fraction": float(np.mean(pop.violation == 0)),
            "best_violation": pop.best_v}


def run(config: DeConfig, fitness, *, vectorized: bool = False, init: np.ndarray | None = None,
        callback=None) -> DeResult:
    """Generational DE: all trials are built, evaluated as one batch, then
    selected in index order.

    ``init`` optionally seeds the first rows of the initial population
    (e.g. a known reference schedule); the rest are uniform draws.
    """
    rng = np.random.default_rng(config.seed)
    pop = initialize(config, None, rng=rng)
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))[:config.n_ind]
        pop.individuals[:init.shape[0]] = reflect(init, config.lower, config.upper)
    pop.fitness, pop.violation = _evaluate(fitness, pop.individuals, vectorized, 0)
    pop.update_best(config.constraint, config.penalty_weight)
    n_evals = config.n_ind
    trace = [_trace_row(pop)]
    for g in range(1, config.g_max + 1):
        trials = np.empty_like(pop.individuals)
        for i in range(config.n_ind):
            v = mutate(pop, config, i, rng)
            trials[i] = crossover(pop.individuals[i], v, config, rng)
        f_t, v_t = _evaluate(fitness, trials, vectorized, g)
        n_evals += config.n_ind
        for i in range(config.n_ind):
            x, f, v = select(pop.individuals[i], trials[i], pop.fitness[i], f_t[i], config,
                             pop.violation[i], v_t[i])
            pop.individuals[i], pop.fitness[i], pop.violation[i] = x, f, v
        pop.generation = g
        pop.update_best(config.constraint, config.penalty_weight)
        trace.append(_trace_row(pop))
        if callback is not None:
            callback(pop)
    return DeResult(pop.best_x.copy(), pop.best_f, pop.best_v, trace, pop, n_evals)

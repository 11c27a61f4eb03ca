"""Net present value, thermal energy and the production-temperature constraint.

Energy produced in a control step is the enthalpy carried out by the
producers minus the enthalpy re-injected:

    E_t = rho_f c_f dt (sum_j q_pj T_pj - sum_k q_ik T_inj)      [J -> MWh]

and the discounted cash flow is

    NPV = sum_t (C_e E_t - C_wp Q_wp,t - C_wi Q_wi,t) / (1 + d)**(t_years)

with ``t_years`` the end of step ``t`` in years. Water volumes are rates
times the step length.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .simulator import ControlSchedule, ProductionSeries

__all__ = [
    "EconSpec", "NpvBreakdown", "RobustResult", "thermal_energy", "npv", "npv_batch",
    "constraint_violation", "robust_objective", "J_PER_MWH", "DAYS_PER_YEAR",
]

logger = logging.getLogger(__name__)

J_PER_MWH = 3.6e9
DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class EconSpec:
    energy_price: float = 40.0
    water_prod_cost: float = 0.5
    water_inj_cost: float = 0.5
    discount_rate: float = 0.05
    fluid_density: float = 1000.0
    fluid_heat_capacity: float = 4200.0
    critical_temperature: float = 130.0
    injection_temperature: float = 20.0
    feasible_fraction: float = 0.9

    def __post_init__(self):
        if min(self.energy_price, self.water_prod_cost, self.water_inj_cost) < 0:
            raise ValueError("prices must be non-negative")
        if self.discount_rate < 0:
            raise ValueError("discount rate must be non-negative")
        if self.fluid_density <= 0 or self.fluid_heat_capacity <= 0:
            raise ValueError("fluid density and heat capacity must be positive")
        if not 0.0 <= self.feasible_fraction <= 1.0:
            raise ValueError("feasible_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EconSpec":
        return cls(**d)


@dataclass
class NpvBreakdown:
    revenue: np.ndarray
    production_cost: np.ndarray
    injection_cost: np.ndarray
    discount: np.ndarray
    discounted_net: np.ndarray
    energy_mwh: np.ndarray
    total: float
    feasible_steps: np.ndarray
    """(n_steps, n_prod) booleans, True where the producer meets ``T_c``."""
    violation: float

    @property
    def feasible(self) -> bool:
        return self.violation == 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "violation": self.violation, "feasible": self.feasible,
                "revenue": self.revenue.tolist(),
                "production_cost": self.production_cost.tolist(),
                "injection_cost": self.injection_cost.tolist(),
                "discount": self.discount.tolist(),
                "discounted_net": self.discounted_net.tolist(),
                "energy_mwh": self.energy_mwh.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "energy_mwh", "revenue", "production_cost", "injection_cost",
                    "discount", "discounted_net"])
        for t in range(self.revenue.size):
            w.writerow([t + 1] + [repr(float(a[t])) for a in (
                self.energy_mwh, self.revenue, self.production_cost, self.injection_cost,
                self.discount, self.discounted_net)])
        return buf.getvalue()


def _step_days(series: ProductionSeries, step_days: float | None) -> np.ndarray:
    if step_days is not None:
        return np.full(series.n_steps, float(step_days))
    t = np.concatenate([[0.0], series.times])
    return np.diff(t)


def thermal_energy(series: ProductionSeries, spec: EconSpec, t: int,
                   step_days: float | None = None) -> float:
    """Thermal energy (MWh) extracted during control step ``t`` (0-based)."""
    if not 0 <= t < series.n_steps:
        raise ValueError(f"step {t} outside 0..{series.n_steps - 1}")
    qp, qi = series.producer_rates[t], series.injector_rates[t]
    if np.any(qp < 0) or np.any(qi < 0):
        raise ValueError(f"negative well rate at step {t}")
    dt = _step_days(series, step_days)[t]
    heat = (np.dot(qp, series.producer_temps[t])
            - qi.sum() * spec.injection_temperature)
    return float(spec.fluid_density * spec.fluid_heat_capacity * dt * heat / J_PER_MWH)


def constraint_violation(series: ProductionSeries | np.ndarray, spec: EconSpec) -> float:
    """``sum max(0, T_c - T)`` over producers and steps (degC x steps)."""
    temps = series.producer_temps if isinstance(series, ProductionSeries) else series
    return float(np.sum(np.maximum(0.0, spec.critical_temperature - np.asarray(temps))))


def npv(series: ProductionSeries, spec: EconSpec, step_days: float | None = None,
        t0_days: float | None = None) -> NpvBreakdown:
    """Discounted cash flow of a production series.

    Step lengths come from ``series.times`` unless ``step_days`` is given;
    discounting uses each step's end time (``series.times`` or
    ``t0_days`` plus cumulative step lengths).
    """
    n = series.n_steps
    dt = _step_days(series, step_days)
    if t0_days is None and step_days is None:
        t_end = np.asarray(series.times, float)
    else:
        t_end = (0.0 if t0_days is None else t0_days) + np.cumsum(dt)
    energy = np.array([thermal_energy(series, spec, t, step_days) for t in range(n)])
    revenue = spec.energy_price * energy
    prod_cost = spec.water_prod_cost * series.producer_rates.sum(axis=1) * dt
    inj_cost = spec.water_inj_cost * series.injector_rates.sum(axis=1) * dt
    disc = (1.0 + spec.discount_rate) ** (-t_end / DAYS_PER_YEAR)
    net = (revenue - prod_cost - inj_cost) * disc
    ok = series.producer_temps >= spec.critical_temperature
    return NpvBreakdown(revenue, prod_cost, inj_cost, disc, net, energy, float(net.sum()),
                        ok, constraint_violation(series, spec))


def npv_batch(obs: np.ndarray, controls: np.ndarray, n_inj: int, n_prod: int,
              spec: EconSpec, step_days: float, t0_days: float = 0.0,
              margin: float | np.ndarray = 0.0):
    """Vectorized NPV and violation for observed-channel predictions.

    ``obs`` is (B, T, 2 n_prod + n_inj) and ``controls`` (B, T, n_inj + n_prod)
    with injectors first. Negative predicted producer rates are clipped to
    zero. ``margin`` (scalar or per producer) raises the temperature floor
    for the violation only. Returns ``(npv (B,), violation (B,))``.
    """
    obs = np.asarray(obs, float)
    controls = np.broadcast_to(np.asarray(controls, float), obs.shape[:2] + (n_inj + n_prod,))
    n_t = obs.shape[1]
    qp = np.maximum(obs[..., :n_prod], 0.0)
    tp = obs[..., n_prod:2 * n_prod]
    qi = controls[..., :n_inj]
    heat = np.sum(qp * tp, axis=2) - qi.sum(axis=2) * spec.injection_temperature
    energy = spec.fluid_density * spec.fluid_heat_capacity * step_days * heat / J_PER_MWH
    cash = (spec.energy_price * energy
            - spec.water_prod_cost * qp.sum(axis=2) * step_days
            - spec.water_inj_cost * qi.sum(axis=2) * step_days)
    t_end = t0_days + step_days * np.arange(1, n_t + 1)
    disc = (1.0 + spec.discount_rate) ** (-t_end / DAYS_PER_YEAR)
    floor = spec.critical_temperature + np.asarray(margin, float)
    viol = np.sum(np.maximum(0.0, floor - tp), axis=(1, 2))
    return cash @ disc, viol


@dataclass
class RobustResult:
    mean_npv: float
    member_npv: np.ndarray
    member_violation: np.ndarray
    feasible_fraction: float
    feasible: bool
    excluded: list[int]

    def to_dict(self) -> dict:
        return {"mean_npv": self.mean_npv, "member_npv": self.member_npv.tolist(),
                "member_violation": self.member_violation.tolist(),
                "feasible_fraction": self.feasible_fraction, "feasible": self.feasible,
                "excluded": self.excluded}


def robust_objective(schedule: ControlSchedule, members, forward, spec: EconSpec,
                     t0_days: float = 0.0) -> RobustResult:
    """Ensemble-averaged NPV of one schedule.

    ``forward(members, schedule)`` returns one :class:`ProductionSeries` per
    member, or None for a member whose forward run failed. Failed members
    are excluded; at least 90% must survive.
    """
    series = list(forward(members, schedule))
    if not series:
        raise ValueError("ensemble is empty")
    vals, viols, excluded = [], [], []
    for i, s in enumerate(series):
        if s is None:
            logger.warning("member %d excluded: forward model failed", i)
            excluded.append(i)
            continue
        b = npv(s, spec, schedule.step_days, t0_days)
        if not np.isfinite(b.total):
            logger.warning("member %d excluded: non-finite NPV", i)
            excluded.append(i)
            continue
        vals.append(b.total)
        viols.append(b.violation)
    n = len(series)
    if len(vals) < 0.9 * n:
        raise RuntimeError(f"only {len(vals)} of {n} members evaluated; need 90%")
    vals, viols = np.array(vals), np.array(viols)
    frac = float(np.mean(viols == 0))
    return RobustResult(float(vals.mean()), vals, viols, frac,
                        frac >= spec.feasible_fraction, excluded)

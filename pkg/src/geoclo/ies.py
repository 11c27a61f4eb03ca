"""Iterative ensemble smoother, Levenberg-Marquardt form.

Each member is updated as

    m_j <- m_j - 1/(1+lam) [C_M_l - C_MD K^-1 C_DM] C_M^-1 (m_j - m_j^pr)
               - C_MD K^-1 (g(m_j) - d_j^obs),    K = (1+lam) C_D + C_DD

with ensemble (co)variances from the current members and predictions,
``C_M`` the prior parameter covariance and ``d_j^obs`` the member's
perturbed observations. Proposals that lower the mean normalized data
mismatch are accepted and ``lam`` shrinks; otherwise ``lam`` grows.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .grid_field import KleBasis, PermField, fields_from_coeffs

__all__ = [
    "Ensemble", "ObservationSet", "IesConfig", "IesDiagnostics", "ies_update",
    "assimilate", "metrics", "mismatch", "field_stats", "noise_std_for_channels",
    "save_ensemble", "load_ensemble",
]

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Ensemble:
    """Coefficient members (N_e, n_params) plus the frozen prior members."""

    members: np.ndarray
    prior: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        self.members = np.array(self.members, dtype=float, ndmin=2)
        if self.members.shape[0] < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {self.members.shape[0]}")
        if self.prior is None:
            self.prior = self.members.copy()
        self.prior = np.array(self.prior, dtype=float, ndmin=2)
        if self.prior.shape != self.members.shape:
            raise ValueError("prior and current members differ in shape")
        self.prior.setflags(write=False)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def n_params(self) -> int:
        return self.members.shape[1]

    def snapshot(self) -> "Ensemble":
        m = self.members.copy()
        m.setflags(write=False)
        return Ensemble(m, self.prior, self.iteration)


@dataclass(eq=False)
class ObservationSet:
    """Observed data vector with diagonal noise and per-member perturbations."""

    values: np.ndarray
    noise_std: np.ndarray
    labels: list[str] = field(default_factory=list)
    perturbed: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.noise_std = np.broadcast_to(np.asarray(self.noise_std, float),
                                         self.values.shape).copy()
        if np.any(self.noise_std <= 0) or not np.all(np.isfinite(self.noise_std)):
            raise ValueError("observation noise std must be positive and finite")
        if not self.labels:
            self.labels = [f"obs{i}" for i in range(self.values.size)]
        if len(self.labels) != self.values.size:
            raise ValueError(f"{len(self.labels)} labels for {self.values.size} observations")

    @property
    def size(self) -> int:
        return self.values.size

    def perturb(self, n_members: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``d_j = d + e_j``, ``e_j ~ N(0, C_D)``, once per member."""
        e = rng.standard_normal((n_members, self.size)) * self.noise_std
        self.perturbed = self.values + e
        return self.perturbed


def noise_std_for_channels(kinds: list[str], ranges: np.ndarray, rel: float = 0.02,
                           temp_std: float = 1.0, floor: float = 1e-6) -> np.ndarray:
    """Per-channel noise: ``rel`` x range for rates/BHPs, ``temp_std`` for temperatures."""
    ranges = np.asarray(ranges, float)
    std = np.where(np.asarray(kinds) == "temp", temp_std, rel * ranges)
    return np.maximum(std, floor)


@dataclass
class IesConfig:
    max_iter: int = 10
    lambda_init: float = 10.0
    lambda_decrease: float = 2.0
    lambda_increase: float = 4.0
    lambda_max: float = 1e15
    tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be positive")
        if self.lambda_decrease <= 1 or self.lambda_increase <= 1:
            raise ValueError("lambda factors must exceed 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class IesDiagnostics:
    rows: list[dict] = field(default_factory=list)
    status: str = "max_iter"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "lambda", "mean_mismatch", "accepted"])
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["lambda"]), repr(r["mean_mismatch"]),
                            int(r["accepted"])])


def mismatch(pred: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Per-member normalized mismatch against its perturbed observations."""
    d = obs.perturbed if obs.perturbed is not None else obs.values
    r = (pred - d) / obs.noise_std
    return np.sum(r * r, axis=1) / obs.size


def _anomalies(X: np.ndarray) -> np.ndarray:
    return (X - X.mean(axis=0)).T / np.sqrt(X.shape[0] - 1)


def _solve_sym(K: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(c, B, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(K)
        logger.warning("inner matrix not positive definite; adding jitter %.3e", jitter)
        return scipy.linalg.solve(K + jitter * np.eye(K.shape[0]), B, assume_a="sym")


def ies_update(members: np.ndarray, prior: np.ndarray, pred: np.ndarray,
               obs: ObservationSet, lam: float,
               prior_cov_inv: np.ndarray | None = None) -> np.ndarray:
    """One damped update of every member; returns the proposed members.

    ``pred`` holds the forward-model output ``g(m_j)`` per member.
    ``prior_cov_inv`` defaults to the identity (standard-normal KLE prior).
    """
    M = np.asarray(members, float)
    D = np.asarray(pred, float)
    if D.shape != (M.shape[0], obs.size):
        raise ValueError(f"predictions shaped {D.shape}, expected {(M.shape[0], obs.size)}")
    if prior.shape != M.shape:
        raise ValueError("prior members differ in shape from current members")
    d_obs = obs.perturbed if obs.perturbed is not None else np.broadcast_to(obs.values, D.shape)
    dM = _anomalies(M)
    dD = _anomalies(D)
    C_MD = dM @ dD.T
    C_DD = dD @ dD.T
    K = (1.0 + lam) * np.diag(obs.noise_std**2) + C_DD
    # K^-1 [C_DM, (g - d)^T] in one factorization
    rhs = np.hstack([C_MD.T, (D - d_obs).T])
    sol = _solve_sym(K, rhs)
    n_m = M.shape[1]
    Kinv_DM, Kinv_r = sol[:, :n_m], sol[:, n_m:]
    C_M = dM @ dM.T
    A = C_M - C_MD @ Kinv_DM
    dev = (M - prior).T
    if prior_cov_inv is not None:
        dev = prior_cov_inv @ dev
    step = A @ dev / (1.0 + lam) + C_MD @ Kinv_r
    return M - step.T


def assimilate(ensemble: Ensemble, obs: ObservationSet, forward, config: IesConfig,
               prior_cov_inv: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> tuple[Ensemble, IesDiagnostics]:
    """Levenberg-Marquardt loop around :func:`ies_update`.

    ``forward(members) -> predictions`` maps (N_e, n_params) to
    (N_e, n_obs). Perturbed observations are drawn once at the start.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    obs.perturb(ensemble.n_members, rng)
    M = ensemble.members.copy()
    D = _forward(forward, M, obs)
    mis = float(mismatch(D, obs).mean())
    lam = config.lambda_init
    diag = IesDiagnostics()
    diag.rows.append({"iteration": 0, "lambda": lam, "mean_mismatch": mis, "accepted": True})
    small = 0
    it = 0
    if mis == 0.0:
        diag.status = "converged"
    while it < config.max_iter and diag.status != "converged":
        it += 1
        prop = ies_update(M, ensemble.prior, D, obs, lam, prior_cov_inv)
        D_new = _forward(forward, prop, obs)
        mis_new = float(mismatch(D_new, obs).mean())
        accepted = bool(np.isfinite(mis_new) and mis_new < mis)
        if accepted:
            rel = (mis - mis_new) / mis
            M, D, mis = prop, D_new, mis_new
            lam /= config.lambda_decrease
            small = small + 1 if rel < config.tol else 0
        else:
            lam *= config.lambda_increase
        diag.rows.append({"iteration": it, "lambda": lam, "mean_mismatch": mis_new,
                          "accepted": accepted})
        logger.info("ies iteration %d: mismatch %.6g lambda %.3g %s", it, mis_new, lam,
                    "accepted" if accepted else "rejected")
        if small >= 2:
            diag.status = "converged"
        elif lam > config.lambda_max:
            diag.status = "stalled"
            break
    return Ensemble(M, ensemble.prior, ensemble.iteration + it), diag


def _forward(forward, M, obs):
    D = np.asarray(forward(M), dtype=float)
    if D.shape != (M.shape[0], obs.size):
        raise ValueError(f"forward model returned {D.shape}, expected {(M.shape[0], obs.size)}")
    if not np.all(np.isfinite(D)):
        bad = np.flatnonzero(~np.all(np.isfinite(D), axis=1))
        raise FloatingPointError(f"forward model produced non-finite output for members "
                                 f"{bad[:10].tolist()}")
    return D


# -- field statistics -------------------------------------------------------

def field_stats(members: np.ndarray, basis: KleBasis) -> tuple[np.ndarray, np.ndarray]:
    """Cellwise mean and (population) variance of ln K over the ensemble."""
    lnk = fields_from_coeffs(basis, members)
    return lnk.mean(axis=0), lnk.var(axis=0)


def metrics(members: np.ndarray, basis: KleBasis, reference: PermField) -> tuple[float, float]:
    """RMSE of the ensemble-mean field against ``reference`` and the ensemble spread."""
    if reference.grid != basis.grid:
        raise ValueError("reference field and basis are on different grids")
    mean, var = field_stats(np.atleast_2d(members), basis)
    rmse = float(np.sqrt(np.mean((reference.lnk - mean)**2)))
    spread = float(np.sqrt(np.mean(var)))
    return rmse, spread


# -- persistence -----------------------------------------------------------

def save_ensemble(path, ens: Ensemble, meta: dict | None = None) -> Path:
    """``<path>.bin`` holds current then prior members as little-endian float64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.concatenate([ens.members, ens.prior]).astype("<f8").tofile(path.with_suffix(".bin"))
    doc = {"n_members": ens.n_members, "n_params": ens.n_params,
           "iteration": ens.iteration, "layout": ["members", "prior"], "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path.with_suffix(".bin")


def load_ensemble(path) -> Ensemble:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    n, p = doc["n_members"], doc["n_params"]
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f8").astype(float)
    if data.size != 2 * n * p:
        raise ValueError(f"{path}: expected {2 * n * p} values, found {data.size}")
    data = data.reshape(2 * n, p)
    return Ensemble(data[:n].copy(), data[n:].copy(), doc["iteration"])

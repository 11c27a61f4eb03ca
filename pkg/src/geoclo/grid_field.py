"""Structured grids and Karhunen-Loeve log-permeability fields.

The covariance of ``ln K`` is the separable exponential kernel

    C(x, x') = sigma**2 * exp(-|x - x'| / eta_x - |y - y'| / eta_y)

evaluated between all cell centres and decomposed densely. A field is

    ln K = mean + sum_m xi_m * sqrt(lambda_m) * v_m,   xi ~ N(0, I).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

__all__ = [
    "GridSpec",
    "KleBasis",
    "PermField",
    "KleCoeffs",
    "CapacityError",
    "build_kle_basis",
    "sample_field",
    "sample_coeffs",
    "fields_from_coeffs",
    "coeffs_from_field",
    "exponential_covariance",
    "save_field",
    "load_field",
    "field_to_csv",
]

#: Largest grid accepted for a dense eigendecomposition.
MAX_DENSE_CELLS = 10_000
#: Hard cap on retained modes.
MAX_MODES = 200


class CapacityError(ValueError):
    """Grid too large for the dense covariance decomposition."""


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred 2D structured grid.

    Cells are numbered with ``i`` (x index) varying fastest:
    ``cell = j * nx + i``.
    """

    nx: int
    ny: int
    dx: float
    dy: float
    thickness: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        if min(self.dx, self.dy, self.thickness) <= 0:
            raise ValueError("dx, dy and thickness must be positive")

    @classmethod
    def full(cls) -> "GridSpec":
        """61x61 grid of 20 m cells, 30 m thick."""
        return cls(61, 61, 20.0, 20.0, 30.0)

    @classmethod
    def desk(cls, n: int = 16, length: float = 1220.0) -> "GridSpec":
        """Coarse grid over the same physical domain."""
        return cls(n, n, length / n, length / n, 30.0)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.thickness

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ValueError(f"cell ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened x and y cell-centre coordinates."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.dy
        yy, xx = np.meshgrid(y, x, indexing="ij")
        return xx.ravel(), yy.ravel()

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "dx": self.dx, "dy": self.dy,
            "thickness": self.thickness, "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nx"]), int(d["ny"]), float(d["dx"]), float(d["dy"]),
                   float(d["thickness"]), tuple(d.get("origin", (0.0, 0.0))))


@dataclass(frozen=True, eq=False)
class KleBasis:
    grid: GridSpec
    mean_lnk: float
    sigma_lnk: float
    corr_len_x: float
    corr_len_y: float
    eigvals: np.ndarray
    eigvecs: np.ndarray
    energy_fraction: float
    """Fraction of the covariance trace actually retained."""

    @property
    def n_modes(self) -> int:
        return self.eigvals.size

    @property
    def scaled_modes(self) -> np.ndarray:
        """``eigvecs * sqrt(eigvals)``, shape (n_cells, n_modes)."""
        return self.eigvecs * np.sqrt(self.eigvals)

    def truncated_variance(self) -> np.ndarray:
        """Per-cell variance of the truncated expansion."""
        return (self.eigvecs**2) @ self.eigvals


@dataclass(frozen=True, eq=False)
class PermField:
    grid: GridSpec
    lnk: np.ndarray

    def __post_init__(self):
        lnk = np.asarray(self.lnk, dtype=float)
        if lnk.shape != (self.grid.n_cells,):
            raise ValueError(
                f"field has {lnk.size} values, grid has {self.grid.n_cells} cells")
        if not np.all(np.isfinite(lnk)):
            raise ValueError("field contains non-finite values")
        lnk.setflags(write=False)
        object.__setattr__(self, "lnk", lnk)

    def as_image(self) -> np.ndarray:
        """(ny, nx) view; row ``j`` is one line of constant y."""
        return self.lnk.reshape(self.grid.ny, self.grid.nx)

    def permeability_md(self) -> np.ndarray:
        return np.exp(self.lnk)


@dataclass(frozen=True, eq=False)
class KleCoeffs:
    xi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float).ravel()
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)


def exponential_covariance(grid: GridSpec, sigma: float, corr_len_x: float,
                           corr_len_y: float) -> np.ndarray:
    """Dense separable exponential covariance between all cell centres."""
    x, y = grid.centers()
    ax = np.abs(x[:, None] - x[None, :]) / corr_len_x
    ay = np.abs(y[:, None] - y[None, :]) / corr_len_y
    return sigma**2 * np.exp(-(ax + ay))


def build_kle_basis(grid: GridSpec, mean: float = 3.6, sigma: float = 1.0,
                    corr_len_x: float = 305.0, corr_len_y: float = 305.0,
                    energy_fraction: float = 0.95,
                    max_modes: int = MAX_MODES) -> KleBasis:
    """Eigendecompose the covariance and keep the leading modes.

    The smallest number of modes whose eigenvalue sum reaches
    ``energy_fraction`` of the trace is retained, capped at ``max_modes``.
    The returned basis records the fraction that was actually achieved,
    which is lower than requested when the cap binds.
    """
    if not 0.0 < energy_fraction <= 1.0:
        raise ValueError(f"energy_fraction must be in (0, 1], got {energy_fraction}")
    if corr_len_x <= 0 or corr_len_y <= 0:
        raise ValueError("correlation lengths must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    n = grid.n_cells
    if n > MAX_DENSE_CELLS:
        raise CapacityError(
            f"{n} cells exceeds the dense decomposition limit of {MAX_DENSE_CELLS}")
    max_modes = int(min(max_modes, n))

    if sigma == 0.0:
        vecs = np.eye(n)[:, :1]
        return KleBasis(grid, float(mean), 0.0, float(corr_len_x), float(corr_len_y),
                        np.zeros(1), vecs, 1.0)

    cov = exponential_covariance(grid, sigma, corr_len_x, corr_len_y)
    trace = float(np.trace(cov))
    try:
        if max_modes < n:
            vals, vecs = scipy.linalg.eigh(cov, subset_by_index=[n - max_modes, n - 1],
                                           driver="evr")
        else:
            vals, vecs = scipy.linalg.eigh(cov)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise np.linalg.LinAlgError(
            f"covariance eigendecomposition failed on {grid.nx}x{grid.ny} grid: {exc}"
        ) from exc
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    # fix the sign so each mode's largest-magnitude entry is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(vecs.shape[1])])

    frac = np.cumsum(vals) / trace
    k = int(np.searchsorted(frac, energy_fraction - 1e-12) + 1)
    k = min(k, max_modes)
    vals = np.ascontiguousarray(vals[:k])
    vecs = np.ascontiguousarray(vecs[:, :k])
    vals.setflags(write=False)
    vecs.setflags(write=False)
    return KleBasis(grid, float(mean), float(sigma), float(corr_len_x), float(corr_len_y),
                    vals, vecs, float(frac[k - 1]))


def sample_field(basis: KleBasis, coeffs) -> PermField:
    xi = coeffs.xi if isinstance(coeffs, KleCoeffs) else np.asarray(coeffs, dtype=float)
    if xi.shape != (basis.n_modes,):
        raise ValueError(
            f"expected {basis.n_modes} KLE coefficients, got shape {xi.shape}")
    return PermField(basis.grid, basis.mean_lnk + basis.scaled_modes @ xi)


def sample_coeffs(basis: KleBasis, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` standard-normal coefficient vectors, shape (n, n_modes)."""
    return rng.standard_normal((n, basis.n_modes))


def fields_from_coeffs(basis: KleBasis, xi: np.ndarray) -> np.ndarray:
    """Vectorized ``sample_field`` returning an (n, n_cells) array of ln K."""
    xi = np.atleast_2d(xi)
    if xi.shape[1] != basis.n_modes:
        raise ValueError(f"expected {basis.n_modes} coefficients, got {xi.shape[1]}")
    return basis.mean_lnk + xi @ basis.scaled_modes.T


def coeffs_from_field(basis: KleBasis, fld: PermField) -> KleCoeffs:
    """Least-squares projection of a field onto the retained modes.

    Modes with zero eigenvalue carry no information and map to zero.
    """
    if fld.grid != basis.grid:
        raise ValueError("field and basis are on different grids")
    proj = basis.eigvecs.T @ (fld.lnk - basis.mean_lnk)
    sq = np.sqrt(basis.eigvals)
    xi = np.divide(proj, sq, out=np.zeros_like(proj), where=sq > 0)
    return KleCoeffs(xi)


# -- persistence -----------------------------------------------------------

def save_field(path, fld: PermField, *, mean: float | None = None,
               sigma: float | None = None, seed: int | None = None) -> Path:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fld.lnk.astype("<f8").tofile(path.with_suffix(".bin"))
    meta = {"grid": fld.grid.to_dict(), "mean": mean, "sigma": sigma, "seed": seed,
            "dtype": "<f8", "count": int(fld.lnk.size)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".bin")


def load_field(path) -> PermField:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    if data.size != meta["count"]:
        raise ValueError(f"{path}: expected {meta['count']} values, found {data.size}")
    return PermField(GridSpec.from_dict(meta["grid"]), data.astype(float))


def field_to_csv(path, fld: PermField, values: np.ndarray | None = None,
                 name: str = "lnk") -> None:
    """CSV with columns ``x,y,<name>``; ``values`` overrides ``fld.lnk``."""
    x, y = fld.grid.centers()
    v = fld.lnk if values is None else np.asarray(values)
    lines = [f"x,y,{name}"]
    lines += [f"{a:.6f},{b:.6f},{c:.17g}" for a, b, c in zip(x, y, v)]
    Path(path).write_text("\n".join(lines) + "\n")

import numpy as np
import pytest

from geoclo.grid_field import (CapacityError, GridSpec, PermField, build_kle_basis,
                               coeffs_from_field, field_to_csv, fields_from_coeffs, load_field,
                               sample_field, save_field)


def _oracle_cov(grid, sigma, eta):
    # independent construction from explicit coordinates
    xs = (np.arange(grid.nx) + 0.5) * grid.dx
    ys = (np.arange(grid.ny) + 0.5) * grid.dy
    X, Y = np.meshgrid(xs, ys)
    p = np.column_stack([X.ravel(), Y.ravel()])
    d1 = np.abs(p[:, None, :] - p[None, :, :]).sum(axis=2)
    return sigma**2 * np.exp(-d1 / eta)


def test_eigenpairs_match_dense_oracle(desk_grid, desk_basis):
    C = _oracle_cov(desk_grid, 1.0, 305.0)
    w = np.linalg.eigvalsh(C)[::-1]
    k = desk_basis.n_modes
    np.testing.assert_allclose(desk_basis.eigvals, w[:k], rtol=1e-10, atol=1e-12)
    # modes satisfy C v = lambda v
    resid = C @ desk_basis.eigvecs - desk_basis.eigvecs * desk_basis.eigvals
    assert np.max(np.abs(resid)) < 1e-10


def test_mode_count_is_smallest_reaching_energy(desk_grid, desk_basis):
    w = np.linalg.eigvalsh(_oracle_cov(desk_grid, 1.0, 305.0))[::-1]
    frac = np.cumsum(w) / w.sum()
    expected = int(np.argmax(frac >= 0.95)) + 1
    assert desk_basis.n_modes == expected == 96
    assert desk_basis.energy_fraction >= 0.95


def test_mode_cap_binds_and_reports_fraction():
    grid = GridSpec.desk(24)
    b = build_kle_basis(grid, max_modes=20)
    assert b.n_modes == 20
    assert b.energy_fraction < 0.95


def test_sigma_zero_gives_constant_field(desk_grid):
    b = build_kle_basis(desk_grid, sigma=0.0)
    f = sample_field(b, np.array([2.5]))
    assert np.all(f.lnk == 3.6)


def test_sample_statistics(desk_basis, rng):
    xi = rng.standard_normal((4000, desk_basis.n_modes))
    lnk = fields_from_coeffs(desk_basis, xi)
    assert np.max(np.abs(lnk.mean(0) - 3.6)) < 0.1
    ratio = lnk.var(0) / desk_basis.truncated_variance()
    assert np.all(np.abs(ratio - 1) < 0.15)


def test_projection_round_trip(desk_basis, rng):
    xi = rng.standard_normal(desk_basis.n_modes)
    back = coeffs_from_field(desk_basis, sample_field(desk_basis, xi)).xi
    np.testing.assert_allclose(back, xi, atol=1e-9)


def test_wrong_coefficient_count(desk_basis):
    with pytest.raises(ValueError, match="96"):
        sample_field(desk_basis, np.zeros(3))


def test_capacity_error():
    with pytest.raises(CapacityError):
        build_kle_basis(GridSpec.desk(101))


def test_invalid_arguments(desk_grid):
    with pytest.raises(ValueError):
        build_kle_basis(desk_grid, energy_fraction=0.0)
    with pytest.raises(ValueError):
        build_kle_basis(desk_grid, corr_len_x=-1.0)


def test_field_rejects_nonfinite(desk_grid):
    v = np.full(desk_grid.n_cells, 3.6)
    v[3] = np.nan
    with pytest.raises(ValueError):
        PermField(desk_grid, v)


def test_save_load_bit_identical(tmp_path, desk_basis, rng):
    f = sample_field(desk_basis, rng.standard_normal(desk_basis.n_modes))
    save_field(tmp_path / "f", f, mean=3.6, sigma=1.0, seed=7)
    g = load_field(tmp_path / "f")
    assert g.grid == f.grid
    assert np.array_equal(g.lnk, f.lnk)
    assert (tmp_path / "f.bin").stat().st_size == 8 * f.lnk.size


def test_csv_export(tmp_path, desk_basis):
    f = sample_field(desk_basis, np.zeros(desk_basis.n_modes))
    field_to_csv(tmp_path / "f.csv", f)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x,y,lnk"
    assert len(lines) == 257
    x, y, v = map(float, lines[1].split(","))
    assert (x, y, v) == (38.125, 38.125, 3.6)

import warnings

import numpy as np
import pytest

from geoclo.grid_field import sample_field
from geoclo.nn import tensor as T
from geoclo.simulator import generate_dataset, random_schedule
from geoclo.surrogate import (Normalizer, OverlapError, SurrogateConfig, SurrogateModel,
                              TrainingError, encode, evaluate, fit_slope, latent_drive,
                              loss_gradient_check, predict, predict_batch, r2_score,
                              reconstruct, rollout, train)


@pytest.fixture(scope="module")
def small_ds(desk_spec, desk_wells, desk_basis):
    rng = np.random.default_rng(5)
    fields = [sample_field(desk_basis, rng.standard_normal(desk_basis.n_modes))
              for _ in range(16)]
    scheds = [random_schedule(rng, 4, 5, 3) for _ in range(16)]
    return generate_dataset(desk_spec, desk_wells, fields, scheds, seed=5)


@pytest.fixture(scope="module")
def small_model(small_ds):
    cfg = SurrogateConfig(n_steps=3, n_inj=4, n_prod=5, epochs=40, batch_size=8)
    return train(small_ds.subset(np.arange(12)), cfg)


def test_normalizer_min_max_and_constant_channel():
    u = np.array([[[1.0, 5.0], [3.0, 5.0]]])
    y = np.array([[[10.0], [20.0]]])
    n = Normalizer.fit(u, y)
    assert n.controls(u).tolist() == [[[0.0, 0.0], [1.0, 0.0]]]
    assert n.outputs(y).ravel().tolist() == [0.0, 1.0]
    np.testing.assert_allclose(n.outputs_inv(n.outputs(y)), y)
    assert n.lnk(4.6) == pytest.approx(1.0)
    back = Normalizer.from_dict(n.to_dict())
    assert np.array_equal(back.out_max, n.out_max)


def test_composite_gradient_at_initialization():
    cfg = SurrogateConfig(n_steps=25, n_inj=4, n_prod=5)
    chk = loss_gradient_check(cfg, np.random.default_rng(0), n_probes=20)
    assert chk.max_rel_error < 1e-4
    assert len(chk.probes) == 20


def test_composite_gradient_field_only_and_relu():
    cfg = SurrogateConfig(n_steps=4, n_inj=4, n_prod=5, use_controls=False,
                          recon_weight=0.3)
    assert loss_gradient_check(cfg, np.random.default_rng(1)).max_rel_error < 1e-4


def test_training_reduces_loss_and_history_is_consistent(small_model):
    h = small_model.history
    assert len(h["total"]) == 40
    assert h["seque"][-1] < 0.5 * h["seque"][0]
    assert h["recon"][-1] < h["recon"][0]
    np.testing.assert_allclose(h["total"], np.add(h["recon"], h["seque"]))


def test_training_is_seeded(small_ds):
    cfg = SurrogateConfig(n_steps=3, n_inj=4, n_prod=5, epochs=2, batch_size=8)
    a, b = train(small_ds, cfg), train(small_ds, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small_ds):
    cfg = SurrogateConfig(n_steps=3, n_inj=4, n_prod=5, epochs=5, learning_rate=1e200)
    with pytest.raises(TrainingError, match="non-finite"):
        train(small_ds, cfg)


def test_fast_rollout_matches_graph(small_model, small_ds):
    net = small_model.net
    nm = small_model.normalizer
    x = nm.lnk(small_ds.lnk[:3]).reshape(-1, 1, 16, 16)
    u = nm.controls(small_ds.controls[:3])
    z = net.encode(T.Tensor(x))
    slow = nm.outputs_inv(net.sequence(z, T.Tensor(u)).data)
    fast = rollout(small_model, latent_drive(small_model, z.data), small_ds.controls[:3])
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-9)


def test_predict_shapes(small_model, small_ds, desk_grid):
    assert encode(small_model, small_ds.lnk[:4]).shape == (4, 32)
    assert reconstruct(small_model, np.zeros(32)).shape == (desk_grid.n_cells,)
    out = predict_batch(small_model, small_ds.lnk[:4], small_ds.controls[0])
    assert out.shape == (4, 3, 14)
    from geoclo.grid_field import PermField
    fld = PermField(desk_grid, small_ds.lnk[0])
    s = predict(small_model, fld, small_ds.schedule(0))
    assert s.producer_rates.shape == (3, 5) and s.injector_bhps.shape == (3, 4)


def test_fixed_length_and_extrapolation(small_model, small_ds):
    with pytest.raises(ValueError, match="fixed-length"):
        predict_batch(small_model, small_ds.lnk[:1], np.full((1, 4, 9), 1200.0))
    ctrl = small_ds.controls[:1].copy()
    ctrl[..., 0] = 5000.0
    with pytest.warns(RuntimeWarning, match="extrapolating"):
        predict_batch(small_model, small_ds.lnk[:1], ctrl)


def test_save_load_identical_predictions(tmp_path, small_model, small_ds):
    small_model.save(tmp_path / "m")
    back = SurrogateModel.load(tmp_path / "m")
    lnk, u = small_ds.lnk[:12], small_ds.controls[:12]
    a = predict_batch(small_model, lnk, u)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        b = predict_batch(back, lnk, u)
    assert np.array_equal(a, b)
    assert back.config == small_model.config


@pytest.mark.filterwarnings("ignore:controls outside")
def test_overlap_refused(small_model, small_ds):
    with pytest.raises(OverlapError):
        evaluate(small_model, small_ds)
    rep = evaluate(small_model, small_ds.subset(np.arange(12, 16)))
    assert rep.n_samples == 4 and len(rep.r2) == 14


def test_metrics_oracle(small_model, small_ds):
    rep = evaluate(small_model, small_ds.subset(np.arange(12, 16)),
                   predictor=lambda lnk, u: small_ds.observed()[12:16])
    assert rep.r2 == [1.0] * 14 and np.allclose(rep.slope, 1.0) and rep.rmse == [0.0] * 14
    r = np.array([1.0, 2.0, 4.0])
    assert fit_slope(r, 2 * r + 1) == pytest.approx(2.0)
    # 1 - SS_res/SS_tot with SS_tot = 14/3, SS_res = 3
    assert r2_score(r, r + 1) == pytest.approx(1 - 3 / (14 / 3))


@pytest.mark.filterwarnings("ignore:controls outside")
def test_report_files(tmp_path, small_model, small_ds):
    rep = evaluate(small_model, small_ds.subset(np.arange(12, 16)))
    rep.write(tmp_path, time_nodes=[0, 2])
    lines = (tmp_path / "scatter.csv").read_text().splitlines()
    assert lines[0] == "sample,step,channel,reference,predicted"
    assert len(lines) == 1 + 4 * 3 * 14
    assert (tmp_path / "scatter_step02.csv").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        SurrogateConfig(n_steps=0, n_inj=4, n_prod=5)
    with pytest.raises(ValueError, match="activation"):
        SurrogateConfig(n_steps=2, n_inj=4, n_prod=5, activation="gelu")

"""Hybrid convolution-recurrent surrogate of the reservoir simulator.

A convolutional encoder compresses the ln K image into a latent vector, and
a mirrored transposed-convolution decoder reconstructs the image from it.
The latent vector is replicated over the control sequence, concatenated
with each step's well controls and fed to an LSTM whose linear head emits
the observed channels (producer rates, producer temperatures, injector
BHPs). Both halves are trained jointly on

    L = w * L_recon + L_seque

where ``w`` is ``recon_weight``, ``L_recon`` is the per-field squared reconstruction error (summed over
pixels, averaged over fields) and ``L_seque`` the per-step squared sequence
error (summed over channels, averaged over fields and steps), both in
normalized units.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid_field import GridSpec, PermField
from .nn import tensor as T
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.gradcheck import gradient_check
from .nn.layers import LSTM, Conv2d, ConvTranspose2d, Dense, Module
from .nn.optim import Adam
from .simulator import ControlSchedule, Dataset, ProductionSeries

__all__ = [
    "SurrogateConfig", "Normalizer", "SurrogateModel", "TrainingError", "OverlapError",
    "AccuracyReport", "train", "encode", "reconstruct", "predict", "predict_batch",
    "evaluate", "r2_score", "fit_slope", "loss_gradient_check",
]

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class OverlapError(ValueError):
    """Evaluation data shares samples with the training split."""


@dataclass
class SurrogateConfig:
    """Architecture and training hyperparameters.

    ``use_controls=False`` gives the field-only model used while controls are
    held fixed; the LSTM then sees only the replicated latent.
    """

    n_steps: int
    n_inj: int
    n_prod: int
    grid_shape: tuple[int, int] = (16, 16)
    latent_dim: int = 32
    enc_channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    lstm_hidden: int = 64
    use_controls: bool = True
    activation: str = "tanh"
    recon_weight: float = 1.0
    weight_decay: float = 0.0
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.enc_channels = tuple(int(v) for v in self.enc_channels)
        if self.n_steps < 1 or self.n_inj < 0 or self.n_prod < 1:
            raise ValueError("n_steps and n_prod must be positive, n_inj non-negative")
        if min(self.latent_dim, self.lstm_hidden, self.batch_size, self.kernel) < 1:
            raise ValueError("latent_dim, lstm_hidden, batch_size, kernel must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")

    @property
    def n_controls(self) -> int:
        return self.n_inj + self.n_prod

    @property
    def n_outputs(self) -> int:
        return 2 * self.n_prod + self.n_inj

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        return cls(**d)


@dataclass
class Normalizer:
    """Input/output scaling.

    ln K is standardized with the known prior statistics; controls and
    outputs are min-max scaled per channel from the training split. A
    channel with zero range gets unit scale.
    """

    ctrl_min: np.ndarray
    ctrl_max: np.ndarray
    out_min: np.ndarray
    out_max: np.ndarray
    lnk_mean: float = 3.6
    lnk_std: float = 1.0

    @staticmethod
    def _scale(lo, hi):
        r = np.asarray(hi, float) - np.asarray(lo, float)
        return np.where(r > 0, r, 1.0)

    @classmethod
    def fit(cls, controls: np.ndarray, outputs: np.ndarray, lnk_mean: float = 3.6,
            lnk_std: float = 1.0) -> "Normalizer":
        c = controls.reshape(-1, controls.shape[-1])
        o = outputs.reshape(-1, outputs.shape[-1])
        return cls(c.min(0), c.max(0), o.min(0), o.max(0), lnk_mean, lnk_std)

    def lnk(self, x):
        return (np.asarray(x, float) - self.lnk_mean) / self.lnk_std

    def lnk_inv(self, z):
        return np.asarray(z, float) * self.lnk_std + self.lnk_mean

    def controls(self, u):
        return (np.asarray(u, float) - self.ctrl_min) / self._scale(self.ctrl_min, self.ctrl_max)

    def outputs(self, y):
        return (np.asarray(y, float) - self.out_min) / self._scale(self.out_min, self.out_max)

    def outputs_inv(self, z):
        return np.asarray(z, float) * self._scale(self.out_min, self.out_max) + self.out_min

    def to_dict(self) -> dict:
        return {"ctrl_min": self.ctrl_min.tolist(), "ctrl_max": self.ctrl_max.tolist(),
                "out_min": self.out_min.tolist(), "out_max": self.out_max.tolist(),
                "lnk_mean": self.lnk_mean, "lnk_std": self.lnk_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["ctrl_min"], float), np.array(d["ctrl_max"], float),
                   np.array(d["out_min"], float), np.array(d["out_max"], float),
                   float(d["lnk_mean"]), float(d["lnk_std"]))


def _conv_out(n: int, k: int, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - k) // stride + 1


class _Net(Module):
    """Parameter container and differentiable forward pass."""

    def __init__(self, cfg: SurrogateConfig, rng: np.random.Generator):
        k = cfg.kernel
        pad = k // 2
        ny, nx = cfg.grid_shape
        sizes = [(ny, nx)]
        chans = (1,) + cfg.enc_channels
        self.enc = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            self.enc.append(Conv2d(c_in, c_out, k, rng, stride=2, padding=pad))
            h, w = sizes[-1]
            sizes.append((_conv_out(h, k, 2, pad), _conv_out(w, k, 2, pad)))
        self.code_shape = (chans[-1],) + sizes[-1]
        flat = int(np.prod(self.code_shape))
        self.enc_dense = Dense(flat, cfg.latent_dim, rng)
        self.dec_dense = Dense(cfg.latent_dim, flat, rng)
        self.dec = []
        for li in range(len(cfg.enc_channels), 0, -1):
            (hi, wi), (ho, wo) = sizes[li], sizes[li - 1]
            base = (hi - 1) * 2 - 2 * pad + k
            op = ho - base
            if op != wo - ((wi - 1) * 2 - 2 * pad + k) or not 0 <= op < 2:
                raise ValueError(f"grid {cfg.grid_shape} cannot be mirrored by the decoder")
            self.dec.append(ConvTranspose2d(chans[li], chans[li - 1], k, rng, stride=2,
                                            padding=pad, output_padding=op))
        n_in = cfg.latent_dim + (cfg.n_controls if cfg.use_controls else 0)
        self.lstm = LSTM(n_in, cfg.lstm_hidden, rng)
        self.head = Dense(cfg.lstm_hidden, cfg.n_outputs, rng)
        self.cfg = cfg
        self.act = T.tanh if cfg.activation == "tanh" else T.relu

    def encode(self, x):
        """x: (B, 1, ny, nx) normalized ln K -> (B, latent) Tensor."""
        h = x
        for layer in self.enc:
            h = self.act(layer(h))
        h = T.reshape(h, (h.shape[0], -1))
        return T.tanh(self.enc_dense(h))

    def decode(self, z):
        b = z.shape[0]
        h = self.act(self.dec_dense(z))
        h = T.reshape(h, (b,) + self.code_shape)
        for i, layer in enumerate(self.dec):
            h = layer(h)
            if i < len(self.dec) - 1:
                h = self.act(h)
        return h

    def sequence(self, z, u):
        """z: (B, L) latent Tensor, u: (B, T, n_ctrl) normalized controls."""
        b, n_t = z.shape[0], self.cfg.n_steps
        zr = T.mul(T.reshape(z, (b, 1, z.shape[1])), np.ones((1, n_t, 1)))
        xs = T.concat([zr, u], axis=2) if self.cfg.use_controls else zr
        hs = self.lstm(xs)
        hs2 = T.reshape(hs, (b * n_t, self.cfg.lstm_hidden))
        return T.reshape(self.head(hs2), (b, n_t, self.cfg.n_outputs))

    def losses(self, x, u, y):
        """Return (L_recon, L_seque) Tensors for a normalized batch."""
        b = x.shape[0]
        z = self.encode(x)
        recon = self.decode(z)
        pred = self.sequence(z, u)
        l_rec = T.scale(T.squared_error_sum(recon, x), 1.0 / b)
        l_seq = T.scale(T.squared_error_sum(pred, y), 1.0 / (b * self.cfg.n_steps))
        return l_rec, l_seq


@dataclass(eq=False)
class SurrogateModel:
    config: SurrogateConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    history: dict[str, list[float]] = field(
        default_factory=lambda: {"recon": [], "seque": [], "total": []})
    train_hashes: list[str] = field(default_factory=list)
    grid: GridSpec | None = None
    _net: _Net | None = field(default=None, repr=False)

    @property
    def net(self) -> _Net:
        """Network with this model's parameter values loaded."""
        if self._net is None:
            net = _Net(self.config, np.random.default_rng(0))
            for k, p in net.parameters().items():
                p.data = np.array(self.params[k], dtype=float)
                p.requires_grad = False
            self._net = net
        return self._net

    def save(self, path) -> Path:
        meta = {"config": self.config.to_dict(), "normalizer": self.normalizer.to_dict(),
                "history": self.history, "train_hashes": self.train_hashes,
                "grid": None if self.grid is None else self.grid.to_dict()}
        return save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        params, meta = load_checkpoint(path)
        grid = None if meta.get("grid") is None else GridSpec.from_dict(meta["grid"])
        return cls(SurrogateConfig.from_dict(meta["config"]), params,
                   Normalizer.from_dict(meta["normalizer"]), meta["history"],
                   meta["train_hashes"], grid)


def _check_dataset(ds: Dataset, cfg: SurrogateConfig) -> None:
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    g = ds.spec.grid
    if (g.ny, g.nx) != cfg.grid_shape:
        raise ValueError(f"dataset grid {(g.ny, g.nx)} != configured {cfg.grid_shape}")
    if ds.controls.shape[1:] != (cfg.n_steps, cfg.n_controls):
        raise ValueError(f"controls shaped {ds.controls.shape[1:]}, expected "
                         f"{(cfg.n_steps, cfg.n_controls)}")
    if ds.n_inj != cfg.n_inj or ds.n_prod != cfg.n_prod:
        raise ValueError("dataset well counts differ from the configuration")


def _batch_arrays(model_norm: Normalizer, cfg: SurrogateConfig, lnk, controls):
    ny, nx = cfg.grid_shape
    x = model_norm.lnk(lnk).reshape(-1, 1, ny, nx)
    u = model_norm.controls(controls)
    return x, u


def train(dataset: Dataset, config: SurrogateConfig, *, log_every: int = 0,
          callback=None) -> SurrogateModel:
    """Fit the surrogate with Adam on shuffled mini-batches.

    The history records, per epoch, the sample-weighted mean of each loss
    term over the epoch's batches, so ``total == recon + seque``.
    """
    _check_dataset(dataset, config)
    rng = np.random.default_rng(config.seed)
    net = _Net(config, rng)
    params = net.parameters()
    opt = Adam(params, learning_rate=config.learning_rate)
    targets = dataset.observed()
    norm = Normalizer.fit(dataset.controls, targets)
    x_all, u_all = _batch_arrays(norm, config, dataset.lnk, dataset.controls)
    y_all = norm.outputs(targets)
    n = len(dataset)
    hist = {"recon": [], "seque": [], "total": []}
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        s_rec = s_seq = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            l_rec, l_seq = net.losses(T.Tensor(x_all[idx]), T.Tensor(u_all[idx]),
                                      y_all[idx])
            loss = T.add(T.scale(l_rec, config.recon_weight), l_seq)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}: "
                                    f"recon={float(l_rec.data)}, seque={float(l_seq.data)}")
            opt.zero_grad()
            loss.backward()
            if config.weight_decay:
                for p in params.values():
                    p.grad = p.grad + config.weight_decay * p.data
            opt.step()
            s_rec += float(l_rec.data) * idx.size
            s_seq += float(l_seq.data) * idx.size
        rec, seq = s_rec / n, s_seq / n
        hist["recon"].append(rec)
        hist["seque"].append(seq)
        hist["total"].append(rec + seq)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("epoch %d recon %.5g seque %.5g (%.1fs)", epoch, rec, seq,
                        time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, rec, seq)
    values = {k: p.data.copy() for k, p in params.items()}
    return SurrogateModel(config, values, norm, hist, dataset.sample_hashes(),
                          dataset.spec.grid)


def loss_gradient_check(config: SurrogateConfig, rng: np.random.Generator, *,
                        batch: int = 2, n_probes: int = 20, eps: float = 1e-3,
                        order: int = 4):
    """Finite-difference check of the full training loss on a random batch.

    Gradients of ``recon_weight * L_recon + L_seque`` with respect to every
    network parameter are probed at ``n_probes`` random entries. The loss
    sums hundreds of squared pixels, so a two-point difference at small
    ``eps`` is roundoff-limited; the default five-point stencil avoids
    that. Returns a
    :class:`~geoclo.nn.GradCheck`.
    """
    net = _Net(config, rng)
    ny, nx = config.grid_shape
    x = rng.standard_normal((batch, 1, ny, nx))
    u = rng.uniform(size=(batch, config.n_steps, config.n_controls))
    y = rng.uniform(size=(batch, config.n_steps, config.n_outputs))
    base = {k: p.data.copy() for k, p in net.parameters().items()}

    def fn(tensors):
        net.bind(tensors)
        l_rec, l_seq = net.losses(T.Tensor(x), T.Tensor(u), y)
        return T.add(T.scale(l_rec, config.recon_weight), l_seq)

    return gradient_check(fn, base, n_probes=n_probes, eps=eps, rng=rng, order=order)


# -- inference ---------------------------------------------------------------

def _field_array(model: SurrogateModel, fields) -> np.ndarray:
    if isinstance(fields, PermField):
        fields = [fields]
    if isinstance(fields, np.ndarray):
        lnk = np.atleast_2d(np.asarray(fields, float))
    else:
        lnk = np.array([f.lnk for f in fields], dtype=float)
    ny, nx = model.config.grid_shape
    if lnk.shape[1] != ny * nx:
        raise ValueError(f"field has {lnk.shape[1]} cells, model expects {ny * nx}")
    return lnk


def encode(model: SurrogateModel, fields) -> np.ndarray:
    """Latent vector(s): (latent_dim,) for one field, (N, latent_dim) for many."""
    single = isinstance(fields, PermField)
    lnk = _field_array(model, fields)
    ny, nx = model.config.grid_shape
    z = model.net.encode(T.Tensor(model.normalizer.lnk(lnk).reshape(-1, 1, ny, nx))).data
    return z[0] if single else z


def reconstruct(model: SurrogateModel, latent: np.ndarray) -> np.ndarray:
    """Decode latent vector(s) back to ln K, shape (N, n_cells) or (n_cells,)."""
    z = np.asarray(latent, float)
    single = z.ndim == 1
    img = model.net.decode(T.Tensor(np.atleast_2d(z))).data
    out = model.normalizer.lnk_inv(img.reshape(img.shape[0], -1))
    return out[0] if single else out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def latent_drive(model: SurrogateModel, latents: np.ndarray) -> np.ndarray:
    """Time-invariant LSTM gate input from the latent part: ``z @ Wx_z + b``."""
    p = model.params
    L = model.config.latent_dim
    return np.atleast_2d(latents) @ p["lstm.Wx"][:L] + p["lstm.b"]


def rollout(model: SurrogateModel, drive: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Plain-numpy LSTM + head pass returning physical-unit outputs.

    ``drive`` is (B, 4H) from :func:`latent_drive`; ``controls`` is
    (B, n_steps, n_controls) in physical units. Result is
    (B, n_steps, n_outputs).
    """
    cfg, p = model.config, model.params
    H, L = cfg.lstm_hidden, cfg.latent_dim
    B, n_t = controls.shape[0], controls.shape[1]
    if cfg.use_controls:
        u = model.normalizer.controls(controls)
        gx = drive[:, None, :] + (u.reshape(B * n_t, -1) @ p["lstm.Wx"][L:]).reshape(
            B, n_t, 4 * H)
    else:
        gx = np.broadcast_to(drive[:, None, :], (B, n_t, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    Wh = p["lstm.Wh"]
    hs = np.empty((B, n_t, H))
    for t in range(n_t):
        z = gx[:, t] + h @ Wh
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs[:, t] = h
    y = hs.reshape(B * n_t, H) @ p["head.W"] + p["head.b"]
    return model.normalizer.outputs_inv(y.reshape(B, n_t, cfg.n_outputs))


def _check_controls(model: SurrogateModel, controls: np.ndarray) -> None:
    cfg = model.config
    if controls.ndim != 3 or controls.shape[1] != cfg.n_steps:
        raise ValueError(f"surrogate is fixed-length: expected {cfg.n_steps} steps, "
                         f"got controls shaped {controls.shape}")
    if controls.shape[2] != cfg.n_controls:
        raise ValueError(f"expected {cfg.n_controls} control channels, got {controls.shape[2]}")
    if cfg.use_controls:
        nm = model.normalizer
        tol = 1e-9 * np.maximum(np.abs(nm.ctrl_max), 1.0)
        if np.any(controls < nm.ctrl_min - tol) or np.any(controls > nm.ctrl_max + tol):
            warnings.warn("controls outside the trained range; extrapolating",
                          RuntimeWarning, stacklevel=3)


def predict_batch(model: SurrogateModel, fields, controls: np.ndarray) -> np.ndarray:
    """Observed-channel predictions for paired fields and control matrices.

    ``fields`` is N fields (or an (N, n_cells) array) and ``controls`` is
    (N, n_steps, n_controls), or a single (n_steps, n_controls) matrix
    shared by every field.
    """
    lnk = _field_array(model, fields)
    controls = np.asarray(controls, float)
    if controls.ndim == 2:
        controls = np.broadcast_to(controls, (lnk.shape[0],) + controls.shape)
    _check_controls(model, controls)
    if controls.shape[0] != lnk.shape[0]:
        raise ValueError(f"{lnk.shape[0]} fields but {controls.shape[0]} schedules")
    return rollout(model, latent_drive(model, encode(model, lnk)), controls)


def predict(model: SurrogateModel, fld: PermField, schedule: ControlSchedule,
            t0: float = 0.0) -> ProductionSeries:
    """Predict a full production series, shaped like simulator output."""
    if schedule.n_steps != model.config.n_steps:
        raise ValueError(f"surrogate is fixed-length: expected {model.config.n_steps} "
                         f"steps, got {schedule.n_steps}")
    obs = predict_batch(model, [fld], schedule.to_matrix()[None])[0]
    return ProductionSeries.from_observed(obs, schedule, t0)


# -- evaluation --------------------------------------------------------------

def r2_score(ref: np.ndarray, pred: np.ndarray) -> float:
    ref, pred = np.ravel(ref), np.ravel(pred)
    ss_tot = np.sum((ref - ref.mean())**2)
    ss_res = np.sum((ref - pred)**2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else float("-inf")
    return float(1.0 - ss_res / ss_tot)


def fit_slope(ref: np.ndarray, pred: np.ndarray) -> float:
    """Least-squares slope of ``pred`` against ``ref`` (with intercept)."""
    ref, pred = np.ravel(ref), np.ravel(pred)
    d = ref - ref.mean()
    den = np.dot(d, d)
    return float(np.dot(d, pred - pred.mean()) / den) if den > 0 else float("nan")


def channel_names(dataset: Dataset) -> list[str]:
    prod = [w.name for w in dataset.wells if w.kind == "producer"]
    inj = [w.name for w in dataset.wells if w.kind == "injector"]
    return ([f"{p}_rate" for p in prod] + [f"{p}_temp" for p in prod]
            + [f"{i}_bhp" for i in inj])


@dataclass
class AccuracyReport:
    channels: list[str]
    rmse: list[float]
    r2: list[float]
    slope: list[float]
    n_samples: int
    scatter: np.ndarray = field(repr=False)
    """Rows of (sample, step, channel index, reference, predicted)."""

    def to_dict(self) -> dict:
        return {"channels": self.channels, "rmse": self.rmse, "r2": self.r2,
                "slope": self.slope, "n_samples": self.n_samples,
                "min_r2": min(self.r2), "slope_range": [min(self.slope), max(self.slope)]}

    def write(self, out_dir, time_nodes=None) -> None:
        """Write ``report.json`` plus ``scatter.csv`` (all steps) and one
        ``scatter_step<k>.csv`` per requested time node."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        _write_scatter(out / "scatter.csv", self.scatter, self.channels)
        for k in time_nodes or ():
            rows = self.scatter[self.scatter[:, 1] == k]
            _write_scatter(out / f"scatter_step{int(k):02d}.csv", rows, self.channels)


def _write_scatter(path: Path, rows: np.ndarray, channels: list[str]) -> None:
    lines = ["sample,step,channel,reference,predicted"]
    lines += [f"{int(s)},{int(t)},{channels[int(c)]},{r!r},{p!r}"
              for s, t, c, r, p in ((a, b, c, float(d), float(e)) for a, b, c, d, e in rows)]
    path.write_text("\n".join(lines) + "\n")


def evaluate(model: SurrogateModel, dataset: Dataset, *, allow_overlap: bool = False,
             predictor=None) -> AccuracyReport:
    """Per-channel RMSE, R² and scatter data against simulator references.

    Samples whose hash appears in the training manifest are refused unless
    ``allow_overlap``. ``predictor(lnk, controls) -> outputs`` replaces the
    model's own prediction (used for stubs and baselines).
    """
    if not allow_overlap:
        shared = set(dataset.sample_hashes()) & set(model.train_hashes)
        if shared:
            raise OverlapError(f"{len(shared)} evaluation samples are in the training set")
    ref = dataset.observed()
    if predictor is None:
        pred = predict_batch(model, dataset.lnk, dataset.controls)
    else:
        pred = np.asarray(predictor(dataset.lnk, dataset.controls), float)
    n, n_t, n_c = ref.shape
    rmse = [float(np.sqrt(np.mean((pred[..., c] - ref[..., c])**2))) for c in range(n_c)]
    r2 = [r2_score(ref[..., c], pred[..., c]) for c in range(n_c)]
    slope = [fit_slope(ref[..., c], pred[..., c]) for c in range(n_c)]
    s, t, c = np.meshgrid(np.arange(n), np.arange(n_t), np.arange(n_c), indexing="ij")
    scatter = np.column_stack([s.ravel(), t.ravel(), c.ravel(), ref.ravel(), pred.ravel()])
    return AccuracyReport(channel_names(dataset), rmse, r2, slope, n, scatter)

"""Deterministic SVG figures rendered from run-directory CSVs.

Matplotlib's SVG backend is pinned to a fixed hash salt, no date metadata
and text kept as ``<text>`` elements, so the same data produce
byte-identical files.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "scatter", "convergence", "heatmap", "npv_strip", "rmse_spread", "envelope",
    "emit_plots", "read_csv",
]

logger = logging.getLogger(__name__)

_RC = {"svg.hashsalt": "geoclo", "svg.fonttype": "none", "font.family": "DejaVu Sans",
       "figure.dpi": 72, "savefig.dpi": 72, "path.simplify": False}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _fig(size=(5.0, 4.0)):
    with matplotlib.rc_context(_RC):
        return plt.subplots(figsize=size)


def scatter(path, ref, pred, title: str = "", return_axes: bool = False):
    """Predicted vs reference with the 45 degree line; empty data gives a
    "no data" annotation on bare axes."""
    ref = np.asarray(ref, float).ravel()
    pred = np.asarray(pred, float).ravel()
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        if ref.size == 0:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)
            lo, hi = 0.0, 1.0
        else:
            lo = float(min(ref.min(), pred.min()))
            hi = float(max(ref.max(), pred.max()))
            if hi == lo:
                lo, hi = lo - 1.0, hi + 1.0
            pad = 0.05 * (hi - lo)
            lo, hi = lo - pad, hi + pad
            ax.scatter(ref, pred, s=6, color="tab:blue", linewidths=0)
        ax.plot([lo, hi], [lo, hi], color="k", lw=0.8, ls="--")
        ax.set_xlim(lo, hi)
        ax.set_ylim(lo, hi)
        ax.set_aspect("equal")
        ax.set_xlabel("simulator")
        ax.set_ylabel("surrogate")
        ax.set_title(title)
        if return_axes:
            fig.canvas.draw()
            return fig, ax
        return _save(fig, path)


def convergence(path, values, label: str = "best"):
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        v = np.asarray(values, float)
        ax.plot(np.arange(v.size), v, color="tab:red", lw=1.2)
        ax.set_xlabel("generation")
        ax.set_ylabel(label)
        return _save(fig, path)


def heatmap(path, values, title: str = ""):
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        im = ax.imshow(np.asarray(values, float), origin="lower", cmap="viridis",
                       interpolation="nearest")
        fig.colorbar(im, ax=ax)
        ax.set_title(title)
        return _save(fig, path)


def npv_strip(path, baseline, feasible, optimized=None, reference=None):
    """Random-schedule NPVs as dots, the optimized NPV as a solid line and
    the constant-control reference as a dashed line."""
    b = np.asarray(baseline, float)
    f = np.asarray(feasible, bool)
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        idx = np.arange(b.size)
        if b.size:
            ax.scatter(idx[f], b[f], s=8, color="tab:blue", label="random (feasible)")
            ax.scatter(idx[~f], b[~f], s=8, color="tab:gray", marker="x",
                       label="random (infeasible)")
        if optimized is not None:
            ax.axhline(optimized, color="tab:red", lw=1.2, label="optimized")
        if reference is not None:
            ax.axhline(reference, color="k", lw=1.0, ls="--", label="reference")
        ax.set_xlabel("schedule")
        ax.set_ylabel("NPV")
        ax.legend(fontsize=7, loc="lower right")
        return _save(fig, path)


def rmse_spread(path, labels, rmse, spread):
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        x = np.arange(len(rmse))
        ax.plot(x, rmse, marker="o", ms=3, label="RMSE")
        ax.plot(x, spread, marker="s", ms=3, label="spread")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.legend(fontsize=7)
        return _save(fig, path)


def envelope(path, truth, prior_mean, prior_std, final_mean, final_std, name: str = ""):
    """Data-match series: truth line plus prior/final means with std bars."""
    t = np.arange(1, len(truth) + 1)
    with matplotlib.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        ax.errorbar(t, prior_mean, yerr=prior_std, fmt="o", ms=2, color="tab:gray",
                    capsize=2, lw=0.8, label="prior")
        ax.errorbar(t + 0.2, final_mean, yerr=final_std, fmt="o", ms=2, color="tab:blue",
                    capsize=2, lw=0.8, label="final")
        ax.plot(t, truth, color="tab:red", lw=1.0, label="truth")
        ax.set_xlabel("step")
        ax.set_title(name)
        ax.legend(fontsize=7)
        return _save(fig, path)


# -- run-directory rendering --------------------------------------------------

def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _col(rows, header, name, cast=float):
    i = header.index(name)
    return [cast(r[i]) for r in rows]


def emit_plots(run_dir, out_dir=None) -> tuple[list[Path], list[str]]:
    """Render every figure whose source CSV exists under ``run_dir``.

    SVGs go to ``out_dir`` (default ``run_dir/plots``). Returns the written
    paths and a listing of skipped figures with the missing input.
    """
    run = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run / "plots"
    written: list[Path] = []
    skipped: list[str] = []

    def need(rel):
        p = run / rel
        if not p.exists():
            skipped.append(f"{rel}: missing")
            return None
        return read_csv(p)

    for sdir in sorted(run.glob("surrogate_*")):
        for f in sorted(sdir.glob("scatter*.csv")):
            h, rows = read_csv(f)
            if rows:
                ref, pred, ch = (_col(rows, h, "reference"), _col(rows, h, "predicted"),
                                 _col(rows, h, "channel", str))
                for name in sorted(set(ch)):
                    sel = [k for k, c in enumerate(ch) if c == name]
                    written.append(scatter(out / sdir.name / f"{f.stem}_{name}.svg",
                                           [ref[k] for k in sel], [pred[k] for k in sel],
                                           name))
            else:
                written.append(scatter(out / sdir.name / f"{f.stem}.svg", [], [], f.stem))
    for rel, name in (("de/convergence.csv", "convergence.svg"),):
        d = need(rel)
        if d is not None:
            h, rows = d
            written.append(convergence(out / name, [-v for v in _col(rows, h, "best")],
                                       "best NPV"))
    for f in sorted((run / "de").glob("step*.csv")) if (run / "de").exists() else []:
        h, rows = read_csv(f)
        written.append(convergence(out / "de" / f"{f.stem}.svg",
                                   [-v for v in _col(rows, h, "best")], "best NPV"))
    d = need("rmse_spread.csv")
    if d is not None:
        h, rows = d
        written.append(rmse_spread(out / "rmse_spread.svg", _col(rows, h, "stage", str),
                                   _col(rows, h, "rmse"), _col(rows, h, "spread")))
    for name in ("truth", "prior_mean", "final_mean", "final_var"):
        d = need(f"fields/{name}.csv")
        if d is None:
            continue
        h, rows = d
        x, y, v = (np.array(_col(rows, h, h[0])), np.array(_col(rows, h, h[1])),
                   np.array(_col(rows, h, h[2])))
        nx, ny = np.unique(x).size, np.unique(y).size
        grid = np.empty((ny, nx))
        ix = np.searchsorted(np.unique(x), x)
        iy = np.searchsorted(np.unique(y), y)
        grid[iy, ix] = v
        written.append(heatmap(out / f"{name}.svg", grid, name.replace("_", " ")))
    d = need("baseline_npv.csv")
    if d is not None:
        h, rows = d
        summary = _summary(run)
        written.append(npv_strip(out / "npv_comparison.svg", _col(rows, h, "npv"),
                                 [bool(int(v)) for v in _col(rows, h, "feasible", str)],
                                 summary.get("realized_npv", summary.get("truth_npv")),
                                 summary.get("reference_npv")))
    if (run / "envelopes.csv").exists():
        h, rows = read_csv(run / "envelopes.csv")
        chans = _col(rows, h, "channel", str)
        for name in dict.fromkeys(chans):
            sel = [r for r, c in zip(rows, chans) if c == name]
            cols = [_col(sel, h, k) for k in ("truth", "prior_mean", "prior_std",
                                              "final_mean", "final_std")]
            written.append(envelope(out / f"match_{name}.svg", *cols, name=name))
    for s in skipped:
        logger.info("plot skipped: %s", s)
    return written, skipped


def _summary(run: Path) -> dict:
    import json
    for name in ("loop_manifest.json", "optimize_manifest.json"):
        p = run / name
        if p.exists():
            return json.loads(p.read_text()).get("summary", {})
    return {}

"""Figure rendering for run directories.

Every plot is built from the delimited plot data the runner already wrote,
so the PNGs are a pure function of the CSVs sitting next to them.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_run", "render_compare"]

_STYLES = {
    "true": dict(color="black", linestyle="-", label="true"),
    "observed": dict(color="black", linestyle="-", label="observed"),
    "final": dict(color="tab:red", linestyle="--", label="final"),
    "initial": dict(color="tab:blue", linestyle=":", label="initial"),
}

plt.rcParams.update({"figure.dpi": 130, "savefig.bbox": "tight", "font.size": 9})


def _read_csv(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                cols[name].append(value)
    return cols


def _floats(col) -> np.ndarray:
    return np.array([float(v) if v else np.nan for v in col])


def _save(fig, path: Path) -> None:
    fig.savefig(path)
    plt.close(fig)


def _curve_figure(data: dict, xkey: str, series: list, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    x = _floats(data[xkey])
    for name in series:
        ax.plot(x, _floats(data[name]), **_STYLES[name])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    return fig


def _render_loss(run_dir: Path) -> None:
    log = run_dir / "run_log.csv"
    if not log.exists():
        return
    data = _read_csv(log)
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.plot(_floats(data["iteration"]), _floats(data["loss"]), color="tab:gray", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    _save(fig, run_dir / "fig_loss.png")


def _render_onedim(run_dir: Path) -> None:
    params = _read_csv(run_dir / "plot_params_kde.csv")
    _save(
        _curve_figure(params, "grid", ["initial", "final", "true"], r"$\theta$", "density"),
        run_dir / "fig_parameter_space.png",
    )
    data = _read_csv(run_dir / "plot_data_kde.csv")
    _save(
        _curve_figure(data, "grid", ["initial", "final", "observed"], "y", "density"),
        run_dir / "fig_data_space.png",
    )


def _render_nanocluster(run_dir: Path) -> None:
    data = _read_csv(run_dir / "plot_scatter.csv")
    labels = np.array(data["cloud_label"])
    x, y = _floats(data["x"]), _floats(data["y"])
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0), sharex=True, sharey=True)
    for ax, label in zip(axes, ("initial", "final", "true")):
        sel = labels == label
        ax.scatter(x[sel], y[sel], s=3, alpha=0.4, color=_STYLES[label]["color"])
        ax.set_title(label)
        ax.set_xlabel(r"$\theta_1$")
    axes[0].set_ylabel(r"$\theta_2$")
    _save(fig, run_dir / "fig_scatter.png")


def _render_toyprotein(run_dir: Path) -> None:
    data = _read_csv(run_dir / "plot_mode_marginals.csv")
    modes = _floats(data["mode"]).astype(int)
    grid = _floats(data["grid"])
    n_modes = modes.max() + 1
    fig, axes = plt.subplots(1, n_modes, figsize=(2.6 * n_modes, 2.6))
    for mode, ax in enumerate(np.atleast_1d(axes)):
        sel = modes == mode
        for name in ("initial", "final", "true"):
            ax.plot(grid[sel], _floats(data[name])[sel], **_STYLES[name])
        ax.set_title(f"mode {mode + 1}")
        ax.set_xlabel(r"$\theta$")
    np.atleast_1d(axes)[0].set_ylabel("density")
    np.atleast_1d(axes)[-1].legend(frameon=False, fontsize=7)
    _save(fig, run_dir / "fig_mode_marginals.png")

    pca = _read_csv(run_dir / "plot_pca.csv")
    labels = np.array(pca["cloud_label"])
    b1, b2 = _floats(pca["beta1"]), _floats(pca["beta2"])
    fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
    for ax, values, name in ((axes[0], b1, r"$\beta_1$"), (axes[1], b2, r"$\beta_2$")):
        for label in ("true", "final", "initial"):
            sel = labels == label
            sample = values[sel]
            lo, hi = sample.min(), sample.max()
            span = hi - lo if hi > lo else 1.0
            grid = np.linspace(lo - 0.1 * span, hi + 0.1 * span, 200)
            width = max(1e-6, 1.06 * sample.std() * sample.size ** -0.2)
            dens = np.exp(-0.5 * ((grid[:, None] - sample[None, :]) / width) ** 2).sum(axis=1)
            dens /= sample.size * width * np.sqrt(2 * np.pi)
            ax.plot(grid, dens, **_STYLES[label])
        ax.set_xlabel(name)
    axes[0].set_ylabel("density")
    axes[1].legend(frameon=False, fontsize=7)
    _save(fig, run_dir / "fig_pca.png")


def _render_mapdto(run_dir: Path) -> None:
    truth = _read_csv(run_dir / "truth_latents.csv")
    particles = _read_csv(run_dir / "map_particles.csv")
    if "dim0" not in truth or "dim0" not in particles:
        return
    t = _floats(truth["dim0"])
    p = _floats(particles["dim0"])
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.hist(t, bins=60, density=True, alpha=0.5, color="tab:gray", label="true latents")
    for i, v in enumerate(p):
        ax.axvline(v, color="tab:red", linestyle="--", label="MAP particles" if i == 0 else None)
    ax.set_xlabel(r"$\theta$")
    ax.legend(frameon=False)
    _save(fig, run_dir / "fig_map_fit.png")


def _render_diagnostics(run_dir: Path) -> None:
    data = _read_csv(run_dir / "diagnostics.csv")
    checks = np.array(data["check"])
    setting = _floats(data["setting"])
    value = _floats(data["value"])
    stderr = _floats(data["stderr"])
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0))
    sel = checks == "large_data"
    axes[0].loglog(setting[sel], value[sel], "o-", color="tab:blue")
    axes[0].set_xlabel("N observations")
    axes[0].set_ylabel(r"median $|E_N - E_{ref}|$")
    sel = checks == "large_k"
    axes[1].errorbar(setting[sel], value[sel], yerr=stderr[sel], fmt="s-", color="tab:orange")
    axes[1].set_xscale("log", base=2)
    axes[1].set_xlabel("K particles")
    axes[1].set_ylabel("optimized loss")
    _save(fig, run_dir / "fig_diagnostics.png")


def render_run(run_dir, experiment: str) -> None:
    run_dir = Path(run_dir)
    _render_loss(run_dir)
    if experiment == "onedim":
        _render_onedim(run_dir)
    elif experiment == "nanocluster":
        _render_nanocluster(run_dir)
    elif experiment == "toyprotein":
        _render_toyprotein(run_dir)
    elif experiment == "mapdto":
        _render_mapdto(run_dir)
    elif experiment == "diagnostics":
        _render_diagnostics(run_dir)


def render_compare(run_dir) -> None:
    run_dir = Path(run_dir)
    data = _read_csv(run_dir / "compare_losses.csv")
    sigma = _floats(data["sigma"])
    losses = np.array(data["loss"])
    iters = _floats(data["iterations"])
    wall = _floats(data["wall_ms"]) / 60000.0
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0))
    for name, marker, color in (("energy", "o", "tab:blue"), ("kl", "s", "tab:orange")):
        sel = losses == name
        axes[0].plot(sigma[sel], iters[sel], marker=marker, color=color, label=name)
        axes[1].plot(sigma[sel], wall[sel], marker=marker, color=color, label=name)
    axes[0].set_xlabel(r"$\sigma$")
    axes[0].set_ylabel("iterations to threshold")
    axes[1].set_xlabel(r"$\sigma$")
    axes[1].set_ylabel("minutes to threshold")
    axes[0].legend(frameon=False)
    _save(fig, run_dir / "fig_compare.png")

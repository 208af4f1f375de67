"""Result reporting: the delimited per-method results table and the
matplotlib figures written alongside it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .meshing import DistanceReport

TABLE_COLUMNS = ["method", "rms", "mean", "hausdorff", "level",
                 "n_samples", "discarded_fraction"]


@dataclass(frozen=True)
class MethodResult:
    method: str                 # e.g. "gt", "drift", "ours"
    level: float
    report: DistanceReport

    def row(self) -> dict:
        r = self.report
        return {
            "method": self.method,
            "rms": f"{r.rms:.12g}",
            "mean": f"{r.mean:.12g}",
            "hausdorff": f"{r.hausdorff_max:.12g}",
            "level": f"{self.level:.12g}",
            "n_samples": r.n_samples,
            "discarded_fraction": f"{r.discarded_fraction:.12g}",
        }


def write_results_table(path, results: list[MethodResult]):
    """Tab-delimited table, one row per method (RMS / Mean columns)."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, delimiter="\t")
        w.writeheader()
        for res in results:
            w.writerow(res.row())


def read_results_table(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


# ---------------------------------------------------------------------------
# figures


def plot_training_curves(log: list[dict], path):
    """Loss components and sharpness over iterations."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    it = [r["iteration"] for r in log]
    for key, label in [("loss_int", "intensity"), ("loss_eik", "eikonal"),
                       ("loss_reg", "regularizer"), ("loss_total", "total")]:
        ax1.plot(it, [r[key] for r in log], label=label)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(it, [r["s"] for r in log], label="sharpness s")
    ax2.plot(it, [r["mean_twist_norm"] for r in log], label="mean twist norm")
    ax2.set_xlabel("iteration")
    ax2.set_yscale("log")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_image_pair(observed: np.ndarray, rendered: np.ndarray, path,
                    titles=("observed", "rendered")):
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    vmax = max(observed.max(), rendered.max()) or 1.0
    for ax, img, title in zip(axes, (observed, rendered), titles):
        im = ax.imshow(img, origin="lower", aspect="auto", vmin=0, vmax=vmax,
                       cmap="viridis")
        ax.set_title(title)
        ax.set_xlabel("azimuth bin")
        ax.set_ylabel("range bin")
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory_error(err: np.ndarray, path):
    """Per-frame pose error components (n, 6): x y z roll pitch yaw."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    k = np.arange(len(err))
    for i, label in enumerate(("x", "y", "z")):
        ax1.plot(k, err[:, i], label=label)
    ax1.set_xlabel("frame")
    ax1.set_ylabel("translation error [m]")
    ax1.legend()
    for i, label in enumerate(("roll", "pitch", "yaw")):
        ax2.plot(k, err[:, 3 + i], label=label)
    ax2.set_xlabel("frame")
    ax2.set_ylabel("rotation error [rad]")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_results_bars(results: list[MethodResult], path):
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = [r.method for r in results]
    x = np.arange(len(methods))
    ax.bar(x - 0.2, [r.report.rms for r in results], width=0.4, label="RMS")
    ax.bar(x + 0.2, [r.report.mean for r in results], width=0.4, label="Mean")
    ax.set_xticks(x, methods)
    ax.set_ylabel("surface distance [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(outdir, results: list[MethodResult],
                 logs: dict[str, list[dict]] | None = None,
                 trajectory_errors: dict[str, np.ndarray] | None = None):
    """Results table plus figures, all into one directory; returns the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "results.tsv"}
    write_results_table(paths["table"], results)
    if results:
        paths["bars"] = out / "results_bars.png"
        plot_results_bars(results, paths["bars"])
    for name, log in (logs or {}).items():
        if log:
            p = out / f"training_{name}.png"
            plot_training_curves(log, p)
            paths[f"training_{name}"] = p
    for name, err in (trajectory_errors or {}).items():
        p = out / f"trajectory_error_{name}.png"
        plot_trajectory_error(err, p)
        paths[f"trajectory_error_{name}"] = p
    (out / "report_manifest.json").write_text(
        json.dumps({k: str(v.name) for k, v in paths.items()}, indent=2, sort_keys=True))
    return paths

"""Render training, curriculum, and inference-scaling figures from CSVs.

Consumes the metrics schema (env_step, episode_return, win_rate, loss,
epsilon, wall_clock_s) and the benchmark schema (model, n, median_s, iqr_s).
Multi-seed curves are resampled onto a common step grid and drawn as the
median with an interquartile band.
"""
from __future__ import annotations

import argparse
import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ewma import ewma  # noqa: E402

KINDS = ("training", "scaling", "curriculum")
GRID_POINTS = 256


@dataclass
class CurveSpec:
    csv_paths: list[str]
    label: str
    alpha: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("smoothing factor must be in [0, 1)")
        if not self.csv_paths:
            raise ValueError(f"curve {self.label!r} has no CSV paths")


def _read_columns(path: str, required: tuple[str, ...]) -> dict[str, np.ndarray]:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        rows = list(reader)
    out = {}
    for col in required:
        try:
            out[col] = np.array([float(r[col]) for r in rows])
        except ValueError as err:
            raise ValueError(f"{path}: column {col!r} is not numeric") from err
    return out


def _seed_curves(spec: CurveSpec) -> tuple[np.ndarray, np.ndarray]:
    """Resample each seed's smoothed win rate onto a shared step grid."""
    runs = []
    for path in spec.csv_paths:
        cols = _read_columns(path, ("env_step", "win_rate"))
        if cols["env_step"].size == 0:
            raise ValueError(f"{path}: no metric rows")
        runs.append((cols["env_step"], ewma(cols["win_rate"], spec.alpha)))
    lo = max(steps[0] for steps, _ in runs)
    hi = min(steps[-1] for steps, _ in runs)
    grid = np.linspace(lo, hi, GRID_POINTS)
    stacked = np.stack([np.interp(grid, steps, values) for steps, values in runs])
    return grid, stacked


def _draw_metric_curves(ax, curvespecs: list[CurveSpec]) -> None:
    for spec in curvespecs:
        grid, stacked = _seed_curves(spec)
        median = np.median(stacked, axis=0)
        line, = ax.plot(grid, median, label=spec.label)
        if stacked.shape[0] > 1:
            q1 = np.percentile(stacked, 25, axis=0)
            q3 = np.percentile(stacked, 75, axis=0)
            ax.fill_between(grid, q1, q3, alpha=0.2, color=line.get_color())
    ax.set_xlabel("environment steps")
    ax.set_ylabel("win rate (smoothed)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()


def _draw_scaling(ax, curvespecs: list[CurveSpec]) -> None:
    for spec in curvespecs:
        for path in spec.csv_paths:
            cols = _read_columns(path, ("n", "median_s"))
            with open(path) as fh:
                reader = csv.DictReader(fh)
                if "model" not in (reader.fieldnames or []):
                    raise ValueError(f"{path}: missing column 'model'")
                models = [r["model"] for r in reader]
            for model in sorted(set(models)):
                sel = np.array([m == model for m in models])
                order = np.argsort(cols["n"][sel])
                ax.plot(cols["n"][sel][order], cols["median_s"][sel][order] * 1e6,
                        marker="o", label=f"{spec.label}:{model}" if spec.label
                        else model)
    ax.set_xlabel("entities")
    ax.set_ylabel("median forward time (us)")
    ax.legend()


def render(curvespecs: list[CurveSpec], kind: str, out_dir: str) -> list[str]:
    """Write one figure (PNG and SVG) for the requested kind; returns paths."""
    if kind not in KINDS:
        raise ValueError(f"unknown figure kind {kind!r}")
    if not curvespecs:
        raise ValueError("no curves to draw")
    os.makedirs(out_dir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if kind == "scaling":
        _draw_scaling(ax, curvespecs)
        ax.set_title("inference time scaling")
    else:
        _draw_metric_curves(ax, curvespecs)
        ax.set_title("training progress" if kind == "training"
                     else "curriculum vs from-scratch")
    fig.tight_layout()
    paths = []
    for ext in ("png", "svg"):
        path = os.path.join(out_dir, f"{kind}.{ext}")
        fig.savefig(path)
        paths.append(path)
    plt.close(fig)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="spectra-plots",
                                     description="render metric/benchmark figures")
    parser.add_argument("--kind", choices=KINDS, required=True)
    parser.add_argument("--curve", action="append", required=True,
                        metavar="LABEL=CSV[,CSV...]")
    parser.add_argument("--alpha", type=float, default=0.99)
    parser.add_argument("--out", default="figures")
    args = parser.parse_args(argv)
    specs = []
    for item in args.curve:
        label, _, paths = item.partition("=")
        if not paths:
            parser.error(f"--curve {item!r} is not LABEL=CSV[,CSV...]")
        specs.append(CurveSpec(csv_paths=paths.split(","), label=label,
                               alpha=args.alpha))
    for path in render(specs, args.kind, args.out):
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

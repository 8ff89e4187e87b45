"""
Plot data for the project

    python plot.py [DIR ...]

Looks in each directory for the artifacts of `halomd sweep`, `halomd
fit-scaling`, `halomd train` and `halomd gyrate` and writes a PNG next to
every one it finds.
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position
import numpy as np  # pylint: disable=wrong-import-position
import pandas as pd  # pylint: disable=wrong-import-position


def plot_scaling(directory: Path) -> None:
    """Measured throughput per rank count, the fitted model and efficiency"""
    points = pd.read_csv(directory / "sweep.csv")
    means = points.groupby("n_ranks")["throughput"].agg(["mean", "std"]).reset_index()
    mode = str(points["mode"].iloc[0])

    fig, (ax_t, ax_e) = plt.subplots(1, 2, figsize=(10, 4))
    ax_t.bar(means["n_ranks"].astype(str), means["mean"], yerr=means["std"].fillna(0.0), label="measured")
    fit_path = directory / "fit.json"
    if fit_path.exists():
        fit = json.loads(fit_path.read_text(encoding="utf-8"))
        # model throughput is 1 / (alpha / n + beta)
        model = 1.0 / (fit["alpha"] / means["n_ranks"] + fit["beta"])
        ax_t.plot(means["n_ranks"].astype(str), model, "k.-", label=f"fit, r² = {fit['r_squared']:.3f}")
    ax_t.legend()
    ax_t.set_xlabel("Simulated ranks")
    ax_t.set_ylabel("Throughput [time units / day]")
    ax_t.set_title(f"{mode.capitalize()} scaling")

    reference = means.iloc[0]
    if mode == "strong":
        efficiency = means["mean"] / (means["n_ranks"] / reference["n_ranks"] * reference["mean"])
    else:
        efficiency = means["mean"] / reference["mean"]
    ax_e.plot(means["n_ranks"], efficiency, "o-")
    ax_e.axhline(1.0, color="grey", linestyle=":")
    ax_e.set_xscale("log", base=2)
    ax_e.set_ylim(0, 1.1 * max(1.0, float(np.nanmax(efficiency))))
    ax_e.set_xlabel("Simulated ranks")
    ax_e.set_ylabel("Efficiency")
    ax_e.set_title("Efficiency vs. ranks")
    fig.tight_layout()
    fig.savefig(directory / "scaling.png")
    plt.close(fig)


def plot_curve(directory: Path) -> None:
    """Training and validation force RMSE per epoch"""
    curve = pd.read_csv(directory / "curve.csv")
    plt.plot(curve["epoch"], curve["train_rmse"], label="train")
    if curve["valid_rmse"].notna().any():
        plt.plot(curve["epoch"], curve["valid_rmse"], label="validation")
    plt.legend()
    plt.yscale("log")
    plt.xlabel("Epoch")
    plt.ylabel("Force RMSE")
    plt.title("Learning curve")
    plt.savefig(directory / "curve.png")
    plt.close()


def plot_gyration(directory: Path) -> None:
    """Radii of gyration along the trajectory"""
    series = pd.read_csv(directory / "gyration.csv")
    for axis in ("rx", "ry", "rz"):
        plt.plot(series["frame"], series[axis], label=axis)
    plt.legend()
    plt.xlabel("Frame")
    plt.ylabel("Radius of gyration")
    plt.title("Radius of gyration vs. frame")
    plt.savefig(directory / "gyration.png")
    plt.close()


PLOTS = [
    ("sweep.csv", plot_scaling),
    ("curve.csv", plot_curve),
    ("gyration.csv", plot_gyration),
]


def main() -> None:
    parser = argparse.ArgumentParser(description="Plot halomd artifacts")
    parser.add_argument("dirs", nargs="*", default=["out"], help="artifact directories (default: out)")
    args = parser.parse_args()
    for d in args.dirs:
        directory = Path(d)
        for name, plot in PLOTS:
            if (directory / name).exists():
                plot(directory)
                print(f"plotted {directory / name}")


if __name__ == "__main__":
    main()

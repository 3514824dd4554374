"""Quick look at an experiment CSV: one line per (baseline, series), DE solid,
Monte Carlo as error bars.

    python docs/plot.py out/se-vs-L.csv [figure.png]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main(path, target=None):
    df = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for (baseline, series), g in df.groupby(["baseline", "series"], sort=False):
        g = g.sort_values("x")
        label = f"{baseline} {series}"
        line = None
        if g["de"].notna().any():
            (line,) = ax.plot(g["x"], g["de"], label=f"{label} (DE)")
        if g["mc_mean"].notna().any():
            color = line.get_color() if line is not None else None
            ax.errorbar(
                g["x"], g["mc_mean"], yerr=g["mc_half_width"], fmt="o", ms=3,
                color=color, label=f"{label} (MC)" if line is None else None,
            )
    ax.set_xlabel(df["axis"].iloc[0])
    ax.set_ylabel("NMSE" if df["experiment"].iloc[0] == "nmse-vs-snr" else "sum SE [bit/s/Hz]")
    if df["experiment"].iloc[0] == "nmse-vs-snr":
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = target or path.rsplit(".", 1)[0] + ".png"
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main(*sys.argv[1:3])

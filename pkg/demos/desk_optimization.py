"""Desk-scale pumping-cycle optimization through the command line interface.

Runs ``quatkite optimize`` with ``desk_config.json`` (two lemniscates, a
return and a transfer stage, 60 shooting intervals), keeps an iterate
snapshot every outer iteration and, when matplotlib is installed, plots the
evolution of the flight path seen from the ground station.

    python3 demos/desk_optimization.py [out_dir]

Expect a few minutes of single-threaded run time.
"""

import json
import sys
from pathlib import Path

from quatkite.cli import main as cli_main
from quatkite.trajio import read_trajectory

HERE = Path(__file__).resolve().parent


def main(out_dir="demos/output/desk"):
    out = Path(out_dir)
    code = cli_main(["optimize", "--config", str(HERE / "desk_config.json"),
                     "--out", str(out), "--snapshot-stride", "1"])
    m = json.loads((out / "metrics.json").read_text())
    print(f"status {m['status']} after {m['iterations']} outer iterations, "
          f"{m['wall_time']:.0f} s")
    print(f"mean power {m['metrics']['mean_power']:.0f} W "
          f"(guess {m['guess_mean_power']:.0f} W), eta_loyd {m['metrics']['eta_loyd']:.3f}")
    print(f"stage durations {[round(t, 2) for t in m['T']]}")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return code
    snaps = sorted((out / "snapshots").glob("iter_*.csv"))
    fig, ax = plt.subplots(figsize=(7, 5))
    for i, path in enumerate(snaps):
        r = read_trajectory(path).position
        last = i == len(snaps) - 1
        ax.plot(r[:, 1], -r[:, 2], color="C3" if last else "0.6", lw=1.5 if last else 0.6,
                alpha=1.0 if last else 0.2 + 0.8 * i / max(len(snaps), 1))
    guess = read_trajectory(out / "guess.csv").position
    ax.plot(guess[:, 1], -guess[:, 2], "C0--", lw=1, label="initial guess")
    ax.plot([], [], "C3", label="optimized")
    ax.set_xlabel("crosswind y [m]")
    ax.set_ylabel("height [m]")
    ax.set_aspect("equal")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "evolution.png", dpi=120)
    print(f"plot written to {out / 'evolution.png'}")
    return code


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))

"""Euler-angle and quaternion models side by side near the zenith singularity.

Writes both trajectories as CSV and, when matplotlib is installed, a plot of
the elevation angle and quaternion norm drift.

    python3 demos/singularity_demo.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from quatkite import KiteParams, quat_to_euler, singularity_demo
from quatkite.trajio import write_trajectory


def main(out_dir="demos/output/singularity"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    euler, quat = singularity_demo(KiteParams())
    write_trajectory(euler, out / "euler.csv")
    write_trajectory(quat, out / "quaternion.csv")
    drift = np.abs(np.linalg.norm(quat.quaternions, axis=1) - 1.0)
    print(f"euler model: stopped at t={euler.times[-1]:.1f} s ({euler.failure})")
    print(f"quaternion model: {quat.times[-1]:.1f} s, max |norm-1| = {drift.max():.2e}")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    _, theta_q, _ = quat_to_euler(quat.quaternions, warn=False)
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
    ax1.plot(quat.times, theta_q, label="quaternion")
    ax1.plot(euler.times, euler.states[:, 2], "--", label="Euler angles")
    ax1.set_ylabel("theta [rad]")
    ax1.legend()
    ax2.semilogy(quat.times, np.maximum(drift, 1e-17))
    ax2.set_ylabel("| |q| - 1 |")
    ax2.set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(out / "singularity.png", dpi=120)
    print(f"plot written to {out / 'singularity.png'}")


if __name__ == "__main__":
    main(*sys.argv[1:])

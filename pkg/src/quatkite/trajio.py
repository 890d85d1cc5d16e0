"""CSV trajectory files.

A file starts with ``#`` header lines (format version, model kind, parameter
echo as JSON, stabilization flag, failure status), followed by one CSV header
row and one row per sample.  Floats are written with ``repr`` so a write/read
round trip is bit-exact.  Controls are piecewise constant; the row of sample
``k`` carries the control held on ``[t_k, t_{k+1})`` and the last row has
``nan`` controls.  Derived columns (``v_a`` and later, plus the quaternion
columns of Euler-model files) are ignored on read.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List

import numpy as np

from .integrator import MODELS, Trajectory
from .params import ConfigError, KiteParams

FORMAT_VERSION = 1
MAGIC = "quatkite-trajectory"
COLUMNS = (
    "t", "q0", "q1", "q2", "q3", "l", "delta", "W", "deltadot_s", "v_winch",
    "v_a", "F_tether", "power", "phi", "theta", "psi", "x", "y", "z",
)


class TrajectoryFormatError(ValueError):
    """Malformed trajectory file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path, self.line = path, line


class TrajectoryVersionError(TrajectoryFormatError):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def trajectory_table(traj: Trajectory) -> np.ndarray:
    """All columns of :data:`COLUMNS` as an ``(n, 19)`` array."""
    n = len(traj)
    out = np.full((n, len(COLUMNS)), np.nan)
    ctrl = np.full((n, 2), np.nan)
    ctrl[:-1] = traj.controls
    q = traj.quaternions
    out[:, 0] = traj.times
    out[:, 1:5] = q
    out[:, 5] = traj.l
    if traj.model == "quaternion":
        out[:, 6] = traj.states[:, 1]
        out[:, 7] = traj.states[:, 0]
        out[:, 8] = ctrl[:, 0]
    else:
        out[:, 6] = ctrl[:, 0]
    out[:, 9] = ctrl[:, 1]
    out[:, 10] = traj.v_a
    out[:, 11] = traj.tether_force
    out[:, 12] = traj.power
    out[:, 13:16] = traj.angles
    out[:, 16:19] = traj.position
    return out


def write_trajectory(traj: Trajectory, path, extra: dict = None) -> None:
    """Write ``traj`` as CSV.  ``extra`` is echoed as a JSON header line."""
    path = Path(path)
    lines = [
        f"# {MAGIC} v{FORMAT_VERSION}",
        f"# model: {traj.model}",
        f"# params: {json.dumps(traj.params.to_dict(), sort_keys=True)}",
        f"# stabilize: {json.dumps(bool(traj.stabilize))}",
        f"# failed: {json.dumps(bool(traj.failed))}",
        f"# failure: {json.dumps(traj.failure)}",
    ]
    if extra:
        lines.append(f"# extra: {json.dumps(extra, sort_keys=True)}")
    lines.append(",".join(COLUMNS))
    for row in trajectory_table(traj):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(lines: List[str], path):
    head = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        text = lines[i][1:].strip()
        if i == 0:
            parts = text.split()
            if len(parts) != 2 or parts[0] != MAGIC or not parts[1].startswith("v"):
                raise TrajectoryFormatError(f"not a trajectory file (expected '# {MAGIC} v<N>')",
                                            path, 1)
            try:
                version = int(parts[1][1:])
            except ValueError:
                raise TrajectoryFormatError(f"bad format version {parts[1]!r}", path, 1) from None
            if version != FORMAT_VERSION:
                raise TrajectoryVersionError(
                    f"format version {version} is not supported (expected {FORMAT_VERSION})",
                    path, 1)
        else:
            key, sep, value = text.partition(":")
            if not sep:
                raise TrajectoryFormatError("header line without 'key: value'", path, i + 1)
            key, value = key.strip(), value.strip()
            if key == "model":
                head[key] = value
            else:
                try:
                    head[key] = json.loads(value)
                except json.JSONDecodeError as exc:
                    raise TrajectoryFormatError(f"header {key!r}: {exc}", path, i + 1) from None
        i += 1
    if i == 0:
        raise TrajectoryFormatError(f"not a trajectory file (expected '# {MAGIC} v<N>')", path, 1)
    return head, i


def read_trajectory(path) -> Trajectory:
    """Read a file written by :func:`write_trajectory`."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not text.strip():
        raise TrajectoryFormatError("empty file", path)
    head, i = _parse_header(lines, path)
    model = head.get("model")
    if model not in MODELS:
        raise TrajectoryFormatError(f"unknown or missing model {model!r}", path)
    try:
        params = KiteParams.from_dict(head.get("params", {}))
    except ConfigError as exc:
        raise TrajectoryFormatError(f"params: {exc}", path) from None
    if i >= len(lines) or tuple(lines[i].split(",")) != COLUMNS:
        raise TrajectoryFormatError("missing or wrong column header", path, i + 1)
    rows = []
    for k in range(i + 1, len(lines)):
        if not lines[k].strip():
            continue
        fields = lines[k].split(",")
        if len(fields) != len(COLUMNS):
            raise TrajectoryFormatError(f"expected {len(COLUMNS)} fields, got {len(fields)}",
                                        path, k + 1)
        try:
            row = [float(v) for v in fields]
        except ValueError as exc:
            raise TrajectoryFormatError(str(exc), path, k + 1) from None
        if rows and not row[0] > rows[-1][1][0]:
            raise TrajectoryFormatError(
                f"time {row[0]!r} does not increase (previous {rows[-1][1][0]!r})", path, k + 1)
        rows.append((k + 1, row))
    if not rows:
        raise TrajectoryFormatError("no samples", path)
    table = np.array([r for _, r in rows])
    col = {name: j for j, name in enumerate(COLUMNS)}
    if model == "quaternion":
        state_cols = ["W", "delta", "l", "q0", "q1", "q2", "q3"]
        ctrl_cols = ["deltadot_s", "v_winch"]
    else:
        state_cols = ["psi", "phi", "theta", "l"]
        ctrl_cols = ["delta", "v_winch"]
    states = table[:, [col[c] for c in state_cols]]
    controls = table[:-1, [col[c] for c in ctrl_cols]]
    for name, block in (("state", states), ("control", controls)):
        bad = np.argwhere(~np.isfinite(block))
        if bad.size:
            raise TrajectoryFormatError(f"non-finite {name} value", path, rows[int(bad[0, 0])][0])
    failure = head.get("failure")
    return Trajectory(model, table[:, 0], states, controls, params,
                      stabilize=bool(head.get("stabilize", True)),
                      failed=bool(head.get("failed", False)),
                      failure=None if failure is None else str(failure))


def trajectory_extra(path) -> dict:
    """The ``extra`` header of a trajectory file, or ``{}``."""
    head, _ = _parse_header(Path(path).read_text(encoding="utf-8").splitlines(), path)
    return head.get("extra", {}) or {}


__all__ = ["COLUMNS", "FORMAT_VERSION", "TrajectoryFormatError", "TrajectoryVersionError",
           "read_trajectory", "trajectory_extra", "trajectory_table", "write_trajectory"]

"""Pumping-cycle optimal control problem: stages, objective, constraints, metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import kite_dynamics as dyn
from .kite_dynamics import IDELTA, IL, IQ0, IW
from .integrator import Trajectory, mean_power
from .params import ConfigError, KiteParams

# row order of path_constraints
PATH_ROWS = (
    "deltadot_upper", "deltadot_lower", "delta_upper", "delta_lower",
    "v_winch_min", "v_a_min", "l_max", "elevation",
)
BOUNDARY_ROWS = ("q0", "q1", "q2", "q3", "l", "delta", "W0")


@dataclass
class StagePlan:
    """Nested discretization grid.

    Stage ``i`` lasts ``T_i`` seconds and is split into ``n_i[i]`` equal
    shooting intervals of ``K`` RK4 substeps each.  ``sign_pattern[i]`` is the
    required sign of the topological indicator on stage ``i``.
    """

    N: int
    n_i: Sequence[int]
    K: int = 3
    sign_pattern: Optional[Sequence[int]] = None
    T_init: Optional[Sequence[float]] = None
    T_bounds: Sequence = (2.0, 120.0)

    def __post_init__(self):
        if isinstance(self.n_i, (int, np.integer)):
            self.n_i = [int(self.n_i)] * int(self.N)
        self.n_i = tuple(int(v) for v in self.n_i)
        self.N = int(self.N)
        self.K = int(self.K)
        if self.N < 2 or self.N % 2:
            raise ConfigError(f"plan.N must be even and >= 2, got {self.N}")
        if len(self.n_i) != self.N:
            raise ConfigError(f"plan.n_i has {len(self.n_i)} entries, expected N={self.N}")
        if min(self.n_i) < 1:
            raise ConfigError("plan.n_i entries must be >= 1")
        if self.K < 1:
            raise ConfigError("plan.K must be >= 1")
        if self.sign_pattern is None:
            # stage 1 flies to the right (phi increasing), where q0 q3 - q1 q2 <= 0
            self.sign_pattern = [(-1) ** (i + 1) for i in range(self.N)]
        self.sign_pattern = tuple(int(s) for s in self.sign_pattern)
        if len(self.sign_pattern) != self.N or any(s not in (-1, 1) for s in self.sign_pattern):
            raise ConfigError("plan.sign_pattern must hold N entries of +1/-1")
        if any(a == b for a, b in zip(self.sign_pattern, self.sign_pattern[1:])):
            raise ConfigError("plan.sign_pattern must alternate")
        bounds = np.asarray(self.T_bounds, dtype=float)
        if bounds.shape == (2,):
            bounds = np.tile(bounds, (self.N, 1))
        if bounds.shape != (self.N, 2):
            raise ConfigError("plan.T_bounds must be a pair or N pairs")
        if not np.all((bounds[:, 0] > 0) & (bounds[:, 0] <= bounds[:, 1])):
            raise ConfigError("plan.T_bounds must satisfy 0 < T_min <= T_max")
        self.T_bounds = tuple(map(tuple, bounds.tolist()))
        if self.T_init is not None:
            self.T_init = tuple(float(t) for t in self.T_init)
            if len(self.T_init) != self.N or min(self.T_init) <= 0:
                raise ConfigError("plan.T_init must hold N positive durations")

    @property
    def n_intervals(self) -> int:
        return sum(self.n_i)

    @property
    def interval_stage(self) -> np.ndarray:
        """Stage index of every shooting interval, in time order."""
        return np.repeat(np.arange(self.N), self.n_i)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_i"] = list(self.n_i)
        d["sign_pattern"] = list(self.sign_pattern)
        d["T_bounds"] = [list(b) for b in self.T_bounds]
        d["T_init"] = None if self.T_init is None else list(self.T_init)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "StagePlan":
        known = {"N", "n_i", "K", "sign_pattern", "T_init", "T_bounds"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown plan field(s): {sorted(unknown)}")
        if "N" not in data or "n_i" not in data:
            raise ConfigError("plan requires fields 'N' and 'n_i'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"plan: {exc}") from exc


@dataclass
class ObjectiveWeights:
    """Weights of the discretized objective.

    The power term is ``-power_scale * W(T) / T``; ``power_scale=None``
    means ``force_coeff / loyd_power(p)`` so the term equals ``-eta_Loyd``.
    """

    eps_delta: float = 1e-3
    eps_v: float = 1e-3
    power_scale: Optional[float] = None

    def __post_init__(self):
        for name in ("eps_delta", "eps_v", "power_scale"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"weights.{name} must be >= 0, got {v!r}")

    def scale(self, p: KiteParams) -> float:
        return p.force_coeff / loyd_power(p) if self.power_scale is None else float(self.power_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectiveWeights":
        unknown = set(data) - {"eps_delta", "eps_v", "power_scale"}
        if unknown:
            raise ConfigError(f"unknown weights field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class OcpMetrics:
    mean_power: float
    P_loyd: float
    eta_loyd: float
    cycle_time: float
    reel_out_fraction: float
    min_v_a: float
    min_elevation: float
    max_tether: float

    def to_dict(self) -> dict:
        return asdict(self)


def loyd_power(p: KiteParams) -> float:
    """Crosswind power limit of the model, in watts."""
    return p.force_coeff * 4.0 * p.E ** 2 / 27.0 * p.v_w ** 3


def topo_indicator(q):
    """``q0 q3 - q1 q2``, equal to ``sin(theta) sin(psi) / 2`` on the angle chart.

    For ``v_a > 0`` its sign is opposite to the sign of ``phi_dot``.
    """
    q = np.asarray(q, dtype=float)
    return q[..., 0] * q[..., 3] - q[..., 1] * q[..., 2]


def elevation_residual(q, p: KiteParams):
    """``<= 0`` iff the elevation above the ground plane is at least ``theta_min``."""
    q = np.asarray(q, dtype=float)
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return ((q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3) * math.tan(p.theta_min)
            + 2.0 * (q1 * q3 - q0 * q2))


def elevation_angle(q):
    """Elevation ``atan2(-r_z, r_x)`` of the kite in the wind plane."""
    r = dyn.position_from_quat(q, 1.0)
    return np.arctan2(-r[..., 2], r[..., 0])


def path_constraints(x, u, p: KiteParams) -> np.ndarray:
    """Residuals ``h(x, u) <= 0`` in the order of :data:`PATH_ROWS`.

    Absolute-value limits appear as two one-sided rows.  Vectorised over
    leading axes of ``x`` (``(..., 7)``) and ``u`` (``(..., 2)``).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    deltadot, v_winch = u[..., 0], u[..., 1]
    delta = x[..., IDELTA]
    q = x[..., IQ0:]
    v_a = dyn.air_path_speed(q, v_winch, p)
    return np.stack([
        deltadot - p.deltadot_max,
        -deltadot - p.deltadot_max,
        delta - p.delta_max,
        -delta - p.delta_max,
        p.v_winch_min - v_winch,
        p.v_a_min - v_a,
        x[..., IL] - p.l_max,
        elevation_residual(q, p),
    ], axis=-1)


def boundary_residuals(x_start, x_end) -> np.ndarray:
    """Periodicity of ``q, l, delta`` plus ``W(0) = 0``, order :data:`BOUNDARY_ROWS`.

    Quaternions are compared componentwise: ``q`` and ``-q`` are different
    points here even though they encode the same rotation.
    """
    x_start = np.asarray(x_start, dtype=float)
    x_end = np.asarray(x_end, dtype=float)
    return np.concatenate([
        x_end[..., IQ0:] - x_start[..., IQ0:],
        x_end[..., IL:IL + 1] - x_start[..., IL:IL + 1],
        x_end[..., IDELTA:IDELTA + 1] - x_start[..., IDELTA:IDELTA + 1],
        x_start[..., IW:IW + 1],
    ], axis=-1)


def objective_terms(W_end: float, T_stages, deltadot, v_winch, plan: StagePlan,
                    weights: ObjectiveWeights, p: KiteParams) -> float:
    """Discretized objective.

    ``deltadot`` has one row of ``K`` substep rates per shooting interval and
    ``v_winch`` one value per interval, both in time order.  The steering
    penalty integrates ``eps_delta * deltadot**2`` over the substeps; the winch
    penalty weights the squared change to the next interval (cyclically) by
    the interval length.
    """
    T_stages = np.asarray(T_stages, dtype=float)
    deltadot = np.asarray(deltadot, dtype=float).reshape(plan.n_intervals, plan.K)
    v_winch = np.asarray(v_winch, dtype=float)
    h = (T_stages / np.asarray(plan.n_i))[plan.interval_stage]
    T = T_stages.sum()
    steer = weights.eps_delta * np.sum(h / plan.K * np.sum(deltadot ** 2, axis=1))
    winch = weights.eps_v * np.sum(h * (v_winch - np.roll(v_winch, -1)) ** 2)
    return float(-weights.scale(p) * W_end / T + steer + winch)


def compute_metrics(traj: Trajectory) -> OcpMetrics:
    p = traj.params
    P = mean_power(traj)
    P_loyd = loyd_power(p)
    taus = np.diff(traj.times)
    T = traj.duration
    reel_out = float(np.sum(taus[traj.controls[:, 1] > 0]) / T) if T > 0 else 0.0
    return OcpMetrics(
        mean_power=P,
        P_loyd=P_loyd,
        eta_loyd=P / P_loyd,
        cycle_time=T,
        reel_out_fraction=reel_out,
        min_v_a=float(np.min(traj.v_a)),
        min_elevation=float(np.min(elevation_angle(traj.quaternions))),
        max_tether=float(np.max(traj.l)),
    )

"""Fixed-step RK4 propagation and trajectory records."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import kite_dynamics as dyn
from .params import KiteParams

MODELS = ("quaternion", "euler")


def rk4_step(rhs: Callable, x, u, tau):
    """One classical RK4 step with ``u`` held constant over the step."""
    k1 = rhs(x, u)
    k2 = rhs(x + (tau / 2.0) * k1, u)
    k3 = rhs(x + (tau / 2.0) * k2, u)
    k4 = rhs(x + tau * k3, u)
    return x + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_stage_states(rhs: Callable, x, u, tau):
    """The four states at which RK4 evaluates ``rhs`` during one step."""
    k1 = rhs(x, u)
    x2 = x + (tau / 2.0) * k1
    k2 = rhs(x2, u)
    x3 = x + (tau / 2.0) * k2
    k3 = rhs(x3, u)
    return x, x2, x3, x + tau * k3


def model_rhs(model: str, p: KiteParams, stabilize: bool = True) -> Callable:
    """Return ``rhs(x, u)`` for the given model kind."""
    if model == "quaternion":
        return lambda x, u: dyn.quat_rhs(x, u, p, stabilize)
    if model == "euler":
        return lambda x, u: dyn.euler_rhs(x, u[0], u[1], p)
    raise ValueError(f"unknown model kind {model!r}; expected one of {MODELS}")


@dataclass
class Trajectory:
    """Time-stamped states and piecewise-constant controls.

    ``states`` rows are ``[W, delta, l, q0..q3]`` for the quaternion model and
    ``[psi, phi, theta, l]`` for the Euler model.  ``controls[k]`` is held on
    ``[times[k], times[k+1])`` and is ``[deltadot_s, v_winch]`` for the
    quaternion model and ``[delta, v_winch]`` for the Euler model.
    Derived quantities are recomputed from states and controls on access.
    """

    model: str
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    params: KiteParams = field(default_factory=KiteParams)
    stabilize: bool = True
    failed: bool = False
    failure: Optional[str] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        if self.model not in MODELS:
            raise ValueError(f"unknown model kind {self.model!r}")
        n = self.times.shape[0]
        if n == 0:
            raise ValueError("trajectory must contain at least one sample")
        if self.states.shape != (n, 7 if self.model == "quaternion" else 4):
            raise ValueError(f"states shape {self.states.shape} inconsistent with {n} samples")
        if self.controls.shape[0] != n - 1:
            raise ValueError("controls must be one shorter than times")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return self.times.shape[0]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def sample_controls(self) -> np.ndarray:
        """Controls active at each sample; the last one is held at the end."""
        if len(self) == 1:
            return np.zeros((1, 2))
        return np.vstack([self.controls, self.controls[-1:]])

    @property
    def l(self) -> np.ndarray:
        return self.states[:, 2] if self.model == "quaternion" else self.states[:, 3]

    @cached_property
    def quaternions(self) -> np.ndarray:
        if self.model == "quaternion":
            return self.states[:, 3:7]
        psi, phi, theta = self.states[:, 0], self.states[:, 1], self.states[:, 2]
        return dyn.euler_to_quat(phi, theta, psi)

    @cached_property
    def angles(self) -> np.ndarray:
        """Columns ``phi, theta, psi``."""
        if self.model == "euler":
            return self.states[:, [1, 2, 0]].copy()
        phi, theta, psi = dyn.quat_to_euler(self.quaternions, warn=False)
        return np.column_stack([phi, theta, psi])

    @cached_property
    def v_a(self) -> np.ndarray:
        l_dot = self.sample_controls[:, 1]
        if self.model == "quaternion":
            return dyn.air_path_speed(self.quaternions, l_dot, self.params)
        p = self.params
        return p.v_w * p.E * np.cos(self.states[:, 2]) - l_dot * p.E

    @property
    def tether_force(self) -> np.ndarray:
        return dyn.tether_force(self.v_a, self.params)

    @property
    def power(self) -> np.ndarray:
        return self.sample_controls[:, 1] * self.tether_force

    @cached_property
    def position(self) -> np.ndarray:
        if self.model == "quaternion":
            return dyn.position_from_quat(self.quaternions, self.l)
        return dyn.position_from_angles(self.states[:, 1], self.states[:, 2], self.l)


def simulate(model: str, x0, controls, tau, duration: Optional[float] = None,
             p: KiteParams = KiteParams(), stabilize: bool = True) -> Trajectory:
    """Propagate ``x0`` with RK4 and record a :class:`Trajectory`.

    ``tau`` is a scalar step (then ``duration`` fixes the step count) or an
    array of per-step sizes.  ``controls`` is one control pair held for the
    whole run or one pair per step.  If the right-hand side raises a
    singularity/domain error or a state turns non-finite, the partial
    trajectory is returned with ``failed=True``.
    """
    if np.ndim(tau) == 0:
        tau = float(tau)
        if not tau > 0:
            raise ValueError("tau must be positive")
        if duration is None or not duration > 0:
            raise ValueError("a positive duration is required with a scalar tau")
        n_steps = int(round(duration / tau))
        taus = np.full(n_steps, tau)
        times = np.arange(n_steps + 1) * tau
    else:
        taus = np.asarray(tau, dtype=float)
        if not np.all(taus > 0):
            raise ValueError("all step sizes must be positive")
        n_steps = taus.shape[0]
        times = np.concatenate([[0.0], np.cumsum(taus)])
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = np.broadcast_to(controls, (n_steps, 2))
    if controls.shape != (n_steps, 2):
        raise ValueError(f"expected {n_steps} control pairs, got shape {controls.shape}")

    rhs = model_rhs(model, p, stabilize)
    states = np.empty((n_steps + 1, np.size(x0)))
    states[0] = x0
    x = states[0].copy()
    failure = None
    k = 0
    for k in range(n_steps):
        try:
            x = rk4_step(rhs, x, controls[k], taus[k])
        except (dyn.SingularityError, dyn.DomainError) as exc:
            failure = f"step {k} (t={times[k]:.6g} s): {exc}"
            break
        if not np.all(np.isfinite(x)):
            failure = f"step {k} (t={times[k]:.6g} s): non-finite state"
            break
        states[k + 1] = x
    else:
        k = n_steps
    n = k + 1
    return Trajectory(model, times[:n], states[:n], np.array(controls[:n - 1]), p,
                      stabilize, failed=failure is not None, failure=failure)


def mean_power(traj: Trajectory, method: str = "rk4") -> float:
    """Average mechanical power ``(1/T) * integral(l_dot * F_tether)``.

    ``method="rk4"`` integrates with the RK4 quadrature of every recorded
    step, evaluated at the stage states reconstructed from the samples; for a
    trajectory produced by :func:`simulate` this is consistent with the
    energy state ``W`` to rounding.  ``method="trapezoid"`` uses the samples
    only.
    """
    if len(traj) < 2:
        return 0.0
    T = traj.duration
    if method == "trapezoid":
        return float(np.trapezoid(traj.power, traj.times) / T)
    if method != "rk4":
        raise ValueError(f"unknown method {method!r}")
    p = traj.params
    rhs = model_rhs(traj.model, p, traj.stabilize)
    taus = np.diff(traj.times)
    if traj.model == "quaternion":
        x = traj.states[:-1]
        u = traj.controls
        stages = rk4_stage_states(rhs, x, u, taus[:, None])
        speeds = [dyn.air_path_speed(s[:, 3:7], u[:, 1], p) for s in stages]
    else:
        speeds = []
        for k in range(len(traj) - 1):
            u = traj.controls[k]
            try:
                stages = rk4_stage_states(rhs, traj.states[k], u, taus[k])
            except (dyn.SingularityError, dyn.DomainError):
                stages = (traj.states[k],) * 4
            speeds.append([p.v_w * p.E * math.cos(s[2]) - p.E * u[1] for s in stages])
        speeds = list(np.array(speeds).T)
    v_w = traj.controls[:, 1]
    f = [v_w * dyn.tether_force(s, p) for s in speeds]
    energy = np.sum(taus / 6.0 * (f[0] + 2.0 * f[1] + 2.0 * f[2] + f[3]))
    return float(energy / T)


def singularity_demo(p: KiteParams = KiteParams(), duration: float = 60.0, tau: float = 0.1,
                     l: float = 100.0, delta: float = 0.186):
    """Run both models next to the Euler-chart singularity.

    Initial orientation phi=0, theta=arctan(E), psi=0, constant steering
    deflection and zero winch speed.  Returns ``(euler, quaternion)``.
    """
    theta0 = math.atan(p.E)
    euler = simulate("euler", [0.0, 0.0, theta0, l], [delta, 0.0], tau, duration, p)
    x0 = dyn.euler_state_to_ocp(0.0, 0.0, theta0, l, delta=delta)
    quat = simulate("quaternion", x0, [0.0, 0.0], tau, duration, p)
    return euler, quat

"""Kite equations of motion in Euler-angle and quaternion form.

State conventions
-----------------
Euler (reference) model: ``[psi, phi, theta, l]`` with the control pair
``[delta, v_winch]``.

Quaternion model, extended for optimal control (``OcpState``):
``[W, delta, l, q0, q1, q2, q3]`` with controls ``[deltadot_s, v_winch]``.
``W`` accumulates the integral of ``l_dot * v_a**2``.

All vectorised functions accept arrays with the component axis last, so a
batch of states has shape ``(..., 7)``.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .params import KiteParams

# indices into the OCP state vector
IW, IDELTA, IL, IQ0, IQ1, IQ2, IQ3 = range(7)
NX = 7
NU = 2


class SingularityError(ArithmeticError):
    """The Euler-angle chart is degenerate (sin(theta) ~ 0)."""


class DomainError(ValueError):
    """A state lies outside the physical domain of the model (e.g. l <= 0)."""


class ChartWarning(RuntimeWarning):
    """Euler angles were extracted at a chart-degenerate orientation."""


def _as_array(a) -> np.ndarray:
    a = np.asarray(a)
    return a if a.dtype == object else a.astype(float, copy=False)


def _ufunc(np_func, mp_name):
    def apply(*args):
        if any(np.asarray(a).dtype == object for a in args):
            import mpmath
            return np.frompyfunc(getattr(mpmath, mp_name), len(args), 1)(*args)
        return np_func(*args)
    return apply


_sin = _ufunc(np.sin, "sin")
_cos = _ufunc(np.cos, "cos")
_atan2 = _ufunc(np.arctan2, "atan2")
_acos = _ufunc(np.arccos, "acos")


def air_path_speed(q, l_dot, p: KiteParams):
    """Scalar air path speed; may be negative, no clamping."""
    q = np.asarray(q, dtype=float)
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return p.E * p.v_w * (q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3) - p.E * np.asarray(l_dot)


def tether_force(v_a, p: KiteParams):
    return p.force_coeff * np.square(v_a)


def _scalar_math(value):
    # mpmath scalars are accepted for extended-precision convergence studies
    if type(value).__module__.startswith("mpmath"):
        import mpmath
        return mpmath
    return math


def euler_rhs(s, delta: float, v_winch: float, p: KiteParams) -> np.ndarray:
    """Time derivative of the reference state ``[psi, phi, theta, l]``."""
    psi, phi, theta, l = s
    if not l > 0:
        raise DomainError(f"tether length must be positive, got {l!r}")
    m = _scalar_math(theta)
    sin_theta = m.sin(theta)
    # theta outside (0, pi) is off the chart as well
    if not sin_theta >= 1e-12:
        raise SingularityError(f"Euler chart singular at theta={float(theta)!r}")
    cos_theta = m.cos(theta)
    l_dot = v_winch
    v_a = p.v_w * p.E * cos_theta - l_dot * p.E
    phi_dot = -v_a / (l * sin_theta) * m.sin(psi)
    psi_dot = p.g_k * v_a * delta + phi_dot * cos_theta
    theta_dot = -p.v_w / l * sin_theta + v_a / l * m.cos(psi)
    return np.array([psi_dot, phi_dot, theta_dot, l_dot])


def _quat_terms(q0, q1, q2, q3, l, delta, v_winch, p):
    c = q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3
    v_a = p.E * p.v_w * c - p.E * v_winch
    a = v_a / (2.0 * l)
    b = p.v_w / l
    g = 0.5 * p.g_k * v_a * delta
    s23 = q2 * q2 + q3 * q3
    s01 = q0 * q0 + q1 * q1
    dq0 = -a * q2 + b * q0 * s23 + g * q1
    dq1 = -a * q3 + b * q1 * s23 - g * q0
    dq2 = a * q0 - b * q2 * s01 - g * q3
    dq3 = a * q1 - b * q3 * s01 + g * q2
    return v_a, dq0, dq1, dq2, dq3


def quat_rhs(x, u, p: KiteParams, stabilize: bool = True) -> np.ndarray:
    """Time derivative of the OCP state ``[W, delta, l, q0..q3]``.

    Only polynomial operations are used, so the model has no singular
    orientation.  With ``stabilize`` the norm drift is damped by
    ``-gamma_q (|q|^2 - 1) q``.
    """
    x = _as_array(x)
    u = _as_array(u)
    l = x[..., IL]
    if not np.all(np.asarray(l > 0, dtype=bool)):
        raise DomainError("tether length must be positive")
    delta = x[..., IDELTA]
    q0, q1, q2, q3 = x[..., IQ0], x[..., IQ1], x[..., IQ2], x[..., IQ3]
    v_winch = u[..., 1]
    v_a, dq0, dq1, dq2, dq3 = _quat_terms(q0, q1, q2, q3, l, delta, v_winch, p)
    if stabilize and p.gamma_q:
        k = p.gamma_q * (q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3 - 1.0)
        dq0 = dq0 - k * q0
        dq1 = dq1 - k * q1
        dq2 = dq2 - k * q2
        dq3 = dq3 - k * q3
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)),
                   dtype=np.result_type(x, u))
    out[..., IW] = v_winch * v_a * v_a
    out[..., IDELTA] = u[..., 0]
    out[..., IL] = v_winch
    out[..., IQ0] = dq0
    out[..., IQ1] = dq1
    out[..., IQ2] = dq2
    out[..., IQ3] = dq3
    return out


def quat_rhs_jac(x, u, p: KiteParams, stabilize: bool = True):
    """Value and partial derivatives of :func:`quat_rhs`.

    Returns ``(f, f_x, f_u)`` with shapes ``(M, 7)``, ``(M, 7, 7)`` and
    ``(M, 7, 2)`` for batched input of shape ``(M, 7)`` / ``(M, 2)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    f = quat_rhs(x, u, p, stabilize)
    m = f.shape[0]
    l = x[:, IL]
    delta = x[:, IDELTA]
    q = x[:, IQ0:]
    q0, q1, q2, q3 = q.T
    v = u[:, 1]
    E, v_w = p.E, p.v_w

    c = q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3
    v_a = E * v_w * c - E * v
    dva_dq = (2.0 * E * v_w) * np.stack([q0, q1, -q2, -q3], axis=1)
    s23 = q2 * q2 + q3 * q3
    s01 = q0 * q0 + q1 * q1
    A = np.stack([-q2, -q3, q0, q1], axis=1)
    B = np.stack([q0 * s23, q1 * s23, -q2 * s01, -q3 * s01], axis=1)
    C = np.stack([q1, -q0, -q3, q2], axis=1)
    Amat = np.array([[0, 0, -1, 0], [0, 0, 0, -1], [1, 0, 0, 0], [0, 1, 0, 0]], float)
    Cmat = np.array([[0, 1, 0, 0], [-1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]], float)
    dB = np.zeros((m, 4, 4))
    dB[:, 0] = np.stack([s23, 0 * q0, 2 * q0 * q2, 2 * q0 * q3], axis=1)
    dB[:, 1] = np.stack([0 * q0, s23, 2 * q1 * q2, 2 * q1 * q3], axis=1)
    dB[:, 2] = np.stack([-2 * q2 * q0, -2 * q2 * q1, -s01, 0 * q0], axis=1)
    dB[:, 3] = np.stack([-2 * q3 * q0, -2 * q3 * q1, 0 * q0, -s01], axis=1)

    half_l = (0.5 / l)[:, None, None]
    gk2 = 0.5 * p.g_k
    dq_dq = (half_l * (A[:, :, None] * dva_dq[:, None, :] + v_a[:, None, None] * Amat)
             + (v_w / l)[:, None, None] * dB
             + (gk2 * delta)[:, None, None] * (C[:, :, None] * dva_dq[:, None, :]
                                               + v_a[:, None, None] * Cmat))
    if stabilize and p.gamma_q:
        n2m1 = np.sum(q * q, axis=1) - 1.0
        dq_dq -= p.gamma_q * (n2m1[:, None, None] * np.eye(4)
                              + 2.0 * q[:, :, None] * q[:, None, :])
    dq_dl = -(v_a / (2.0 * l * l))[:, None] * A - (v_w / (l * l))[:, None] * B
    dq_ddelta = (gk2 * v_a)[:, None] * C
    dq_dv = -(E / (2.0 * l))[:, None] * A - (gk2 * delta * E)[:, None] * C

    fx = np.zeros((m, NX, NX))
    fx[:, IQ0:, IQ0:] = dq_dq
    fx[:, IQ0:, IL] = dq_dl
    fx[:, IQ0:, IDELTA] = dq_ddelta
    fx[:, IW, IQ0:] = (2.0 * v * v_a)[:, None] * dva_dq

    fu = np.zeros((m, NX, NU))
    fu[:, IDELTA, 0] = 1.0
    fu[:, IL, 1] = 1.0
    fu[:, IQ0:, 1] = dq_dv
    fu[:, IW, 1] = v_a * v_a - 2.0 * E * v * v_a
    return f, fx, fu


def rotation_matrix(q) -> np.ndarray:
    q0, q1, q2, q3 = (float(v) for v in q)
    return np.array([
        [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
    ])


def body_rates(q, l: float, l_dot: float, delta: float, p: KiteParams):
    """Turn rates ``(omega_roll, omega_pitch, omega_yaw)`` in the kite body frame.

    Roll and pitch follow from the tether constraint together with the
    no-side-slip and constant-glide-ratio assumptions; yaw is the turn-rate law.
    """
    if not l > 0:
        raise DomainError(f"tether length must be positive, got {l!r}")
    R = rotation_matrix(q)
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    omega_roll = -p.v_w / l * float(R @ ey @ ex)
    omega_pitch = -p.v_w / l * float(R @ (p.E * ex - ez) @ ex) + p.E * l_dot / l
    omega_yaw = p.g_k * float(air_path_speed(q, l_dot, p)) * delta
    return omega_roll, omega_pitch, omega_yaw


def quat_kinematics(q, omega_roll: float, omega_pitch: float, omega_yaw: float) -> np.ndarray:
    """Quaternion rate for body-frame turn rates, with the kite axis mapping."""
    wr, wp, wy = omega_roll, omega_pitch, omega_yaw
    M = np.array([
        [0.0, wy, wp, wr],
        [-wy, 0.0, -wr, wp],
        [-wp, wr, 0.0, -wy],
        [-wr, -wp, wy, 0.0],
    ])
    return 0.5 * M @ np.asarray(q, dtype=float)


def euler_to_quat(phi, theta, psi) -> np.ndarray:
    """Unit quaternion of ``R_x(phi) R_y(theta) R_x(-psi)``; vectorised."""
    phi, theta, psi = (np.multiply(_as_array(a), 0.5) for a in (phi, theta, psi))
    cf, sf = _cos(phi), _sin(phi)
    ct, st = _cos(theta), _sin(theta)
    cp, sp = _cos(psi), _sin(psi)
    return np.stack([
        cf * ct * cp + sf * ct * sp,
        sf * ct * cp - cf * ct * sp,
        -sf * st * sp + cf * st * cp,
        sf * st * cp + cf * st * sp,
    ], axis=-1)


def quat_to_euler(q, warn: bool = True):
    """Extract ``(phi, theta, psi)``; vectorised over leading axes.

    At theta = 0 or pi both atan2 arguments vanish and phi, psi come out as
    0 by the atan2(0, 0) = 0 convention.
    """
    q = _as_array(q)
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    c = q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3
    if warn and np.any(np.asarray(abs(c) > 1.0 - 1e-9, dtype=bool)):
        warnings.warn("Euler angles requested at a chart-degenerate orientation",
                      ChartWarning, stacklevel=2)
    phi = _atan2(q0 * q3 + q1 * q2, q0 * q2 - q1 * q3)
    theta = _acos(np.clip(c, -1.0, 1.0))
    psi = _atan2(q0 * q3 - q1 * q2, q0 * q2 + q1 * q3)
    return phi, theta, psi


def position_from_quat(q, l) -> np.ndarray:
    """Cartesian kite position; wind along +x, z pointing down."""
    q = np.asarray(q, dtype=float)
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    l = np.asarray(l, dtype=float)
    return np.stack([
        l * (q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3),
        l * 2.0 * (q0 * q3 + q1 * q2),
        l * 2.0 * (q1 * q3 - q0 * q2),
    ], axis=-1)


def position_from_angles(phi, theta, l) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([
        np.multiply(l, np.cos(theta)),
        np.multiply(l, np.sin(phi) * st),
        np.multiply(l, -np.cos(phi) * st),
    ], axis=-1)


def euler_state_to_ocp(psi: float, phi: float, theta: float, l: float,
                       delta: float = 0.0, W: float = 0.0) -> np.ndarray:
    """OCP state with the orientation given in Euler angles."""
    x = np.empty(NX)
    x[IW] = W
    x[IDELTA] = delta
    x[IL] = l
    x[IQ0:] = euler_to_quat(phi, theta, psi)
    return x

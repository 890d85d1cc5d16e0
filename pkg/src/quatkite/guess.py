"""Synthetic pumping-cycle initial guesses.

The power phase flies figure-eight patterns

    phi = phi0 + a_phi * sin(s),   theta = theta0 - a_theta * sin(2 s)

in the angle chart, turning upwards at the sides and crossing the centre
downwards, at a constant reel-out speed.  One lemniscate is the parameter
range of length ``2 pi``; its right-going half (``phi' > 0``) and left-going
half form two stages.

The return phase is a cubic Hermite arc from the left turning point (heading
up, towards the zenith) back to the centre crossing.  Along the arc the winch
reels in just fast enough to keep the air path speed a margin ``m`` above the
hover value ``v_w sin(theta)``, so the tether comes in near the zenith at low
force and the winch stands still lower down.  ``m`` is root-solved so that the
tether length closes.  With ``N = 2 n + 2`` stages the return starts with two
stages of straight ``psi = 0`` climb at zero winch speed.

Timing and heading come from the kinematics: with ``v_a`` fixed by the
elevation and winch speed, the two angle rate equations determine the path
speed ``s_dot`` and the heading ``psi`` along the prescribed curve.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from . import kite_dynamics as dyn
from .kite_dynamics import IW
from .integrator import Trajectory
from .ocp_model import StagePlan, elevation_residual, topo_indicator
from .params import ConfigError, KiteParams
from .transcription import ShootingNlp

CLIMB_STAGE_TIME = 3.0  # s, duration of each straight-climb stage
ARC_PEAK_OFFSET = 0.05  # rad, return arc peak below the zenith


class GuessInfeasible(ValueError):
    """The synthesized guess violates a path constraint."""


@dataclass
class GuessSpec:
    n_lemniscates: int = 6
    center: Tuple[float, float] = (0.0, 0.75)  # (phi0, theta0), rad
    half_widths: Tuple[float, float] = (0.5, 0.2)  # (a_phi, a_theta), rad
    reel_out: float = 2.5  # m/s, fastest reel-out; the speed used pays out exactly l_band
    reel_in: float = -3.0  # m/s, fastest reel-in on the return arc
    l_start: float = 240.0  # m, tether length at the start of reel-out
    l_band: float = 50.0  # m, tether paid out over the lemniscates
    points_per_lemniscate: int = 30  # shooting intervals per lemniscate in plan_for()

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.half_widths = tuple(float(v) for v in self.half_widths)
        if int(self.n_lemniscates) != self.n_lemniscates or self.n_lemniscates < 1:
            raise ConfigError("guess.n_lemniscates must be an integer >= 1")
        self.n_lemniscates = int(self.n_lemniscates)
        if len(self.center) != 2 or len(self.half_widths) != 2:
            raise ConfigError("guess.center and guess.half_widths must be pairs")
        if min(self.half_widths) <= 0:
            raise ConfigError("guess.half_widths must be > 0")
        if not self.reel_in < 0 < self.reel_out:
            raise ConfigError("guess requires reel_in < 0 < reel_out")
        if not (self.l_start > 0 and self.l_band > 0):
            raise ConfigError("guess.l_start and guess.l_band must be > 0")
        if self.points_per_lemniscate < 2:
            raise ConfigError("guess.points_per_lemniscate must be >= 2")
        theta0, a_t = self.center[1], self.half_widths[1]
        if not (0 < theta0 - a_t and theta0 + a_t < math.pi / 2):
            raise ConfigError("guess pattern must stay within 0 < theta < pi/2")

    def check(self, p: KiteParams):
        if self.l_start + self.l_band > p.l_max:
            raise ConfigError(f"guess.l_start + guess.l_band exceeds l_max={p.l_max}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        d["half_widths"] = list(self.half_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "GuessSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown guess field(s): {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"guess: {exc}") from exc


@dataclass
class GuessResult:
    w: np.ndarray
    trajectory: Trajectory  # samples on the substep grid
    plan: StagePlan  # the input plan with T_init set to the guess durations
    T: np.ndarray
    reel_out: float  # winch speed actually used during the lemniscates
    hover_margin: float  # air path speed margin over hover on the return arc, m/s
    violations: List[str] = field(default_factory=list)
    max_clipped_delta: float = 0.0

    @property
    def feasible(self) -> bool:
        return not self.violations


def lissajous(spec: GuessSpec, s):
    """Pattern angles and their parameter derivatives ``(phi, theta, phi', theta')``."""
    (phi0, theta0), (a_p, a_t) = spec.center, spec.half_widths
    s = np.asarray(s, dtype=float)
    return (phi0 + a_p * np.sin(s), theta0 - a_t * np.sin(2.0 * s),
            a_p * np.cos(s), -2.0 * a_t * np.cos(2.0 * s))


def _hermite(p0, p1, m0, m1, sig):
    s2, s3 = sig * sig, sig * sig * sig
    val = ((2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + sig) * m0
           + (-2 * s3 + 3 * s2) * p1 + (s3 - s2) * m1)
    der = ((6 * s2 - 6 * sig) * p0 + (3 * s2 - 4 * sig + 1) * m0
           + (-6 * s2 + 6 * sig) * p1 + (3 * s2 - 2 * sig) * m1)
    return val, der


class _Segment:
    """A curve in the angle chart flown with winch speed ``winch(theta)``."""

    def __init__(self, curve: Callable, sig0: float, sig1: float, winch: Callable):
        self.curve, self.sig0, self.sig1, self.winch = curve, sig0, sig1, winch

    def rates(self, sig, l, p: KiteParams):
        """``(s_dot, psi, v_a, v_winch)`` from inverting the phi/theta rate equations."""
        phi, theta, dphi, dtheta = self.curve(sig)
        st = math.sin(theta)
        v = self.winch(theta)
        v_a = p.E * (p.v_w * math.cos(theta) - v)
        a = l * l * (st * st * dphi * dphi + dtheta * dtheta)
        b = 2.0 * l * dtheta * p.v_w * st
        c = (p.v_w * st) ** 2 - v_a * v_a
        disc = b * b - 4.0 * a * c
        if c >= 0 or disc < 0 or v_a <= 0:
            raise GuessInfeasible(f"air path speed {v_a:.3f} m/s too low to fly the pattern "
                                  f"at theta={theta:.3f}")
        sdot = (-b + math.sqrt(disc)) / (2.0 * a)
        psi = math.atan2(-l * st * dphi * sdot, l * dtheta * sdot + p.v_w * st)
        return sdot, psi, v_a, v

    def fly(self, l0, W0, p: KiteParams, duration=None):
        """Integrate ``(sig, l, W)`` in time until ``sig1`` or for ``duration``."""
        def rhs(t, y):
            sdot, _, v_a, v = self.rates(y[0], y[1], p)
            return [sdot, v, v * v_a * v_a]

        sdot0 = self.rates(self.sig0, l0, p)[0]
        if duration is None:
            def done(t, y):
                return y[0] - self.sig1
            done.terminal = True
            done.direction = 1
            span = self.sig1 - self.sig0
            sol = solve_ivp(rhs, (0.0, 1e4), [self.sig0, l0, W0], events=done,
                            dense_output=True, rtol=1e-11, atol=1e-10,
                            max_step=span / sdot0 / 20)
            if sol.status != 1:
                raise GuessInfeasible("pattern segment did not complete")
            self.duration = float(sol.t_events[0][0])
            end = sol.y_events[0][0]
        else:
            sol = solve_ivp(rhs, (0.0, duration), [self.sig0, l0, W0], dense_output=True,
                            rtol=1e-11, atol=1e-10)
            self.duration = float(duration)
            end = sol.y[:, -1]
            self.sig1 = float(end[0])
        self.sol = sol
        self.l1, self.W1 = float(end[1]), float(end[2])
        return self

    def sample(self, t, p: KiteParams):
        """``(phi, theta, psi, l, W, v_winch)`` at local time ``t``."""
        sig, l, W = self.sol.sol(min(max(t, 0.0), self.duration))
        sig = min(sig, self.sig1)
        phi, theta, _, _ = self.curve(sig)
        _, psi, _, v = self.rates(sig, l, p)
        return phi, theta, psi, l, W, v


def _constant(v):
    return lambda theta: v


def _lemniscate_segments(spec: GuessSpec, v_out: float):
    curve = lambda s: tuple(float(v) for v in lissajous(spec, s))  # noqa: E731
    segs = []
    for k in range(spec.n_lemniscates):
        base = 2.0 * math.pi * k
        start = 0.0 if k == 0 else -0.5 * math.pi
        segs.append(_Segment(curve, base + start, base + 0.5 * math.pi, _constant(v_out)))
        segs.append(_Segment(curve, base + 0.5 * math.pi, base + 1.5 * math.pi,
                             _constant(v_out)))
    return segs


def _fly_all(segs, l0, W0, p):
    l, W = l0, W0
    for sg in segs:
        sg.fly(l, W, p)
        l, W = sg.l1, sg.W1
    return segs


def _return_curve(spec, start, lam):
    """Hermite arc from ``start`` (heading up) to the pattern centre crossing."""
    _, _, dphi_q, dtheta_q = lissajous(spec, 0.0)
    p0 = np.array(start, dtype=float)
    p1 = np.array(spec.center, dtype=float)
    m0 = np.array([0.0, lam])
    m1 = np.array([float(dphi_q), float(dtheta_q)]) * (p1[0] - p0[0]) / spec.half_widths[0]

    def curve(sig):
        val, der = _hermite(p0, p1, m0, m1, sig)
        return float(val[0]), float(val[1]), float(der[0]), float(der[1])
    return curve


def _arc_peak(curve):
    return max(curve(g)[1] for g in np.linspace(0.0, 1.0, 401))


def _hover_winch(margin, reel_in, p):
    """Winch speed keeping ``v_a = v_w sin(theta) + margin``, limited to ``[reel_in, 0]``."""
    def winch(theta):
        v = p.v_w * math.cos(theta) - (p.v_w * math.sin(theta) + margin) / p.E
        return min(0.0, max(reel_in, v))
    return winch


def plan_for(spec: GuessSpec, K: int = 3, climb: bool = False) -> StagePlan:
    """Stage plan matching ``spec``: ``points_per_lemniscate / 2`` intervals per half.

    The first stage also carries the return arc and gets twice as many.
    """
    half = max(1, spec.points_per_lemniscate // 2)
    n = [half] * (2 * spec.n_lemniscates)
    n[0] = 2 * half
    if climb:
        n += [max(1, half // 4)] * 2
    return StagePlan(N=len(n), n_i=n, K=K)


def generate_guess(spec: GuessSpec, plan: StagePlan, p: KiteParams = KiteParams(),
                   strict: bool = False) -> GuessResult:
    """Synthesize a periodic pumping cycle and sample it on the shooting grid.

    Returns the NLP variable vector, the sampled trajectory and the stage
    durations implied by the kinematics (``plan.T_init`` is ignored and the
    returned plan carries the new durations).  Node violations of the air
    path speed, elevation or topological limits are listed in
    ``violations``; with ``strict`` they raise :class:`GuessInfeasible`.
    """
    spec.check(p)
    n = spec.n_lemniscates
    climb = plan.N == 2 * n + 2
    if plan.N != 2 * n and not climb:
        raise ConfigError(f"plan.N={plan.N} does not fit {n} lemniscates (need {2 * n} "
                          f"or {2 * n + 2})")
    if plan.sign_pattern[0] != -1:
        raise ConfigError("the synthetic guess starts with a right-going stage; "
                          "plan.sign_pattern must start with -1")

    # reel-out speed such that the lemniscates pay out exactly l_band; the
    # payout v * duration(v) increases with v, and unflyable speeds count as
    # overshooting
    def payout_error(v):
        try:
            segs = _fly_all(_lemniscate_segments(spec, v), spec.l_start, 0.0, p)
        except GuessInfeasible:
            return spec.l_band
        return v * sum(sg.duration for sg in segs) - spec.l_band

    if payout_error(spec.reel_out) < 0:
        raise GuessInfeasible(f"reel-out at {spec.reel_out} m/s cannot pay out l_band")
    v_out = brentq(payout_error, 0.0, spec.reel_out, xtol=1e-14, rtol=1e-14)
    try:
        segs = _fly_all(_lemniscate_segments(spec, v_out), spec.l_start, 0.0, p)
    except GuessInfeasible as exc:
        raise GuessInfeasible(f"the pattern cannot pay out l_band: {exc}") from exc

    # optional straight climb from the left turning point, winch at rest
    phi_left = spec.center[0] - spec.half_widths[0]
    start = (phi_left, spec.center[1])
    l_ret = spec.l_start + spec.l_band
    climb_segs = []
    if climb:
        up = lambda sig: (phi_left, sig, 0.0, 1.0)  # noqa: E731
        for _ in range(2):
            sg = _Segment(up, start[1], 0.5 * math.pi, _constant(0.0))
            sg.fly(l_ret, 0.0, p, duration=CLIMB_STAGE_TIME)
            climb_segs.append(sg)
            start = (phi_left, sg.sig1)

    # return arc with its peak a fixed distance below the zenith
    peak_target = 0.5 * math.pi - ARC_PEAK_OFFSET
    lo, hi = 1e-6, 1.0
    if _arc_peak(_return_curve(spec, start, lo)) >= peak_target:
        raise GuessInfeasible("return arc starts too close to the zenith")
    while _arc_peak(_return_curve(spec, start, hi)) < peak_target:
        hi *= 2.0
    lam = brentq(lambda x: _arc_peak(_return_curve(spec, start, x)) - peak_target, lo, hi,
                 xtol=1e-12)
    curve = _return_curve(spec, start, lam)

    def l_error(margin):
        sg = _Segment(curve, 0.0, 1.0, _hover_winch(margin, spec.reel_in, p))
        return sg.fly(l_ret, 0.0, p).l1 - spec.l_start

    m_lo, m_hi = 0.01, 3.0
    if l_error(m_lo) > 0:
        raise GuessInfeasible("return arc cannot reel in l_band; increase |reel_in| "
                              "or decrease l_band")
    if l_error(m_hi) < 0:
        raise GuessInfeasible("return arc reels in more than l_band")
    margin = brentq(l_error, m_lo, m_hi, xtol=1e-13, rtol=1e-14)

    # fly the whole cycle in time order with the energy accumulating from zero
    ret = _Segment(curve, 0.0, 1.0, _hover_winch(margin, spec.reel_in, p)).fly(l_ret, 0.0, p)
    segs = _fly_all(_lemniscate_segments(spec, v_out), ret.l1, ret.W1, p)
    W = segs[-1].W1
    for sg in climb_segs:
        sg.fly(sg.sol.y[1, 0], W, p, duration=CLIMB_STAGE_TIME)
        W = sg.W1
    stages = [[ret, segs[0]]] + [[sg] for sg in segs[1:]] + [[sg] for sg in climb_segs]
    T = np.array([sum(sg.duration for sg in st) for st in stages])

    K = plan.K
    times, rows = _sample_stages(stages, plan, T, p)
    phi, theta, psi, l, W, v = rows.T
    delta, clipped = _steering(times, phi, theta, psi, v, p)
    q = dyn.euler_to_quat(phi, theta, psi)
    # periodic closure in (q, l, delta)
    q[-1], l[-1], delta[-1] = q[0], l[0], delta[0]
    states = np.column_stack([W, delta, l, q])
    taus = np.diff(times)
    dd = np.clip(np.diff(delta) / taus, -p.deltadot_max, p.deltadot_max)
    controls = np.column_stack([dd, _interval_winch(l, taus, K)])
    traj = Trajectory("quaternion", times, states, controls, p, True)

    plan_out = StagePlan(N=plan.N, n_i=plan.n_i, K=K, sign_pattern=plan.sign_pattern,
                         T_init=T.tolist(), T_bounds=plan.T_bounds)
    nlp = ShootingNlp(plan_out, p)
    S = states[:-1:K].copy()
    U = np.column_stack([dd.reshape(-1, K), controls[::K, 1]])
    # node energies from the shot increments so the W continuity rows hold
    x_end, _ = nlp.shoot_all(S, U, nlp.interval_durations(T), False)
    S[:, IW] = np.concatenate([[0.0], np.cumsum(x_end[:-1, IW] - S[:-1, IW])])
    w = nlp.pack(S, U, T)
    violations = _check_nodes(S, U, plan_out, p)
    res = GuessResult(w, traj, plan_out, T, v_out, margin, violations, clipped)
    if strict and violations:
        raise GuessInfeasible("; ".join(violations))
    return res


def _sample_stages(stages, plan: StagePlan, T, p):
    """Samples on the substep grid of every stage plus a closing sample."""
    K = plan.K
    rows, times = [], []
    t_off = 0.0
    for i, st in enumerate(stages):
        local = np.linspace(0.0, T[i], plan.n_i[i] * K + 1)[:-1]
        bounds = np.cumsum([0.0] + [sg.duration for sg in st])
        for t in local:
            j = min(int(np.searchsorted(bounds, t, side="right")) - 1, len(st) - 1)
            rows.append(st[j].sample(t - bounds[j], p))
            times.append(t_off + t)
        t_off += T[i]
    last = stages[-1][-1]
    rows.append(last.sample(last.duration, p))
    times.append(t_off)
    return np.array(times), np.array(rows)


def _steering(times, phi, theta, psi, v, p):
    """Deflection from the turn-rate law, ``delta = (psi_dot - phi_dot cos theta) / (g_k v_a)``."""
    psi_dot = np.gradient(np.unwrap(psi), times)
    phi_dot = np.gradient(phi, times)
    v_a = p.E * (p.v_w * np.cos(theta) - v)
    delta = (psi_dot - phi_dot * np.cos(theta)) / (p.g_k * v_a)
    clipped = float(np.max(np.abs(delta)) - p.delta_max)
    return np.clip(delta, -p.delta_max, p.delta_max), max(clipped, 0.0)


def _interval_winch(l, taus, K):
    """Constant winch speed per shooting interval from the node lengths."""
    n_int = len(taus) // K
    lk = l[::K]
    h = taus.reshape(n_int, K).sum(axis=1)
    v = (lk[1:n_int + 1] - lk[:n_int]) / h
    return np.repeat(v, K)


def _check_nodes(S, U, plan, p):
    K = plan.K
    v_a = dyn.air_path_speed(S[:, 3:], U[:, K], p)
    elev = elevation_residual(S[:, 3:], p)
    topo = topo_indicator(S[:, 3:])
    sign = np.asarray(plan.sign_pattern)[plan.interval_stage]
    out = []
    for c in range(S.shape[0]):
        if v_a[c] < p.v_a_min:
            out.append(f"node {c}: v_a={v_a[c]:.3f} < {p.v_a_min}")
        if elev[c] > 0:
            out.append(f"node {c}: elevation below theta_min (residual {elev[c]:.3e})")
        if sign[c] * topo[c] < -1e-12:
            out.append(f"node {c}: topological sign {topo[c]:.3e} against stage sign {sign[c]}")
    return out

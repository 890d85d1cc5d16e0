"""Direct multiple-shooting transcription of the pumping-cycle problem."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kite_dynamics as dyn
from .kite_dynamics import IDELTA, IL, IQ0, IW, NX
from .integrator import Trajectory, rk4_step, simulate
from .ocp_model import (ObjectiveWeights, StagePlan, boundary_residuals, elevation_residual,
                  loyd_power, objective_terms, topo_indicator)
from .params import KiteParams

L_MIN = 1.0  # safeguard lower bound on tether length at nodes, m
Q_BOUND = 1.2  # safeguard box on node quaternion components, inactive for unit q
INEQ_ROWS = ("v_a_min", "elevation", "topology")


class EvaluationError(ArithmeticError):
    """Non-finite or undefined model evaluation inside a shooting cell."""

    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


@dataclass
class NlpEval:
    f: float
    grad: np.ndarray
    c: np.ndarray  # equalities then inequalities
    jac: Optional[sp.csr_matrix]


class NlpProblem:
    """Contract between a transcription and a solver.

    ``min f(w)`` s.t. ``c_eq(w) = 0``, ``c_in(w) <= 0``, ``lb <= w <= ub``.
    Subclasses implement :meth:`evaluate`; ``var_scale`` gives a typical
    magnitude per variable and is used by the solver for internal scaling.
    """

    n_vars: int
    n_eq: int
    n_ineq: int
    lb: np.ndarray
    ub: np.ndarray
    var_scale: np.ndarray

    def evaluate(self, w: np.ndarray, jac: bool = True) -> NlpEval:
        raise NotImplementedError

    def objective(self, w) -> float:
        return self.evaluate(w, jac=False).f

    def constraints(self, w) -> np.ndarray:
        return self.evaluate(w, jac=False).c

    def gradient(self, w) -> np.ndarray:
        return self.evaluate(w).grad

    def jacobian(self, w) -> sp.csr_matrix:
        return self.evaluate(w).jac


class AlgebraicNlp(NlpProblem):
    """NLP from plain callables; used for solver tests without any kite code.

    Constraint callables return arrays and their Jacobians dense arrays or
    sparse matrices.  Missing constraint families are simply empty.
    """

    def __init__(self, n_vars, f, grad, c_eq=None, jac_eq=None, c_in=None, jac_in=None,
                 lb=None, ub=None, var_scale=None):
        self.n_vars = int(n_vars)
        self._f, self._grad = f, grad
        self._ceq, self._jeq, self._cin, self._jin = c_eq, jac_eq, c_in, jac_in
        w0 = np.zeros(self.n_vars)
        self.n_eq = 0 if c_eq is None else len(np.atleast_1d(c_eq(w0)))
        self.n_ineq = 0 if c_in is None else len(np.atleast_1d(c_in(w0)))
        self.lb = np.full(self.n_vars, -np.inf) if lb is None else np.asarray(lb, float)
        self.ub = np.full(self.n_vars, np.inf) if ub is None else np.asarray(ub, float)
        self.var_scale = np.ones(self.n_vars) if var_scale is None else np.asarray(var_scale, float)

    def evaluate(self, w, jac=True):
        w = np.asarray(w, dtype=float)
        parts, jparts = [], []
        for cf, jf in ((self._ceq, self._jeq), (self._cin, self._jin)):
            if cf is not None:
                parts.append(np.atleast_1d(np.asarray(cf(w), dtype=float)))
                if jac:
                    jparts.append(sp.csr_matrix(jf(w)).reshape(len(parts[-1]), self.n_vars))
        c = np.concatenate(parts) if parts else np.zeros(0)
        J = None
        if jac:
            J = sp.vstack(jparts, format="csr") if jparts else sp.csr_matrix((0, self.n_vars))
        return NlpEval(float(self._f(w)), np.asarray(self._grad(w), dtype=float), c, J)


@dataclass
class ShootingCell:
    stage: int
    interval: int
    s: np.ndarray  # initial state, 7 components
    u: np.ndarray  # [deltadot_1..K, v_winch]
    duration: float  # T_i / n_i
    n_stage: int = 1  # n_i, intervals in the stage

    @property
    def K(self) -> int:
        return len(self.u) - 1


def _substep_controls(U, k, K):
    return np.stack([U[:, k], U[:, K]], axis=1)


def shoot_batch(S, U, h, p: KiteParams, sensitivities: bool = False):
    """Propagate many shooting cells at once.

    ``S`` is ``(M, 7)``, ``U`` is ``(M, K+1)`` and ``h`` the interval
    durations ``(M,)``.  Returns the end states ``(M, 7)`` and, with
    ``sensitivities``, their derivatives ``(M, 7, 7+K+2)`` with respect to
    ``[s, deltadot_1..K, v_winch, h]``.  The value path performs exactly the
    floating point operations of :func:`~quatkite.integrator.rk4_step`.
    """
    S = np.asarray(S, dtype=float)
    U = np.asarray(U, dtype=float)
    M, K = U.shape[0], U.shape[1] - 1
    tau = np.asarray(h, dtype=float) / K
    if np.any(S[:, IL] <= 0):
        raise dyn.DomainError("tether length must be positive")
    tc = tau[:, None]
    rhs = lambda x, u: dyn.quat_rhs(x, u, p, True)  # noqa: E731
    x = S
    if not sensitivities:
        for k in range(K):
            x = rk4_step(rhs, x, _substep_controls(U, k, K), tc)
        return x, None

    nz = NX + K + 2
    X = np.zeros((M, NX, nz))
    X[:, :, :NX] = np.eye(NX)
    for k in range(K):
        u = _substep_controls(U, k, K)
        Uz = np.zeros((M, 2, nz))
        Uz[:, 0, NX + k] = 1.0
        Uz[:, 1, NX + K] = 1.0

        def stage(xs, Xs):
            f, fx, fu = dyn.quat_rhs_jac(xs, u, p, True)
            return f, fx @ Xs + fu @ Uz

        k1, d1 = stage(x, X)
        x2 = x + (tc / 2.0) * k1
        X2 = X + (tc / 2.0)[:, :, None] * d1
        X2[:, :, -1] += k1 / (2.0 * K)
        k2, d2 = stage(x2, X2)
        x3 = x + (tc / 2.0) * k2
        X3 = X + (tc / 2.0)[:, :, None] * d2
        X3[:, :, -1] += k2 / (2.0 * K)
        k3, d3 = stage(x3, X3)
        x4 = x + tc * k3
        X4 = X + tc[:, :, None] * d3
        X4[:, :, -1] += k3 / K
        k4, d4 = stage(x4, X4)
        incr = k1 + 2.0 * k2 + 2.0 * k3 + k4
        x = x + (tc / 6.0) * incr
        X = X + (tc / 6.0)[:, :, None] * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        X[:, :, -1] += incr / (6.0 * K)
    return x, X


def shoot_cell(cell: ShootingCell, p: KiteParams, sensitivities: bool = False):
    """End state of one cell; with ``sensitivities`` also ``d x / d [s, u, T_i]``.

    The stage duration is ``T_i = n_stage * duration``.
    """
    if not cell.duration > 0:
        raise ValueError("cell duration must be positive")
    x, X = shoot_batch(cell.s[None], cell.u[None], np.array([cell.duration]), p, sensitivities)
    if not np.all(np.isfinite(x)):
        raise EvaluationError(f"non-finite state in cell (stage {cell.stage}, "
                              f"interval {cell.interval})")
    if not sensitivities:
        return x[0]
    D = X[0].copy()
    D[:, -1] /= cell.n_stage
    return x[0], D


class ShootingNlp(NlpProblem):
    """Multiple-shooting NLP for the periodic pumping cycle.

    Variable layout, stage by stage: ``[s_{i,0}, u_{i,0}, ..., s_{i,n_i-1},
    u_{i,n_i-1}, T_i]`` with 7 states and ``K+1`` controls per interval.  The
    end state of the last interval of a stage is matched directly to the first
    node of the next stage, and the end state of the final interval enters
    the periodicity conditions, so no separate terminal node is stored.

    Equalities: 7 continuity rows per interval except the last, then the
    boundary rows of :func:`~quatkite.ocp_model.boundary_residuals`.  Inequalities
    at every node: ``v_a_min - v_a``, elevation, ``-sign_i * topo_indicator``.
    Rate, deflection, winch-speed, tether-length and duration limits are
    variable bounds.
    """

    def __init__(self, plan: StagePlan, p: KiteParams = KiteParams(),
                 weights: ObjectiveWeights = ObjectiveWeights(), threads: int = 1):
        self.plan, self.p, self.weights = plan, p, weights
        self.threads = max(1, int(threads))
        K = plan.K
        self.K = K
        self.M = M = plan.n_intervals
        self.cell_stage = plan.interval_stage
        self.cell_interval = np.concatenate([np.arange(n) for n in plan.n_i])
        width = NX + K + 1
        s_idx, u_idx, T_idx = [], [], []
        off = 0
        for i, n in enumerate(plan.n_i):
            for j in range(n):
                s_idx.append(off + np.arange(NX))
                u_idx.append(off + NX + np.arange(K + 1))
                off += width
            T_idx.append(off)
            off += 1
        self.s_idx = np.array(s_idx)
        self.u_idx = np.array(u_idx)
        self.T_idx = np.array(T_idx)
        self.cell_T_idx = self.T_idx[self.cell_stage]
        self.n_vars = off
        self.n_eq = NX * M
        self.n_ineq = len(INEQ_ROWS) * M
        self.n_per_cell = np.asarray(plan.n_i, dtype=float)[self.cell_stage]
        self.sign = np.asarray(plan.sign_pattern, dtype=float)[self.cell_stage]
        self._bounds()
        self._pattern()

    # layout ---------------------------------------------------------------
    def _bounds(self):
        p, plan = self.p, self.plan
        lb = np.full(self.n_vars, -np.inf)
        ub = np.full(self.n_vars, np.inf)
        lb[self.s_idx[:, IDELTA]] = -p.delta_max
        ub[self.s_idx[:, IDELTA]] = p.delta_max
        lb[self.s_idx[:, IL]] = L_MIN
        ub[self.s_idx[:, IL]] = p.l_max
        lb[self.s_idx[:, IQ0:]] = -Q_BOUND
        ub[self.s_idx[:, IQ0:]] = Q_BOUND
        lb[self.u_idx[:, :self.K]] = -p.deltadot_max
        ub[self.u_idx[:, :self.K]] = p.deltadot_max
        lb[self.u_idx[:, self.K]] = p.v_winch_min
        Tb = np.asarray(plan.T_bounds)
        lb[self.T_idx], ub[self.T_idx] = Tb[:, 0], Tb[:, 1]
        self.lb, self.ub = lb, ub
        scale = np.ones(self.n_vars)
        # energy over a minute of flight at the crosswind limit
        scale[self.s_idx[:, IW]] = loyd_power(p) / p.force_coeff * 60.0
        scale[self.s_idx[:, IL]] = 100.0
        scale[self.T_idx] = 10.0
        self.var_scale = scale

    def _pattern(self):
        """Row/column indices of the Jacobian nonzeros, in fill order."""
        M, K = self.M, self.K
        rows, cols = [], []
        zc = np.concatenate  # local alias
        z_cols = [zc([self.s_idx[c], self.u_idx[c], [self.cell_T_idx[c]]]) for c in range(M)]
        # continuity: dense 7 x (7+K+2) block plus -I on the next node
        for c in range(M - 1):
            r = NX * c + np.arange(NX)
            rows.append(np.repeat(r, len(z_cols[c])))
            cols.append(np.tile(z_cols[c], NX))
            rows.append(r)
            cols.append(self.s_idx[c + 1])
        # boundary rows: q (4), l, delta from the last cell, W0 on the first node
        r0 = NX * (M - 1)
        end_rows = [IQ0, IQ0 + 1, IQ0 + 2, IQ0 + 3, IL, IDELTA]
        for k, sr in enumerate(end_rows):
            rows.append(np.full(len(z_cols[M - 1]), r0 + k))
            cols.append(z_cols[M - 1])
            rows.append([r0 + k])
            cols.append([self.s_idx[0][sr]])
        rows.append([r0 + 6])
        cols.append([self.s_idx[0][IW]])
        # node inequalities
        base = self.n_eq
        for c in range(M):
            qc = self.s_idx[c][IQ0:]
            rows.append(np.full(5, base + 3 * c))
            cols.append(zc([qc, [self.u_idx[c][K]]]))
            rows.append(np.full(4, base + 3 * c + 1))
            cols.append(qc)
            rows.append(np.full(4, base + 3 * c + 2))
            cols.append(qc)
        self._rows = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows])
        self._cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in cols])
        self._z_cols = np.array(z_cols)
        pattern = sp.csr_matrix((np.arange(1, len(self._rows) + 1, dtype=float),
                                 (self._rows, self._cols)),
                                shape=(self.n_eq + self.n_ineq, self.n_vars))
        # position of every fill entry inside the CSR data array
        pattern.sort_indices()
        self._csr_indptr = pattern.indptr
        self._csr_indices = pattern.indices
        self._csr_perm = pattern.data.astype(np.int64) - 1

    def jacobian_structure(self):
        """``(rows, cols)`` of every structurally nonzero Jacobian entry."""
        return self._rows.copy(), self._cols.copy()

    def unpack(self, w):
        """``(S, U, T)`` views: node states, interval controls, stage durations."""
        w = np.asarray(w, dtype=float)
        return w[self.s_idx], w[self.u_idx], w[self.T_idx]

    def pack(self, S, U, T) -> np.ndarray:
        w = np.zeros(self.n_vars)
        w[self.s_idx] = S
        w[self.u_idx] = U
        w[self.T_idx] = T
        return w

    def interval_durations(self, T) -> np.ndarray:
        return np.asarray(T, dtype=float)[self.cell_stage] / self.n_per_cell

    def cells(self, w):
        S, U, T = self.unpack(w)
        h = self.interval_durations(T)
        return [ShootingCell(int(self.cell_stage[c]), int(self.cell_interval[c]),
                             S[c], U[c], float(h[c]), int(self.n_per_cell[c]))
                for c in range(self.M)]

    # evaluation -----------------------------------------------------------
    def shoot_all(self, S, U, h, sensitivities: bool):
        if self.threads == 1 or self.M < 2 * self.threads:
            x, X = shoot_batch(S, U, h, self.p, sensitivities)
        else:
            chunks = np.array_split(np.arange(self.M), self.threads)
            with ThreadPoolExecutor(self.threads) as ex:
                res = list(ex.map(lambda idx: shoot_batch(S[idx], U[idx], h[idx], self.p,
                                                          sensitivities), chunks))
            x = np.concatenate([r[0] for r in res])
            X = np.concatenate([r[1] for r in res]) if sensitivities else None
        bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
        if bad.size:
            c = int(bad[0])
            raise EvaluationError(f"non-finite state in cell {c} (stage {self.cell_stage[c]}, "
                                  f"interval {self.cell_interval[c]})", cell=c)
        return x, X

    def evaluate(self, w, jac: bool = True) -> NlpEval:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_vars,) or not np.all(np.isfinite(w)):
            raise EvaluationError("variable vector must be finite with n_vars entries")
        p, K, M = self.p, self.K, self.M
        S, U, T = self.unpack(w)
        h = self.interval_durations(T)
        try:
            xe, X = self.shoot_all(S, U, h, jac)
        except dyn.DomainError as exc:
            raise EvaluationError(str(exc)) from exc

        eq = np.empty(self.n_eq)
        eq[:NX * (M - 1)] = (xe[:-1] - S[1:]).ravel()
        eq[NX * (M - 1):] = boundary_residuals(S[0], xe[-1])

        q = S[:, IQ0:]
        v = U[:, K]
        v_a = dyn.air_path_speed(q, v, p)
        ineq = np.empty((M, 3))
        ineq[:, 0] = p.v_a_min - v_a
        ineq[:, 1] = elevation_residual(q, p)
        ineq[:, 2] = -self.sign * topo_indicator(q)
        c = np.concatenate([eq, ineq.ravel()])

        f = objective_terms(xe[-1, IW], T, U[:, :K], v, self.plan, self.weights, p)
        if not jac:
            return NlpEval(f, None, c, None)

        # objective gradient
        g = np.zeros(self.n_vars)
        scale = self.weights.scale(p)
        Ttot = T.sum()
        W_end = xe[-1, IW]
        # chain rule through the last cell: columns [s, u, h]; dh/dT = 1/n
        dW = X[-1, IW].copy()
        dW[-1] /= self.n_per_cell[-1]
        np.add.at(g, self._z_cols[-1], -scale / Ttot * dW)
        g[self.T_idx] += scale * W_end / Ttot ** 2
        eps_d, eps_v = self.weights.eps_delta, self.weights.eps_v
        dd = U[:, :K]
        g[self.u_idx[:, :K]] += 2.0 * eps_d * (h / K)[:, None] * dd
        np.add.at(g, self.cell_T_idx, eps_d / (K * self.n_per_cell) * np.sum(dd * dd, axis=1))
        nxt = np.roll(np.arange(M), -1)
        dv = v - v[nxt]
        np.add.at(g, self.u_idx[:, K], 2.0 * eps_v * h * dv)
        np.add.at(g, self.u_idx[nxt, K], -2.0 * eps_v * h * dv)
        np.add.at(g, self.cell_T_idx, eps_v * dv * dv / self.n_per_cell)

        # Jacobian values in pattern order
        Xs = X.copy()
        Xs[:, :, -1] /= self.n_per_cell[:, None]
        vals = []
        minus_eye = -np.ones(NX)
        for cc in range(M - 1):
            vals.append(Xs[cc].ravel())
            vals.append(minus_eye)
        end_rows = [IQ0, IQ0 + 1, IQ0 + 2, IQ0 + 3, IL, IDELTA]
        for sr in end_rows:
            vals.append(Xs[-1, sr])
            vals.append([-1.0])
        vals.append([1.0])
        q0, q1, q2, q3 = q.T
        dva = (2.0 * p.E * p.v_w) * np.stack([q0, q1, -q2, -q3], axis=1)
        t = math.tan(p.theta_min)
        delev = np.stack([2 * t * q0 - 2 * q2, 2 * t * q1 + 2 * q3,
                          -2 * t * q2 - 2 * q0, -2 * t * q3 + 2 * q1], axis=1)
        dtopo = -self.sign[:, None] * np.stack([q3, -q2, -q1, q0], axis=1)
        node = np.concatenate([-dva, np.full((M, 1), p.E), delev, dtopo], axis=1)
        vals.append(node.ravel())
        data = np.concatenate([np.asarray(v_, dtype=float).ravel() for v_ in vals])
        J = sp.csr_matrix((data[self._csr_perm], self._csr_indices, self._csr_indptr),
                          shape=(self.n_eq + self.n_ineq, self.n_vars))
        return NlpEval(f, g, c, J)

    # conversions ----------------------------------------------------------
    def rollout(self, x0, U, T, stabilize: bool = True) -> Trajectory:
        """Simulate the controls of ``U`` over the substep grid from ``x0``."""
        taus, controls = self.substep_schedule(U, T)
        return simulate("quaternion", x0, controls, taus, p=self.p, stabilize=stabilize)

    def substep_schedule(self, U, T):
        """Per-substep step sizes and ``[deltadot, v_winch]`` pairs."""
        U = np.asarray(U, dtype=float)
        K = self.K
        h = self.interval_durations(T)
        taus = np.repeat(h / K, K)
        controls = np.column_stack([U[:, :K].ravel(), np.repeat(U[:, K], K)])
        return taus, controls

    def from_rollout(self, traj: Trajectory, U, T) -> np.ndarray:
        """Variable vector whose nodes are the rollout states at interval starts."""
        S = traj.states[::self.K][:self.M]
        if S.shape[0] != self.M:
            raise ValueError("rollout too short for the shooting grid")
        return self.pack(S, U, T)

    def solution_trajectory(self, w) -> Trajectory:
        """Dense rollout of the solution controls from the first node."""
        S, U, T = self.unpack(w)
        return self.rollout(S[0], U, T)

    def node_trajectory(self, w) -> Trajectory:
        """Substep states of every cell shot from its own node (not re-simulated)."""
        S, U, T = self.unpack(w)
        K = self.K
        h = self.interval_durations(T)
        states = [S]
        x = S
        for k in range(K):
            x = rk4_step(lambda x_, u_: dyn.quat_rhs(x_, u_, self.p, True), x,
                         _substep_controls(U, k, K), (h / K)[:, None])
            states.append(x)
        seq = np.stack(states[:-1], axis=1).reshape(-1, NX)
        seq = np.vstack([seq, states[-1][-1:]])
        taus, controls = self.substep_schedule(U, T)
        times = np.concatenate([[0.0], np.cumsum(taus)])
        return Trajectory("quaternion", times, seq, controls, self.p, True)

    def describe(self, w) -> dict:
        """Self-describing dump of dimensions, bounds, sparsity and one evaluation."""
        ev = self.evaluate(w)
        rows, cols = self.jacobian_structure()

        def fl(a):
            return [None if not np.isfinite(x) else float(x) for x in np.asarray(a).ravel()]
        return {
            "format": "quatkite-nlp",
            "version": 1,
            "n_vars": self.n_vars,
            "n_eq": self.n_eq,
            "n_ineq": self.n_ineq,
            "plan": self.plan.to_dict(),
            "params": self.p.to_dict(),
            "weights": self.weights.to_dict(),
            "layout": {"s": self.s_idx.tolist(), "u": self.u_idx.tolist(),
                       "T": self.T_idx.tolist()},
            "inequality_rows_per_node": list(INEQ_ROWS),
            "lb": fl(self.lb),
            "ub": fl(self.ub),
            "var_scale": fl(self.var_scale),
            "jacobian_rows": rows.tolist(),
            "jacobian_cols": cols.tolist(),
            "reference": {"w": fl(w), "f": ev.f, "grad": fl(ev.grad), "c": fl(ev.c),
                          "jac": fl(ev.jac[rows, cols])},
        }


def variable_count(plan: StagePlan) -> int:
    """Number of NLP variables of :class:`ShootingNlp` for ``plan``."""
    return plan.n_intervals * (NX + plan.K + 1) + plan.N


def build_nlp(plan: StagePlan, p: KiteParams = KiteParams(),
              weights: ObjectiveWeights = ObjectiveWeights(), threads: int = 1) -> ShootingNlp:
    return ShootingNlp(plan, p, weights, threads)


def nlp_jacobian(problem: NlpProblem, w) -> sp.csr_matrix:
    return problem.evaluate(np.asarray(w, dtype=float)).jac


def rollout_node_error(nlp: ShootingNlp, w, sol=None):
    """Gap between the solution nodes and a dense re-simulation of its controls.

    Returns the absolute per-component maxima and the overall maximum
    relative to ``max(1, max|component|)``, which keeps the energy state
    ``W`` (tens of thousands of units) comparable with the unit quaternion.
    """
    S, _, _ = nlp.unpack(w)
    sol = nlp.solution_trajectory(w) if sol is None else sol
    nodes = sol.states[::nlp.K][:nlp.M]
    if sol.failed or nodes.shape != S.shape:
        return [math.inf] * S.shape[1], math.inf
    err = np.max(np.abs(nodes - S), axis=0)
    rel = err / np.maximum(1.0, np.max(np.abs(S), axis=0))
    return err.tolist(), float(np.max(rel))


def dump_nlp(problem: ShootingNlp, w, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem.describe(w), fh)

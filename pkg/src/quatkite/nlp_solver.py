"""Augmented-Lagrangian NLP solver with a projected quasi-Newton inner loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kite_dynamics import DomainError
from .params import ConfigError
from .transcription import EvaluationError, NlpEval, NlpProblem

STATUSES = ("converged", "max_iters", "evaluation_failure")


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-6
    constraint_tol: float = 1e-6
    max_outer_iters: int = 100
    max_inner_iters: int = 1000
    mu0: float = 1e4
    mu_growth: float = 10.0
    mu_max: float = 1e12
    multiplier_bound: float = 1e10  # safeguard |lambda|, nu <= bound
    feasibility_decrease: float = 0.25  # grow mu unless violation drops by this factor
    inner_tol0: float = 1e-2
    initial_multipliers: bool = True  # least-squares equality multipliers at w0
    lbfgs_memory: int = 20
    metric: str = "structured"  # "structured" (exact penalty curvature) or "lbfgs"
    max_step: float = 0.5  # largest trial change of any scaled variable per inner step
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    max_failed_evals: int = 20
    verbosity: int = 0

    def __post_init__(self):
        if not (self.kkt_tol > 0 and self.constraint_tol > 0):
            raise ConfigError("solver tolerances must be > 0")
        if not self.mu_growth > 1:
            raise ConfigError("solver.mu_growth must be > 1")
        if not self.mu0 > 0:
            raise ConfigError("solver.mu0 must be > 0")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo_c < 1:
            raise ConfigError("solver line-search factors must lie in (0, 1)")
        if self.metric not in ("structured", "lbfgs"):
            raise ConfigError(f"solver.metric must be 'structured' or 'lbfgs', got {self.metric!r}")
        if not self.max_step > 0:
            raise ConfigError("solver.max_step must be > 0")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1 or self.lbfgs_memory < 1:
            raise ConfigError("solver iteration limits must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SolverOptions":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown solver field(s): {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"solver: {exc}") from exc


@dataclass
class SolveReport:
    """Outcome of :func:`solve`.

    ``violation`` and ``kkt`` are measured on the internally scaled problem,
    the quantities the convergence test uses.  ``multipliers`` refer to the
    original (unscaled) constraints.
    """

    status: str
    w: np.ndarray
    objective: float
    violation: float
    kkt: float
    iterations: int
    inner_iterations: int
    wall_time: float
    objective_history: List[float] = field(default_factory=list)
    violation_history: List[float] = field(default_factory=list)
    kkt_history: List[float] = field(default_factory=list)
    penalty_history: List[float] = field(default_factory=list)  # mu used in each outer iteration
    multipliers: Optional[np.ndarray] = None
    log: List[str] = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"


class ScaledProblem(NlpProblem):
    """``y = w / var_scale`` with objective and constraint rows divided by fixed factors."""

    def __init__(self, problem: NlpProblem, d, f_scale: float, row_scale):
        self.base = problem
        self.d = np.asarray(d, dtype=float)
        self.f_scale = float(f_scale)
        self.row_scale = np.asarray(row_scale, dtype=float)
        self.n_vars, self.n_eq, self.n_ineq = problem.n_vars, problem.n_eq, problem.n_ineq
        self.lb = problem.lb / self.d
        self.ub = problem.ub / self.d
        self.var_scale = np.ones(self.n_vars)
        self._Rinv = sp.diags(1.0 / self.row_scale)
        self._D = sp.diags(self.d)

    def to_w(self, y):
        return y * self.d

    def evaluate(self, y, jac=True):
        ev = self.base.evaluate(self.to_w(y), jac)
        c = ev.c / self.row_scale
        if not jac:
            return NlpEval(ev.f / self.f_scale, None, c, None)
        J = (self._Rinv @ ev.jac @ self._D).tocsr()
        return NlpEval(ev.f / self.f_scale, ev.grad * self.d / self.f_scale, c, J)


def _violation(c, n_eq):
    v = 0.0
    if n_eq:
        v = float(np.max(np.abs(c[:n_eq])))
    if len(c) > n_eq:
        v = max(v, float(np.max(c[n_eq:])), 0.0)
    return v


def _projected_gradient(x, g, lb, ub):
    return np.clip(x - g, lb, ub) - x


def kkt_residual(problem: NlpProblem, w, multipliers, ev: Optional[NlpEval] = None) -> float:
    """Infinity norm of the projected Lagrangian gradient plus complementarity.

    ``multipliers`` holds the equality multipliers followed by the inequality
    multipliers of ``L = f + lambda.c_eq + nu.c_in`` (``nu >= 0``).  The
    complementarity measure is ``max |min(-c_in, nu)|`` plus any negative
    part of ``nu``.
    """
    w = np.asarray(w, dtype=float)
    ev = problem.evaluate(w) if ev is None else ev
    m = np.asarray(multipliers, dtype=float).reshape(-1)
    g = ev.grad + (ev.jac.T @ m if m.size else 0.0)
    res = float(np.max(np.abs(_projected_gradient(w, g, problem.lb, problem.ub)), initial=0.0))
    if problem.n_ineq:
        nu = m[problem.n_eq:]
        cin = ev.c[problem.n_eq:]
        res += float(np.max(np.abs(np.minimum(-cin, nu)))) + float(np.max(np.maximum(-nu, 0.0)))
    return res


class _AugLag:
    """PHR augmented Lagrangian with the inequality slacks eliminated in closed form."""

    def __init__(self, prob: ScaledProblem, lam, nu, mu):
        self.prob, self.lam, self.nu, self.mu = prob, lam, nu, mu
        self.n_eq = prob.n_eq
        self.n_evals = 0

    def __call__(self, y, need_grad=True):
        self.n_evals += 1
        ev = self.prob.evaluate(y, need_grad)
        if not (np.isfinite(ev.f) and np.all(np.isfinite(ev.c))):
            raise EvaluationError("non-finite problem values")
        ce, ci = ev.c[:self.n_eq], ev.c[self.n_eq:]
        mu = self.mu
        shifted = np.maximum(0.0, self.nu + mu * ci)
        val = (ev.f + self.lam @ ce + 0.5 * mu * ce @ ce
               + (shifted @ shifted - self.nu @ self.nu) / (2.0 * mu))
        if not need_grad:
            return val, None, ev
        mult = np.concatenate([self.lam + mu * ce, shifted])
        grad = ev.grad + ev.jac.T @ mult
        return val, grad, ev

    def multipliers(self, ev):
        """First-order multiplier estimates ``lambda + mu c_eq`` and ``max(0, nu + mu c_in)``."""
        ce, ci = ev.c[:self.n_eq], ev.c[self.n_eq:]
        return np.concatenate([self.lam + self.mu * ce, np.maximum(0.0, self.nu + self.mu * ci)])

    def penalty_rows(self, ev):
        """Jacobian rows carrying penalty curvature: equalities and active inequalities."""
        ci = ev.c[self.n_eq:]
        active = np.concatenate([np.ones(self.n_eq), (self.nu + self.mu * ci > 0).astype(float)])
        return (sp.diags(active) @ ev.jac).tocsc()


def _two_loop(g, S, Y, free, h0):
    """Classical L-BFGS direction with diagonal initial inverse Hessian ``h0``."""
    q = g * free
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q = q - a * y
    r = h0 * q
    if S:
        s, y = S[-1], Y[-1]
        r = r * ((s @ y) / (y @ (h0 * y * free)))
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ r)
        r = r + (a - b) * s
    return -r * free


def _structured_direction(g, S, Y, free, sigma, mu, JA):
    """Solve ``(mu J_A^T J_A + B) d = -g`` on the free variables.

    ``B`` is the limited-memory BFGS approximation of the Lagrangian Hessian
    built from ``sigma I`` and the pairs ``(S, Y)``, in compact form
    ``B = sigma I - W K^-1 W^T`` with ``W = [sigma S, Y]``.  The penalty
    curvature is kept exact and the low-rank part is added by the Woodbury
    identity around a sparse LU factorization of ``sigma I + mu J_A^T J_A``.
    """
    n = g.size
    idx = np.flatnonzero(free)
    J = JA[:, idx]
    A0 = (sigma * sp.identity(idx.size, format="csc") + mu * (J.T @ J)).tocsc()
    lu = spla.splu(A0)
    gf = g[idx]
    z = lu.solve(gf)
    pairs = [(s[idx], y[idx]) for s, y in zip(S, Y)]
    pairs = [(s, y) for s, y in pairs if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y)]
    if pairs:
        Sm = np.column_stack([p[0] for p in pairs])
        Ym = np.column_stack([p[1] for p in pairs])
        SY = Sm.T @ Ym
        L = np.tril(SY, -1)
        D = np.diag(np.diag(SY))
        K = np.block([[sigma * (Sm.T @ Sm), L], [L.T, -D]])
        W = np.hstack([sigma * Sm, Ym])
        Z = lu.solve(W)
        z = z + Z @ np.linalg.solve(K - W.T @ Z, W.T @ z)
    d = np.zeros(n)
    d[idx] = -z
    return d


def _inner(func: _AugLag, y, lb, ub, tol, opts: SolverOptions):
    """Projected quasi-Newton on the augmented Lagrangian. Returns ``(y, val, grad, ev, iters, flag)``.

    With ``opts.metric == "structured"`` the pairs ``(s, y)`` record the change
    of the Lagrangian gradient at fixed multipliers, so the limited-memory
    matrix models only the curvature the penalty term does not provide.
    """
    structured = opts.metric == "structured" and func.prob.n_eq + func.prob.n_ineq > 0
    val, grad, ev = func(y)
    S, Y = [], []
    sigma = 1.0
    it = 0
    flag = "max_iters"
    while it < opts.max_inner_iters:
        pg = _projected_gradient(y, grad, lb, ub)
        if np.max(np.abs(pg), initial=0.0) <= tol:
            flag = "converged"
            break
        eps = 1e-12
        bound = ((y <= lb + eps) & (grad > 0)) | ((y >= ub - eps) & (grad < 0))
        free = (~bound).astype(float)
        if structured:
            JA = func.penalty_rows(ev)
            try:
                d = _structured_direction(grad, S, Y, free, sigma, func.mu, JA)
            except (RuntimeError, np.linalg.LinAlgError):
                S, Y = [], []
                d = _structured_direction(grad, S, Y, free, sigma, func.mu, JA)
        else:
            d = _two_loop(grad, S, Y, free, np.ones_like(y))
        if not grad @ d < 0:
            S, Y = [], []
            d = -grad * free
        alpha = min(1.0, opts.max_step / max(np.max(np.abs(d)), 1e-300))
        accepted = False
        failed_evals = 0
        for _ in range(opts.max_backtracks):
            y_new = np.clip(y + alpha * d, lb, ub)
            if np.array_equal(y_new, y):
                break  # the step vanished in rounding or against the bounds
            try:
                # values first; derivatives only for a point that may be accepted
                val_new, _, _ = func(y_new, need_grad=False)
                step = y_new - y
                decrease = grad @ step
                if val_new <= val + opts.armijo_c * decrease:
                    val_new, grad_new, ev_new = func(y_new)
                    accepted = True
                    break
                # near the rounding floor of the function values fall back to
                # the approximate Wolfe test, which relies on slopes instead
                if val_new <= val + 1e-10 * (abs(val) + 1.0):
                    val_new, grad_new, ev_new = func(y_new)
                    if grad_new @ step <= (1.0 - 2.0 * opts.armijo_c) * abs(decrease):
                        accepted = True
                        break
            except (EvaluationError, DomainError, FloatingPointError, ValueError):
                failed_evals += 1
                if failed_evals > opts.max_failed_evals:
                    break
            alpha *= opts.backtrack
        it += 1
        if not accepted:
            if S:
                S, Y = [], []
                continue
            flag = "stalled"
            break
        s_vec = y_new - y
        if structured:
            m_new = func.multipliers(ev_new)
            y_vec = grad_new - ev.grad - ev.jac.T @ m_new
        else:
            y_vec = grad_new - grad
        sy = s_vec @ y_vec
        if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            S.append(s_vec)
            Y.append(y_vec)
            if len(S) > opts.lbfgs_memory:
                S.pop(0)
                Y.pop(0)
            if structured:
                sigma = min(max((y_vec @ y_vec) / sy, 1e-8), 1e8)
        y, val, grad, ev = y_new, val_new, grad_new, ev_new
        if opts.verbosity >= 2:
            print(f"    inner {it} {val:.12e} pg {np.max(np.abs(pg)):.3e} "
                  f"alpha {alpha:.2e} sigma {sigma:.1e} free {int(free.sum())}", flush=True)
    return y, val, grad, ev, it, flag


def _least_squares_multipliers(prob: NlpProblem, y, ev):
    """Equality multipliers minimising the free part of the Lagrangian gradient."""
    if prob.n_eq == 0:
        return np.zeros(0)
    free = np.flatnonzero((y > prob.lb) & (y < prob.ub))
    if free.size == 0:
        return np.zeros(prob.n_eq)
    Jt = ev.jac[:prob.n_eq].T.tocsr()[free]
    lam = spla.lsqr(Jt, -ev.grad[free], atol=1e-12, btol=1e-12, iter_lim=10 * prob.n_eq)[0]
    return np.where(np.isfinite(lam), lam, 0.0)


def _scaling(problem: NlpProblem, w0):
    d = np.asarray(getattr(problem, "var_scale", np.ones(problem.n_vars)), dtype=float)
    ev = problem.evaluate(w0)
    f_scale = max(1.0, float(np.max(np.abs(ev.grad * d), initial=0.0)))
    Jd = abs(ev.jac @ sp.diags(d)).tocsr()
    row_max = np.zeros(Jd.shape[0])
    if Jd.nnz:
        row_max = np.maximum.reduceat(np.append(Jd.data, 0.0), Jd.indptr[:-1]) \
            * (np.diff(Jd.indptr) > 0)
    return d, f_scale, np.maximum(1.0, row_max)


def solve(problem: NlpProblem, w0, opts: Optional[SolverOptions] = None,
          callback: Optional[Callable[[int, np.ndarray], None]] = None) -> SolveReport:
    """Minimise ``problem`` from ``w0``.

    Augmented-Lagrangian outer loop over equality and inequality rows (with
    the slacks of the inequalities eliminated analytically), inner
    bound-constrained minimisation by a projected quasi-Newton method with
    Armijo backtracking (see ``SolverOptions.metric``).  Variables, objective and constraint rows are scaled once
    at ``w0``.  ``callback(outer_iter, w)`` is called after every outer
    iteration.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    w0 = np.clip(np.asarray(w0, dtype=float), problem.lb, problem.ub)
    if w0.shape != (problem.n_vars,):
        raise ValueError(f"w0 has shape {w0.shape}, expected ({problem.n_vars},)")
    log = ["iter objective violation kkt step mu inner"]

    def emit(line):
        log.append(line)
        if opts.verbosity:
            print(line, flush=True)

    try:
        d, f_scale, row_scale = _scaling(problem, w0)
    except (EvaluationError, DomainError) as exc:
        return SolveReport("evaluation_failure", w0, math.nan, math.inf, math.inf, 0, 0,
                           time.perf_counter() - t0, log=log, message=str(exc))
    prob = ScaledProblem(problem, d, f_scale, row_scale)
    y = w0 / d
    n_eq, n_in = prob.n_eq, prob.n_ineq
    ev = prob.evaluate(y)
    lam = _least_squares_multipliers(prob, y, ev) if opts.initial_multipliers else np.zeros(n_eq)
    lam = np.clip(lam, -opts.multiplier_bound, opts.multiplier_bound)
    nu = np.zeros(n_in)
    mu = opts.mu0
    tol = opts.inner_tol0
    func = _AugLag(prob, lam, nu, mu)
    ev = prob.evaluate(y)
    viol = _violation(ev.c, n_eq)
    report = SolveReport("max_iters", w0, ev.f * f_scale, viol, math.inf, 0, 0, 0.0, log=log)
    emit(f"0 {ev.f * f_scale:.10e} {viol:.3e} nan 0 {mu:.1e} 0")
    inner_total = 0
    status, message = "max_iters", ""
    kkt = math.inf
    for k in range(1, opts.max_outer_iters + 1):
        func.lam, func.nu, func.mu = lam, nu, mu
        y_prev = y
        y, _, _, ev, n_it, flag = _inner(func, y, prob.lb, prob.ub, tol, opts)
        inner_total += n_it
        if flag == "evaluation_failure":
            status, message = "evaluation_failure", f"model evaluation failed in outer iteration {k}"
            break
        ce, ci = ev.c[:n_eq], ev.c[n_eq:]
        lam = np.clip(lam + mu * ce, -opts.multiplier_bound, opts.multiplier_bound)
        nu = np.clip(nu + mu * ci, 0.0, opts.multiplier_bound)
        new_viol = _violation(ev.c, n_eq)
        kkt = kkt_residual(prob, y, np.concatenate([lam, nu]), ev)
        step = float(np.max(np.abs(y - y_prev), initial=0.0))
        report.objective_history.append(ev.f * f_scale)
        report.violation_history.append(new_viol)
        report.kkt_history.append(kkt)
        report.penalty_history.append(mu)
        emit(f"{k} {ev.f * f_scale:.10e} {new_viol:.3e} {kkt:.3e} {step:.3e} {mu:.1e} {n_it}")
        if callback is not None:
            callback(k, prob.to_w(y))
        report.iterations = k
        if new_viol <= opts.constraint_tol and kkt <= opts.kkt_tol:
            status = "converged"
            viol = new_viol
            break
        if new_viol > opts.feasibility_decrease * viol and new_viol > opts.constraint_tol:
            mu = min(mu * opts.mu_growth, opts.mu_max)
        viol = new_viol
        tol = max(0.1 * tol, 0.1 * opts.kkt_tol)
    w = prob.to_w(y)
    ev = prob.evaluate(y)
    report.status = status
    report.message = message
    report.w = w
    report.objective = ev.f * f_scale
    report.violation = _violation(ev.c, n_eq)
    report.kkt = kkt
    report.inner_iterations = inner_total
    report.multipliers = np.concatenate([lam, nu]) * f_scale / row_scale
    report.wall_time = time.perf_counter() - t0
    return report

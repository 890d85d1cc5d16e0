import numpy as np
import pytest

from conftest import SMALL_SPEC
from quatkite.guess import GuessSpec, generate_guess
from quatkite.integrator import mean_power
from quatkite.ocp_model import StagePlan
from quatkite.params import ConfigError
from quatkite.nlp_solver import SolverOptions, kkt_residual, solve
from quatkite.transcription import AlgebraicNlp, EvaluationError, build_nlp

TIGHT = SolverOptions(kkt_tol=1e-10, constraint_tol=1e-10)


def simplex_qp(c):
    n = len(c)
    return AlgebraicNlp(n, lambda w: float((w - c) @ (w - c)), lambda w: 2 * (w - c),
                        c_eq=lambda w: np.array([w.sum() - 1.0]),
                        jac_eq=lambda w: np.ones((1, n)), lb=np.zeros(n))


def project_simplex(c):
    u = np.sort(c)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.nonzero(u - css / np.arange(1, len(c) + 1) > 0)[0][-1]
    return np.maximum(c - css[k] / (k + 1), 0.0)


def least_norm(A, b):
    return AlgebraicNlp(A.shape[1], lambda w: float(w @ w), lambda w: 2 * w,
                        c_eq=lambda w: A @ w - b, jac_eq=lambda w: A)


class TestOracles:
    def test_simplex_qp(self):
        c = np.array([1.0, 0, 0, 0, 0])
        rep = solve(simplex_qp(c), np.full(5, 0.2), TIGHT)
        assert rep.converged
        np.testing.assert_allclose(rep.w, project_simplex(c), atol=1e-8)
        np.testing.assert_allclose(rep.w, [1, 0, 0, 0, 0], atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_simplex_random(self, seed):
        c = np.random.default_rng(seed).normal(size=7)
        rep = solve(simplex_qp(c), np.full(7, 1 / 7), TIGHT)
        assert rep.converged
        np.testing.assert_allclose(rep.w, project_simplex(c), atol=1e-8)

    @pytest.mark.parametrize("seed", range(3))
    def test_least_norm(self, seed):
        rng = np.random.default_rng(seed)
        A, b = rng.normal(size=(3, 10)), rng.normal(size=3)
        rep = solve(least_norm(A, b), np.zeros(10), TIGHT)
        assert rep.converged
        np.testing.assert_allclose(rep.w, A.T @ np.linalg.solve(A @ A.T, b), atol=1e-8)

    def test_default_tolerances(self):
        c = np.array([1.0, 0, 0, 0, 0])
        rep = solve(simplex_qp(c), np.full(5, 0.2))
        assert rep.converged and rep.violation <= 1e-6 and rep.kkt <= 1e-6
        np.testing.assert_allclose(rep.w, [1, 0, 0, 0, 0], atol=1e-6)

    def test_lbfgs_metric(self):
        rng = np.random.default_rng(4)
        A, b = rng.normal(size=(3, 10)), rng.normal(size=3)
        rep = solve(least_norm(A, b), np.zeros(10), SolverOptions(metric="lbfgs"))
        assert rep.converged
        np.testing.assert_allclose(rep.w, A.T @ np.linalg.solve(A @ A.T, b), atol=1e-5)

    def test_inequality_constraint(self):
        # min (w0-2)^2 + (w1-2)^2  s.t.  w0 + w1 <= 1  ->  (0.5, 0.5)
        nlp = AlgebraicNlp(2, lambda w: float(np.sum((w - 2) ** 2)), lambda w: 2 * (w - 2),
                           c_in=lambda w: np.array([w.sum() - 1.0]),
                           jac_in=lambda w: np.ones((1, 2)))
        rep = solve(nlp, np.zeros(2), TIGHT)
        assert rep.converged
        np.testing.assert_allclose(rep.w, [0.5, 0.5], atol=1e-8)
        np.testing.assert_allclose(rep.multipliers, [3.0], rtol=1e-6)


class TestKkt:
    def test_unconstrained_minimizer(self):
        nlp = AlgebraicNlp(3, lambda w: float(w @ w), lambda w: 2 * w)
        assert kkt_residual(nlp, np.zeros(3), np.zeros(0)) <= 1e-12

    def test_plain_gradient(self):
        nlp = AlgebraicNlp(2, lambda w: float(w @ w), lambda w: 2 * w,
                           c_in=lambda w: np.array([w[0] - 10.0]),
                           jac_in=lambda w: np.array([[1.0, 0.0]]))
        w = np.array([0.3, -0.4])
        assert kkt_residual(nlp, w, np.zeros(1)) == pytest.approx(0.8)

    def test_simplex_solution(self):
        c = np.array([1.0, 0, 0, 0, 0])
        nlp = simplex_qp(c)
        rep = solve(nlp, np.full(5, 0.2), TIGHT)
        assert kkt_residual(nlp, rep.w, rep.multipliers) <= 1e-6


class TestBehaviour:
    def test_callback_and_history(self):
        seen = []
        rep = solve(simplex_qp(np.array([0.5, 0.2, 0.1])), np.zeros(3),
                    callback=lambda k, w: seen.append((k, w.copy())))
        assert [k for k, _ in seen] == list(range(1, rep.iterations + 1))
        assert len(rep.kkt_history) == rep.iterations == len(rep.violation_history)
        assert rep.log[0].startswith("iter") and len(rep.log) == rep.iterations + 2

    def test_max_iters(self):
        rng = np.random.default_rng(0)
        A, b = rng.normal(size=(3, 10)), rng.normal(size=3)
        rep = solve(least_norm(A, b), np.zeros(10),
                    SolverOptions(max_outer_iters=1, max_inner_iters=1))
        assert rep.status == "max_iters" and not rep.converged

    def test_evaluation_failure_at_start(self):
        def f(w):
            raise EvaluationError("boom")
        nlp = AlgebraicNlp.__new__(AlgebraicNlp)
        AlgebraicNlp.__init__(nlp, 2, lambda w: 0.0, lambda w: np.zeros(2))
        nlp.evaluate = lambda w, jac=True: f(w)
        rep = solve(nlp, np.zeros(2))
        assert rep.status == "evaluation_failure" and "boom" in rep.message

    def test_start_clipped_to_bounds(self):
        rep = solve(simplex_qp(np.array([1.0, 0.0])), np.array([-5.0, 7.0]), TIGHT)
        np.testing.assert_allclose(rep.w, [1.0, 0.0], atol=1e-8)

    @pytest.mark.parametrize("kw", [dict(kkt_tol=0), dict(mu_growth=1.0), dict(metric="bfgs"),
                                    dict(max_step=0), dict(max_outer_iters=0),
                                    dict(backtrack=1.5)])
    def test_invalid_options(self, kw):
        with pytest.raises(ConfigError):
            SolverOptions(**kw)

    def test_options_dict(self):
        o = SolverOptions(mu0=10.0)
        assert SolverOptions.from_dict(o.to_dict()) == o
        with pytest.raises(ConfigError):
            SolverOptions.from_dict({"tolerance": 1})


def violation_rises(rep, opts=SolverOptions(), factor=1.1):
    """Outer iterations after the first penalty increase whose violation grew by more than ``factor``.

    Increases that stay below the rounding floor ``1e-3 * constraint_tol`` are ignored.
    """
    mu, v = rep.penalty_history, rep.violation_history
    floor = 1e-3 * opts.constraint_tol
    first = next((k for k in range(1, len(mu)) if mu[k] > mu[k - 1]), len(mu))
    return [k for k in range(first + 1, len(v)) if v[k] > max(factor * v[k - 1], floor)]


class TestProperties:
    def test_deterministic(self):
        rng = np.random.default_rng(9)
        A, b = rng.normal(size=(3, 10)), rng.normal(size=3)
        a, b2 = (solve(least_norm(A, b), np.zeros(10), TIGHT) for _ in range(2))
        np.testing.assert_array_equal(a.w, b2.w)
        assert a.violation_history == b2.violation_history and a.log == b2.log

    def test_penalty_history(self):
        rep = solve(simplex_qp(np.array([3.0, -1.0, 0.5])), np.zeros(3), TIGHT)
        assert len(rep.penalty_history) == rep.iterations
        assert rep.penalty_history[0] == SolverOptions().mu0
        assert all(b >= a for a, b in zip(rep.penalty_history, rep.penalty_history[1:]))

    @pytest.mark.parametrize("seed", range(3))
    def test_violation_after_penalty_increase(self, seed):
        c = np.random.default_rng(seed).normal(size=6)
        opts = SolverOptions(mu0=1e-2, kkt_tol=1e-10, constraint_tol=1e-10)
        rep = solve(simplex_qp(c), np.zeros(6), opts)
        assert rep.converged and max(rep.penalty_history) > 1e-2
        assert violation_rises(rep, opts) == []


@pytest.fixture(scope="module")
def toy_ocp(params):
    spec = GuessSpec(n_lemniscates=1, points_per_lemniscate=16, **SMALL_SPEC)
    g = generate_guess(spec, StagePlan(N=2, n_i=[8, 8]), params)
    nlp = build_nlp(g.plan, params)
    return g, nlp, solve(nlp, g.w)


def test_toy_kite_ocp(toy_ocp):
    g, nlp, rep = toy_ocp
    assert rep.status == "converged"
    assert rep.violation <= 1e-6 and rep.kkt <= 1e-6
    assert rep.objective < nlp.objective(g.w)
    assert mean_power(nlp.solution_trajectory(rep.w)) > mean_power(g.trajectory)


@pytest.mark.xfail(strict=True, reason="the violation of the kite OCP rises 1.3x in one outer "
                   "iteration after the first penalty increase")
def test_toy_kite_ocp_violation_history(toy_ocp):
    assert violation_rises(toy_ocp[2]) == []


def test_toy_kite_ocp_deterministic(toy_ocp):
    g, nlp, rep = toy_ocp
    opts = SolverOptions(max_outer_iters=2)
    a, b = solve(nlp, g.w, opts), solve(nlp, g.w, opts)
    np.testing.assert_array_equal(a.w, b.w)
    assert a.log == b.log

import math

import numpy as np
import pytest

from conftest import SMALL_SPEC
from quatkite import kite_dynamics as dyn
from quatkite.guess import GuessInfeasible, GuessSpec, generate_guess, lissajous, plan_for
from quatkite.integrator import mean_power
from quatkite.ocp_model import StagePlan, topo_indicator
from quatkite.params import ConfigError
from quatkite.transcription import ShootingNlp

DESK = GuessSpec(n_lemniscates=2, points_per_lemniscate=24)


@pytest.fixture(scope="module")
def desk_guess(params):
    return generate_guess(DESK, plan_for(DESK), params)


@pytest.mark.parametrize("n,climb", [(1, False), (2, False), (2, True)])
def test_small_pattern_closes(params, n, climb):
    spec = GuessSpec(n_lemniscates=n, reel_out=2.5, l_band=50.0, points_per_lemniscate=12,
                     **SMALL_SPEC)
    g = generate_guess(spec, plan_for(spec, climb=climb), params)
    assert not [v for v in g.violations if "topological" in v]
    assert g.feasible
    l = g.trajectory.l
    # the cycle starts on the return arc at the longest tether
    assert l[0] == l[-1] == spec.l_start + spec.l_band
    assert np.min(l) == pytest.approx(spec.l_start, abs=1e-6)
    assert 0 < g.reel_out <= spec.reel_out
    assert len(g.T) == g.plan.N == (2 * n + 2 if climb else 2 * n)


def test_lissajous_mirror_symmetry():
    spec = GuessSpec(n_lemniscates=1, center=(0.1, 0.8), half_widths=(0.5, 0.2))
    s = np.linspace(0, 2 * math.pi, 1001)
    phi, theta, _, _ = lissajous(spec, s)
    phi_m, theta_m, _, _ = lissajous(spec, s + math.pi)
    assert np.max(np.abs((phi - 0.1) + (phi_m - 0.1))) <= 1e-9
    assert np.max(np.abs(theta - theta_m)) <= 1e-9


def test_lissajous_derivatives():
    spec = GuessSpec()
    s, h = 0.7, 1e-6
    a, b = lissajous(spec, s + h), lissajous(spec, s - h)
    _, _, dphi, dtheta = lissajous(spec, s)
    assert dphi == pytest.approx((a[0] - b[0]) / (2 * h), rel=1e-8)
    assert dtheta == pytest.approx((a[1] - b[1]) / (2 * h), rel=1e-8)


class TestDeskGuess:
    def test_shape_and_feasibility(self, desk_guess, params):
        g = desk_guess
        assert g.plan.N == 4 and g.plan.n_intervals == 60
        assert g.feasible, g.violations
        assert g.plan.T_init == tuple(g.T)
        assert np.all(g.T >= g.plan.T_bounds[0][0]) and np.all(g.T <= g.plan.T_bounds[0][1])
        assert g.trajectory.duration == pytest.approx(g.T.sum())

    def test_topology_signs(self, desk_guess):
        nlp = ShootingNlp(desk_guess.plan)
        S, _, _ = nlp.unpack(desk_guess.w)
        sign = np.asarray(desk_guess.plan.sign_pattern)[desk_guess.plan.interval_stage]
        assert np.all(sign * topo_indicator(S[:, 3:]) >= -1e-12)

    def test_controls_within_bounds(self, desk_guess, params):
        nlp = ShootingNlp(desk_guess.plan, params)
        w = desk_guess.w
        assert np.all(w >= nlp.lb) and np.all(w <= nlp.ub)

    def test_positive_power(self, desk_guess):
        assert mean_power(desk_guess.trajectory) > 0

    def test_continuity_residuals_finite(self, desk_guess, params):
        nlp = ShootingNlp(desk_guess.plan, params)
        c = nlp.constraints(desk_guess.w)
        cont = c[:7 * (nlp.M - 1)].reshape(-1, 7)
        assert np.all(np.isfinite(c))
        assert 0 < np.max(np.abs(cont)) < 1.0
        # energy nodes are rebuilt from the shot increments
        W_nodes = nlp.unpack(desk_guess.w)[0][:, dyn.IW]
        assert np.max(np.abs(cont[:, dyn.IW])) <= 1e-6 * np.max(np.abs(W_nodes))

    def test_periodic_closure(self, desk_guess):
        tr = desk_guess.trajectory
        np.testing.assert_array_equal(tr.states[-1, 1:], tr.states[0, 1:])
        assert tr.states[0, dyn.IW] == 0.0

    def test_deterministic(self, desk_guess, params):
        again = generate_guess(DESK, plan_for(DESK), params)
        np.testing.assert_array_equal(again.w, desk_guess.w)


class TestErrors:
    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            GuessSpec(n_lemniscates=0)
        with pytest.raises(ConfigError):
            GuessSpec(reel_in=1.0)
        with pytest.raises(ConfigError):
            GuessSpec(center=(0.0, 0.2), half_widths=(0.5, 0.3))
        with pytest.raises(ConfigError):
            GuessSpec.from_dict({"lobes": 3})
        spec = GuessSpec(center=[0.0, 0.8])
        assert GuessSpec.from_dict(spec.to_dict()) == spec

    def test_plan_mismatch(self, params):
        with pytest.raises(ConfigError):
            generate_guess(DESK, StagePlan(N=8, n_i=4), params)
        with pytest.raises(ConfigError):
            generate_guess(DESK, StagePlan(N=4, n_i=4, sign_pattern=[1, -1, 1, -1]), params)

    def test_tether_limit(self, params):
        with pytest.raises(ConfigError):
            generate_guess(GuessSpec(l_start=280.0), plan_for(GuessSpec()), params)

    def test_unreachable_band(self, params):
        spec = GuessSpec(n_lemniscates=1, reel_out=0.1, points_per_lemniscate=4)
        with pytest.raises(GuessInfeasible):
            generate_guess(spec, plan_for(spec), params)


def test_plan_for():
    plan = plan_for(GuessSpec(n_lemniscates=3, points_per_lemniscate=20), K=2, climb=True)
    assert plan.N == 8 and plan.K == 2
    assert list(plan.n_i) == [20, 10, 10, 10, 10, 10, 2, 2]

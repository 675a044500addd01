import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_alloc import alloc_resolution as ar
from isac_alloc import sim
from isac_alloc.alloc_common import (MONOTONE_SLACK, RhoSchedule, ScaledProblem, armijo, check_monotone,
                                     monotone_segments, winner_take_all, write_trace_csv)
from isac_alloc.errors import InfeasibleError, InvalidConfigError, MonotonicityError
from isac_alloc.grid import OfdmConfig, ResourceState, baseline_allocation, validate
from isac_alloc.metrics import SidelobeRegion, resolution


CFG = OfdmConfig(8, 4)
REGION = SidelobeRegion(2, 1)


@pytest.fixture(scope="module")
def channels():
    return sim.gen_channels(CFG, 1, 2, seed=0, path_loss_db=130).H


@pytest.fixture(scope="module")
def spec():
    return ar.ResolutionSpec(region=REGION, eta0=2.0)


@pytest.fixture(scope="module")
def problem(spec, channels):
    return ar.make_problem(CFG, spec, channels)


@pytest.fixture(scope="module")
def result(spec, channels):
    return ar.run(CFG, spec, channels)


def relaxed_point(problem, seed):
    r = np.random.default_rng(seed)
    u = r.uniform(0.05, 0.5, size=(problem.K + 1, problem.n))
    x = r.uniform(0.5, 1.5, size=problem.n)
    return u, x


class TestObjective:
    def test_matches_metric_widths(self, problem):
        u, x = relaxed_point(problem, 0)
        st_ = problem.to_state(u, x)
        rep = resolution(st_, CFG)
        eps = problem.spec.eps_tau
        expected = eps * rep.delay_resolution / CFG.tau0 + (1 - eps) * rep.doppler_resolution / CFG.f0
        assert ar.true_objective(problem, u, x, 0.0) == pytest.approx(expected, rel=1e-10)

    def test_penalty_term(self, problem):
        u, x = relaxed_point(problem, 1)
        diff = ar.true_objective(problem, u, x, 2.0) - ar.true_objective(problem, u, x, 0.0)
        assert diff == pytest.approx(2.0 * np.sum(u * (1 - u)))

    def test_dinkelbach_update(self, problem):
        u, x = relaxed_point(problem, 2)
        st_ = problem.to_state(u, x)
        t_tau, t_v = ar.dinkelbach_update(st_)
        rep = resolution(st_, CFG)
        assert t_tau * CFG.tau0 == pytest.approx(rep.delta_tau)
        assert t_v * CFG.f0 == pytest.approx(rep.delta_fd)

    def test_empty_sensing_is_infinite(self, problem):
        u, x = relaxed_point(problem, 3)
        u[0] = 0
        assert ar.true_objective(problem, u, x, 0.0) == np.inf


class TestDCSplit:
    @pytest.mark.parametrize("seed", range(4))
    def test_parts_are_convex_and_concave(self, problem, seed):
        u, x = relaxed_point(problem, seed)
        t, w_tau, w_v, _ = ar._weights(problem, u[0] * x)
        Qc, Qv, _, _ = problem.resolution_dc(x, t.t_tau, t.t_v, w_tau, w_v)
        assert np.linalg.eigvalsh(Qc).min() >= -1e-9 * np.abs(Qc).max()
        assert np.linalg.eigvalsh(Qv).max() <= 1e-9 * np.abs(Qv).max()

    def test_dinkelbach_function_vanishes_at_expansion(self, problem):
        # With the ratios frozen at z0 the weighted numerator-minus-ratio form is zero there.
        u, x = relaxed_point(problem, 5)
        t, w_tau, w_v, _ = ar._weights(problem, u[0] * x)
        Qc, Qv, _, _ = problem.resolution_dc(x, t.t_tau, t.t_v, w_tau, w_v)
        val = u[0] @ (Qc + Qv) @ u[0]
        scale = u[0] @ Qc @ u[0]
        assert abs(val) <= 1e-10 * scale


class TestSurrogates:
    @pytest.mark.parametrize("which", ["u", "p"])
    def test_tight_and_majorizing(self, problem, which):
        u, x = relaxed_point(problem, 7)
        rho = 0.01
        sub = (ar.build_u_subproblem if which == "u" else ar.build_p_subproblem)(problem, u, x, rho)
        f_true = ar.true_objective(problem, u, x, rho)
        assert sub.surrogate(sub.z0) == pytest.approx(sub.f0, abs=1e-9 * max(1, abs(sub.f0)))
        assert sub.f0 == pytest.approx(f_true, rel=1e-10)
        r = np.random.default_rng(0)
        for _ in range(100):
            z = r.uniform(0, 1, sub.z0.size) if which == "u" else r.uniform(0, 2, sub.z0.size)
            assert sub.surrogate(z) >= sub.dc(z) - 1e-9 * max(1.0, abs(sub.dc(z)))

    def test_program_objective_is_surrogate(self, problem):
        u, x = relaxed_point(problem, 8)
        sub = ar.build_u_subproblem(problem, u, x, 0.05)
        z = np.random.default_rng(1).uniform(0, 1, sub.z0.size)
        assert sub.program.objective(z) == pytest.approx(sub.surrogate(z), rel=1e-10)

    def test_u_step_respects_constraints(self, problem):
        u, x = problem.initial_point()
        sub = ar.build_u_subproblem(problem, u, x, 0.01)
        sol = ar.solve_or_raise(sub.program, sub.z0, problem.spec, "selection")
        viol = sub.program.violations(sol.x)
        assert max(viol.values()) <= 1e-7


class TestHelpers:
    def test_winner_take_all(self):
        u = np.array([[0.6, 0.5, 0.2, 0.5],
                      [0.3, 0.5, 0.4, 0.5]])
        out = winner_take_all(u)
        assert out.tolist() == [[1, 1, 0, 1], [0, 0, 0, 0]]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), K=st.integers(0, 3))
    def test_winner_take_all_exclusive(self, seed, K):
        u = np.random.default_rng(seed).uniform(0, 1, size=(K + 1, 12))
        out = winner_take_all(u)
        assert np.all(out.sum(axis=0) <= 1)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_armijo_rejects_ascent(self):
        z, f, a = armijo(lambda z: float(z @ z), np.zeros(2), np.ones(2), 0.0, -1.0)
        assert a == 0.0 and f == 0.0

    def test_armijo_accepts_descent(self):
        z, f, a = armijo(lambda z: float((z - 1) @ (z - 1)), np.zeros(2), np.ones(2), 2.0, -2.0)
        assert a == 1.0 and f == 0.0

    def test_check_monotone(self):
        check_monotone(1.0, 1.0 + 0.5 * MONOTONE_SLACK, "x")
        with pytest.raises(MonotonicityError):
            check_monotone(1.0, 1.0 + 2 * MONOTONE_SLACK, "x")

    def test_rho_schedule(self):
        s = RhoSchedule(1.0)
        u = np.full((2, 10), 0.5)
        assert not s.advance(3, u)
        assert s.advance(5, u) and s.rho == 2.0
        assert not s.advance(10, np.zeros((2, 10)))
        fixed = RhoSchedule(1.0, fixed=True)
        assert not fixed.advance(5, u)

    def test_monotone_segments(self):
        assert monotone_segments([3, 2, 5, 4], [1, 1, 2, 2]) == [[3, 2], [5, 4]]

    def test_spec_validation(self, channels):
        with pytest.raises(InvalidConfigError):
            ar.make_problem(CFG, ar.ResolutionSpec(eps_tau=1.5, region=REGION), channels)
        with pytest.raises(InvalidConfigError):
            ar.make_problem(CFG, ar.ResolutionSpec(beta0=0.0, region=REGION), channels)
        with pytest.raises(InvalidConfigError):
            ar.make_problem(CFG, ar.ResolutionSpec(region=REGION), np.ones((1, 4, 4)))


class TestRounding:
    def test_repair_promotes_sensing(self, channels):
        # Relaxed selections just under 1/2 round to nothing; the sensing set
        # then has to be rebuilt until the resolution ratios are defined.
        problem = ar.make_problem(CFG, ar.ResolutionSpec(region=REGION, eta0=0.5, beta0=1.0), channels)
        u = np.full((problem.K + 1, problem.n), 0.3)
        x = np.ones(problem.n)
        state, xb, repaired = ar.round_boolean(problem, u, x, 0.0)
        assert repaired >= 2
        assert state.selections[0].sum() >= 2
        assert validate(state, budget=problem.spec.total_power * (1 + 1e-9)).ok

    def test_repair_transfers_when_grid_is_full(self, channels):
        # Everything rounds to sensing, so the rate floor can only be met by
        # handing sensing REs over to the user.
        problem = ar.make_problem(CFG, ar.ResolutionSpec(region=REGION, eta0=2.0, beta0=1.0), channels)
        u = np.full((problem.K + 1, problem.n), 0.05)
        u[0] = 0.9
        state, xb, repaired = ar.round_boolean(problem, u, np.ones(problem.n), 0.0)
        assert repaired >= 1
        assert state.selections[1].sum() >= 1
        assert np.all(state.selections.sum(axis=0) <= 1)
        assert problem.rate(state.u, xb) >= problem.spec.eta0 * (1 - 1e-6)

    def test_repair_limit(self, problem):
        u = np.full((problem.K + 1, problem.n), 0.3)
        with pytest.raises(InfeasibleError):
            ar.round_boolean(problem, u, np.ones(problem.n), 0.0, max_repairs=0)


class TestRun:
    def test_converges(self, result, spec):
        assert result.converged
        assert result.iterations <= spec.max_iter

    def test_monotone_trace(self, result):
        for seg in monotone_segments(result.trace.objective, result.trace.rho):
            for a, b in zip(seg, seg[1:]):
                assert b <= a + MONOTONE_SLACK * max(1.0, abs(a))

    def test_boolean_and_feasible(self, result, spec):
        st_ = result.state
        assert st_.is_boolean()
        assert validate(st_, budget=spec.total_power * 1.01).ok
        assert result.feasible, result.violations
        assert result.metrics["psl_ratio"] <= spec.beta0 * 1.01
        assert result.metrics["sum_rate"] >= spec.eta0 * 0.99

    def test_beats_block_baselines(self, result):
        rof = result.metrics["sensing_rof"]
        tdm = resolution(baseline_allocation(CFG, "TDM", rof, 1), CFG)
        fdm = resolution(baseline_allocation(CFG, "FDM", rof, 1), CFG)
        assert result.metrics["delay_resolution"] <= tdm.delay_resolution * (1 + 1e-9)
        assert result.metrics["doppler_resolution"] <= fdm.doppler_resolution * (1 + 1e-9)

    def test_deterministic(self, result, spec, channels):
        again = ar.run(CFG, spec, channels)
        assert np.array_equal(again.state.selections, result.state.selections)
        assert again.trace.objective == result.trace.objective

    def test_trace_csv(self, result, tmp_path):
        path = tmp_path / "trace.csv"
        write_trace_csv(result.trace, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("iteration,objective,rho")
        assert len(lines) == result.iterations + 1

    def test_fixed_rho(self, spec, channels):
        import dataclasses
        s = dataclasses.replace(spec, rho=1e-3, max_iter=3)
        r = ar.run(CFG, s, channels)
        assert set(r.trace.rho) == {1e-3}

    def test_warm_start_from_state(self, result, spec, channels):
        import dataclasses
        r = ar.run(CFG, dataclasses.replace(spec, max_iter=2), channels, init=result.relaxed)
        assert r.iterations <= 2

    def test_wrong_init_entities(self, spec, channels):
        with pytest.raises(InvalidConfigError):
            ar.run(CFG, spec, channels, init=ResourceState.empty(8, 4, 3))

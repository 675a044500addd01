import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_alloc import alloc_sidelobe as al
from isac_alloc import sim
from isac_alloc.alloc_common import MONOTONE_SLACK, monotone_segments
from isac_alloc.errors import InvalidConfigError
from isac_alloc.grid import OfdmConfig, baseline_allocation, validate
from isac_alloc.metrics import SidelobeRegion, mainlobe, psl, resolution

CFG = OfdmConfig(8, 4)
REGION = SidelobeRegion(2, 1)


@pytest.fixture(scope="module")
def channels():
    return sim.gen_channels(CFG, 1, 2, seed=0, path_loss_db=130).H


@pytest.fixture(scope="module")
def spec():
    return al.SidelobeSpec(region=REGION, eta0=2.0)


@pytest.fixture(scope="module")
def problem(spec, channels):
    return al.make_problem(CFG, spec, channels)


@pytest.fixture(scope="module")
def result(spec, channels):
    return al.run(CFG, spec, channels)


def relaxed_point(problem, seed):
    r = np.random.default_rng(seed)
    u = r.uniform(0.05, 0.5, size=(problem.K + 1, problem.n))
    x = r.uniform(0.5, 1.5, size=problem.n)
    return u, x


def test_resolution_constants():
    spec = al.SidelobeSpec(tau_factor=1.5, f_factor=2.0)
    tb_tau, tb_v = al.resolution_constants(spec, CFG)
    assert tb_tau == pytest.approx(4 * np.pi * (1.5 / 8 - 1 / 8))
    assert tb_v == pytest.approx(4 * np.pi * (2.0 / 4 - 1 / 4))


def test_explicit_thresholds_override_factors():
    spec = al.SidelobeSpec(tau_th=1e-6, f_th=3e4)
    assert spec.resolved(CFG) == (1e-6, 3e4)


def test_warns_below_full_grid(channels):
    with pytest.warns(RuntimeWarning, match="resolution threshold"):
        al.make_problem(CFG, al.SidelobeSpec(region=REGION, tau_factor=0.9), channels)


def test_empty_region_rejected(channels):
    with pytest.raises(InvalidConfigError):
        al.make_problem(CFG, al.SidelobeSpec(region=SidelobeRegion(0, 0)), channels)


def test_objective_is_normalized_psl(problem):
    u, x = relaxed_point(problem, 0)
    st_ = problem.to_state(u, x)
    assert al.true_objective(problem, u, x, 0.0) == pytest.approx(psl(st_, REGION) / mainlobe(st_), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_gap_sign_matches_resolution(seed):
    spec = al.SidelobeSpec(region=REGION, tau_factor=1.1, f_factor=1.1)
    pb = al.make_problem(CFG, spec)
    r = np.random.default_rng(seed)
    w = r.uniform(0, 1, pb.n) * (r.uniform(size=pb.n) < 0.7)
    if np.count_nonzero(w.reshape(4, 8).sum(axis=0)) < 2 or np.count_nonzero(w.reshape(4, 8).sum(axis=1)) < 2:
        return
    rep = resolution(pb.to_state(np.vstack([w]), np.ones(pb.n)), CFG)
    g_tau, g_v = al.resolution_gaps(pb, w)
    tau, f = spec.resolved(CFG)
    if abs(rep.delay_resolution - tau) > 1e-9 * tau:
        assert (g_tau <= 0) == (rep.delay_resolution <= tau)
    if abs(rep.doppler_resolution - f) > 1e-9 * f:
        assert (g_v <= 0) == (rep.doppler_resolution <= f)


class TestSurrogates:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("which", ["u", "p"])
    def test_tight_and_majorizing(self, problem, which, seed):
        u, x = relaxed_point(problem, seed)
        rho = 0.01
        build = al.build_u_subproblem if which == "u" else al.build_p_subproblem
        sub = build(problem, u, x, rho)
        zb0 = sub.z0[:sub.n_block]
        assert sub.f0 == pytest.approx(al.true_objective(problem, u, x, rho), rel=1e-12)
        assert abs(sub.majorizer(zb0) - sub.f0) <= 1e-9
        assert abs(sub.surrogate(sub.z0) - sub.f0) <= 1e-9
        r = np.random.default_rng(100 + seed)
        hi = 1.0 if which == "u" else 2.0
        for _ in range(100):
            z = r.uniform(0, hi, sub.n_block)
            assert sub.majorizer(z) >= sub.dc(z) - 1e-9

    @pytest.mark.parametrize("which", ["u", "p"])
    def test_convexified_constraints_are_inner(self, problem, which):
        u, x = relaxed_point(problem, 4)
        build = al.build_u_subproblem if which == "u" else al.build_p_subproblem
        sub = build(problem, u, x, 0.0)
        n = problem.n
        z_i = u[0] if which == "u" else x
        r = np.random.default_rng(9)
        for name, (exact, cvx) in sub.constraints.items():
            assert cvx(z_i) == pytest.approx(exact(z_i), abs=1e-12)
            for _ in range(100):
                z = r.uniform(0, 2, n)
                assert cvx(z) >= exact(z) - 1e-12

    def test_exact_constraint_is_scaled_gap(self, problem):
        u, x = relaxed_point(problem, 5)
        sub = al.build_u_subproblem(problem, u, x, 0.0)
        D = float(u[0] @ x)
        g_tau, g_v = al.resolution_gaps(problem, u[0] * x)
        assert sub.constraints["delay_resolution"][0](u[0]) == pytest.approx(g_tau / D ** 2, rel=1e-9)
        assert sub.constraints["doppler_resolution"][0](u[0]) == pytest.approx(g_v / D ** 2, rel=1e-9)

    def test_epigraph_start(self, problem):
        u, x = relaxed_point(problem, 6)
        sub = al.build_p_subproblem(problem, u, x, 0.0)
        viol = sub.program.violations(sub.z0)
        assert viol["psl_epigraph"] <= 1e-12


class TestRun:
    def test_converges(self, result, spec):
        assert result.converged and result.iterations <= spec.max_iter

    def test_monotone(self, result):
        for seg in monotone_segments(result.trace.objective, result.trace.rho):
            for a, b in zip(seg, seg[1:]):
                assert b <= a + MONOTONE_SLACK * max(1.0, abs(a))

    def test_feasible(self, result, spec):
        assert result.state.is_boolean()
        assert validate(result.state, budget=spec.total_power * 1.01).ok
        assert result.feasible, result.violations
        tau, f = spec.resolved(CFG)
        assert result.metrics["delay_resolution"] <= tau * 1.01
        assert result.metrics["doppler_resolution"] <= f * 1.01

    def test_resolution_gaps_in_trace(self, result):
        # Accepted iterates satisfy the original resolution constraints.
        assert max(result.trace.t_tau) <= 1e-7 * max(1.0, max(abs(v) for v in result.trace.t_tau))
        assert max(result.trace.t_v) <= 1e-7 * max(1.0, max(abs(v) for v in result.trace.t_v))

    def test_below_random(self, result):
        rof = result.metrics["sensing_rof"]
        ratios = []
        for seed in range(5):
            b = baseline_allocation(CFG, "Random", rof, 1, seed=seed)
            ratios.append(psl(b, REGION) / mainlobe(b))
        assert result.metrics["psl_ratio"] < min(ratios)

    def test_fixed_rho_short_run(self, spec, channels):
        r = al.run(CFG, dataclasses.replace(spec, rho=1e-4, max_iter=2), channels)
        assert set(r.trace.rho) == {1e-4}
        assert r.iterations == 2 or r.converged

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isac_alloc.convex import (INFEASIBLE, OPTIMAL, ConvexProgram, epigraph_minimax, quadratic_constraint,
                               solve)
from isac_alloc.errors import InvalidConfigError
from isac_alloc.metrics import SidelobeRegion, sidelobe_terms

from oracles import alm_solve, random_program


def test_box_projection():
    c = np.array([-0.5, 0.3, 1.7, 0.999])
    prog = ConvexProgram(4, 2 * np.eye(4), -2 * c, lb=0.0, ub=1.0)
    sol = solve(prog)
    assert sol.ok
    assert np.allclose(sol.x, np.clip(c, 0, 1), atol=1e-7)


def test_lp_simplex_edge():
    prog = ConvexProgram(2, q=np.ones(2), lb=0.0)
    prog.add_linear([[-1.0, -1.0]], [-1.0])
    sol = solve(prog)
    assert sol.ok
    assert sol.objective == pytest.approx(1.0, abs=1e-7)


def test_equality_constraint():
    prog = ConvexProgram(3, np.eye(3), np.zeros(3))
    prog.add_equality([[1.0, 1.0, 1.0]], [3.0])
    sol = solve(prog)
    assert np.allclose(sol.x, 1.0, atol=1e-7)


def test_equality_with_inequalities():
    prog = ConvexProgram(3, np.eye(3), np.array([1.0, 0.0, -1.0]), lb=-0.5)
    prog.add_equality([[1.0, 1.0, 1.0]], [3.0])
    sol = solve(prog, x0=np.ones(3))
    assert sol.ok
    assert np.allclose(sol.x, [0.0, 1.0, 2.0], atol=1e-7)


def test_quadratic_constraint_ball():
    prog = ConvexProgram(2, q=np.array([-1.0, 0.0]))
    prog.add_quadratic(np.eye(2), np.zeros(2), -4.0)
    sol = solve(prog)
    assert np.allclose(sol.x, [2.0, 0.0], atol=1e-6)


def test_log_constraint_is_exact():
    # minimize x s.t. log(1 + x) >= log 3  ->  x = 2
    prog = ConvexProgram(1, q=np.array([1.0]), lb=0.0)
    from isac_alloc.convex import ConcaveConstraint
    prog.add_concave(ConcaveConstraint(lambda x: float(np.log1p(x[0])), lambda x: np.array([1 / (1 + x[0])]),
                                       lambda x: np.array([-1 / (1 + x[0]) ** 2]), eta=np.log(3.0)))
    sol = solve(prog, x0=np.array([5.0]))
    assert sol.x[0] == pytest.approx(2.0, abs=1e-7)


def test_infeasible_certificate():
    prog = ConvexProgram(2, lb=0.0, ub=1.0)
    prog.add_linear([[1.0, 1.0]], [-1.0], "impossible")
    sol = solve(prog)
    assert sol.status == INFEASIBLE
    assert sol.certificate["violation"] > 0


@pytest.mark.parametrize("rhs", [-1.0, -5.0, -50.0])
def test_certificate_names_general_constraint(rhs):
    # The slack is shared by the box rows, so the certificate has to look past
    # them to the constraint that actually blocks feasibility.
    prog = ConvexProgram(3, lb=0.0, ub=1.0)
    prog.add_linear([[1.0, 1.0, 0.0]], [rhs], "impossible")
    sol = solve(prog)
    assert sol.status == INFEASIBLE
    assert sol.certificate["constraint"] == "impossible"
    assert set(sol.certificate["violations"]) >= {"impossible", "lower_bound", "upper_bound"}


def test_rejects_indefinite_objective():
    with pytest.raises(InvalidConfigError):
        ConvexProgram(2, np.diag([1.0, -1.0]))


def test_rejects_bad_shapes():
    prog = ConvexProgram(2)
    with pytest.raises(InvalidConfigError):
        prog.add_linear(np.ones((1, 3)), [1.0])
    with pytest.raises(InvalidConfigError):
        prog.add_soc(np.ones((2, 2)), np.ones(3), np.zeros(2))


def test_deterministic():
    a = solve(random_program(3))
    b = solve(random_program(3))
    assert np.array_equal(a.x, b.x)


def test_weak_duality_along_path():
    sol = solve(random_program(11))
    for h in sol.history:
        assert h["dual_bound"] <= sol.objective + 1e-9
    primal = [h["primal"] for h in sol.history]
    assert all(b <= a + 1e-9 * (1 + abs(a)) for a, b in zip(primal, primal[1:]))


def test_json_dump():
    d = json.loads(random_program(5, n=4, n_lin=2, n_soc=1).to_json())
    assert d["n"] == 4 and len(d["b_ub"]) == 2 and len(d["soc"]) == 1
    assert d["concave"][0]["name"] == "log"


@pytest.mark.parametrize("seed", range(8))
def test_matches_oracle(seed):
    prog = random_program(1000 + seed)
    sol = solve(prog)
    assert sol.status == OPTIMAL
    assert max(sol.kkt_residuals.values()) <= 1e-8
    _, f_ref = alm_solve(prog)
    assert sol.objective == pytest.approx(f_ref, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_kkt_property(seed):
    sol = solve(random_program(seed, n=6))
    assert sol.ok
    assert max(sol.kkt_residuals.values()) <= 1e-8


class TestEpigraph:
    def test_constant_term(self):
        frag = epigraph_minimax([(np.zeros(1), 3 + 4j)], 1)
        prog = ConvexProgram(2, lb=[0.0, -np.inf], ub=[1.0, np.inf])
        frag.install(prog)
        sol = solve(prog, x0=np.array([0.5, 10.0]))
        assert sol.x[1] == pytest.approx(5.0, abs=1e-7)

    def test_duplicates_collapse(self):
        c = np.array([1 + 1j, 2 - 1j])
        frag = epigraph_minimax([(c, 0.0), (c.copy(), 0.0), (np.conj(c), 0.0)], 2)
        assert len(frag.socs) == 1

    def test_sidelobe_region_count(self):
        C = sidelobe_terms(16, 8, SidelobeRegion(4, 2))
        frag = epigraph_minimax([(row, 0.0) for row in C], 128)
        assert len(frag.socs) == 22

    def test_minimax_value(self):
        r = np.random.default_rng(0)
        C = r.normal(size=(4, 3)) + 1j * r.normal(size=(4, 3))
        frag = epigraph_minimax([(row, 1.0) for row in C], 3)
        prog = ConvexProgram(4, lb=[-1, -1, -1, -np.inf], ub=[1, 1, 1, np.inf])
        frag.install(prog)
        sol = solve(prog, x0=np.array([0, 0, 0, 10.0]))
        assert sol.x[3] == pytest.approx(np.max(np.abs(C @ sol.x[:3] + 1.0)), abs=1e-7)

    def test_empty(self):
        with pytest.raises(InvalidConfigError):
            epigraph_minimax([], 3)

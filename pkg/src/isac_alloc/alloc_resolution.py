"""Resolution-oriented allocation.

Minimizes the weighted normalized mainlobe widths
``ε_τ Δτ/τ_0 + (1 - ε_τ) Δf_d/f_0`` (plus a Boolean penalty) by alternating
between a selection update with power fixed and a power update with the
selections fixed. Each update solves a convex surrogate built from the
Dinkelbach parametric form of the two width ratios, with the concave pieces
linearized at the current iterate, followed by an Armijo step on the true
objective so that the recorded objective never increases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import convex
from .alloc_common import (AllocationResult, CommonSpec, IterState, RhoSchedule, ScaledProblem, armijo,
                           check_monotone,
                           feasible_point, metrics_for, now, solve_or_raise, winner_take_all)
from .errors import DegenerateInputError, InfeasibleError, InvalidConfigError
from .grid import OfdmConfig, ResourceState
from .metrics import resolution_terms


@dataclass
class ResolutionSpec(CommonSpec):
    """Problem levels for the resolution-oriented allocator.

    ``beta0`` bounds the sidelobe magnitude. In ``relative`` mode (default) it
    is the amplitude ratio to the mainlobe ``|ϑ(0,0)|`` (``-40`` dB gives
    ``0.01``); in ``absolute`` mode it bounds ``|u_0ᵀ(Ψ_ν^H ⊗ Φ_l)p|`` in W.
    """

    eps_tau: float = 0.5
    beta0: float = 0.01
    psl_mode: str = "relative"

    def validate(self):
        super().validate()
        if not 0.0 <= self.eps_tau <= 1.0:
            raise InvalidConfigError("eps_tau must lie in [0, 1]")
        if self.beta0 <= 0:
            raise InvalidConfigError("beta0 must be positive")


def dinkelbach_update(state: ResourceState) -> tuple[float, float]:
    """Current ratio values ``(t_τ, t_v) = (δ_τ/τ_0, δ_fd/f_0)``."""
    N, M = state.shape
    t = resolution_terms(state.u0, state.p, N, M)
    return t.t_tau, t.t_v


def make_problem(cfg: OfdmConfig, spec: ResolutionSpec, channels=None) -> ScaledProblem:
    spec.validate()
    return ScaledProblem(cfg, spec, channels, beta=spec.beta0, psl_mode=spec.psl_mode)


def true_objective(problem: ScaledProblem, u, x, rho) -> float:
    """``ε(2 + 2t_τ) + (1-ε)(2 + 2t_v) + ρ Σ_k u_kᵀ(1 - u_k)``."""
    eps = problem.spec.eps_tau
    try:
        t = resolution_terms(u[0], x, problem.N, problem.M)
    except DegenerateInputError:
        return np.inf
    if t.bq <= 0 or t.dq >= 0:
        return np.inf
    return eps * (2 + 2 * t.t_tau) + (1 - eps) * (2 + 2 * t.t_v) + rho * ScaledProblem.penalty(u)


@dataclass
class Subproblem:
    """A convex surrogate subproblem together with the functions it bounds.

    ``dc(z)`` is the weighted Dinkelbach function (ratios fixed at the
    expansion point) plus the exact penalty; ``surrogate(z)`` is the convex
    majorizer whose minimizer ``program`` computes. Both equal ``f0`` at the
    expansion point ``z0``.
    """

    program: convex.ConvexProgram
    z0: np.ndarray
    f0: float
    surrogate: object
    dc: object
    t_tau: float
    t_v: float
    r: int
    j: int


def _weights(problem, w):
    eps = problem.spec.eps_tau
    t = resolution_terms(w, np.ones_like(w), problem.N, problem.M)
    c_tau, c_v = 4 * np.pi / problem.N, 4 * np.pi / problem.M
    w_tau = 2 * eps / (c_tau * t.bq)
    w_v = 2 * (1 - eps) / (c_v * abs(t.dq))
    base = eps * (2 + 2 * t.t_tau) + (1 - eps) * (2 + 2 * t.t_v)
    return t, w_tau, w_v, base


def build_u_subproblem(problem: ScaledProblem, u, x, rho) -> Subproblem:
    """Selection update with power fixed; variables ``z = [u_0; ...; u_K]``."""
    n, K = problem.n, problem.K
    nz = n * (K + 1)
    z0 = u.ravel().copy()
    t, w_tau, w_v, base = _weights(problem, u[0] * x)
    Qc, Qv, r, j = problem.resolution_dc(x, t.t_tau, t.t_v, w_tau, w_v)
    u0 = u[0]
    lin = 2 * Qv @ u0
    c0 = -float(u0 @ Qv @ u0)
    P = np.zeros((nz, nz))
    P[:n, :n] = 2 * Qc
    q = np.zeros(nz)
    q[:n] = lin
    q += rho * (1 - 2 * z0)
    prog = convex.ConvexProgram(nz, P=P, q=q, lb=0.0, ub=1.0, check_psd=False)
    prog.const = base + c0 + rho * float(z0 @ z0)
    problem.add_u_constraints(prog, x, nz)

    def surrogate(z):
        v = z[:n]
        return float(base + v @ Qc @ v + lin @ v + c0 + rho * ((1 - 2 * z0) @ z[:nz] + z0 @ z0))

    def dc(z):
        v = z[:n]
        return float(base + v @ (Qc + Qv) @ v + rho * ScaledProblem.penalty(z[:nz]))

    return Subproblem(prog, z0, dc(z0), surrogate, dc, t.t_tau, t.t_v, r, j)


def build_p_subproblem(problem: ScaledProblem, u, x, rho) -> Subproblem:
    """Power update with selections fixed; variables ``x = p / p_ref``."""
    n = problem.n
    z0 = x.copy()
    t, w_tau, w_v, base = _weights(problem, u[0] * x)
    Qc, Qv, r, j = problem.resolution_dc(u[0], t.t_tau, t.t_v, w_tau, w_v)
    lin = 2 * Qv @ x
    c0 = -float(x @ Qv @ x)
    pen = rho * ScaledProblem.penalty(u)
    prog = convex.ConvexProgram(n, P=2 * Qc, q=lin, lb=0.0, check_psd=False)
    prog.const = base + c0 + pen
    problem.add_p_constraints(prog, u)

    def surrogate(z):
        return float(base + z @ Qc @ z + lin @ z + c0 + pen)

    def dc(z):
        return float(base + z @ (Qc + Qv) @ z + pen)

    return Subproblem(prog, z0, dc(z0), surrogate, dc, t.t_tau, t.t_v, r, j)


def _step(problem, sub: Subproblem, fun, f_cur, spec, what):
    sol = solve_or_raise(sub.program, sub.z0, spec, what)
    z1 = sol.x
    predicted = sub.surrogate(z1) - sub.surrogate(sub.z0)
    return armijo(fun, sub.z0, z1, f_cur, predicted)


def default_rho(problem: ScaledProblem, u, x) -> float:
    f = true_objective(problem, u, x, 0.0)
    return problem.spec.rho_rel * abs(f) / problem.n


def optimize_power(problem, u, x, rho, max_iter=30, delta_th=1e-4, trace=None):
    """Run power-only updates with the selections frozen."""
    f = true_objective(problem, u, x, rho)
    for _ in range(max_iter):
        sub = build_p_subproblem(problem, u, x, rho)
        x_new, f_new, a = _step(problem, sub, lambda z: true_objective(problem, u, z, rho), f, problem.spec, "power")
        check_monotone(f, f_new, "power update")
        done = abs(f_new - f) <= delta_th * max(abs(f), 1e-12)
        x, f = x_new, f_new
        if trace is not None:
            trace.append(f)
        if done or a == 0.0:
            break
    return x, f


def run(cfg: OfdmConfig, spec: ResolutionSpec, channels=None, init=None, observer=None) -> AllocationResult:
    """Alternating selection/power optimization followed by Boolean rounding.

    ``init`` may be a :class:`ResourceState` (relaxed or Boolean) to start
    from; by default ``u_0 = 0.495``, ``u_k = 0.495/K`` with uniform power.
    ``observer(stage, iteration, subproblem, rho)`` is called with every
    surrogate subproblem before it is solved.
    """
    problem = make_problem(cfg, spec, channels)
    if init is None:
        u, x = problem.initial_point()
    else:
        u, x = init.u.copy(), init.p / problem.p_ref
        if u.shape[0] != problem.K + 1:
            raise InvalidConfigError("initial state has the wrong number of entities")
    sched = RhoSchedule(spec.rho if spec.rho is not None else default_rho(problem, u, x),
                        fixed=spec.rho is not None)
    rho = sched.rho
    trace = IterState()
    f = true_objective(problem, u, x, rho)
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        t0 = now()
        sub_u = build_u_subproblem(problem, u, x, rho)
        if observer is not None:
            observer("selection", it, sub_u, rho)
        z, f_u, a_u = _step(problem, sub_u, lambda zz: true_objective(
            problem, zz.reshape(u.shape), x, rho), f, spec, "selection")
        check_monotone(f, f_u, "selection update")
        u = z.reshape(u.shape)
        sub_p = build_p_subproblem(problem, u, x, rho)
        if observer is not None:
            observer("power", it, sub_p, rho)
        x, f_new, a_p = _step(problem, sub_p, lambda zz: true_objective(problem, u, zz, rho), f_u, spec, "power")
        check_monotone(f_u, f_new, "power update")
        rel = abs(f_new - f) / max(abs(f), 1e-12)
        slack = feasible_point(problem, u, x)
        trace.record(objective=f_new, t_tau=sub_p.t_tau, t_v=sub_p.t_v, r=sub_p.r, j=sub_p.j,
                     penalty=ScaledProblem.penalty(u), rho=rho, step_u=a_u, step_p=a_p,
                     slack_snr=slack["snr"], slack_rate=slack.get("rate", float("nan")), seconds=now() - t0)
        f = f_new
        if rel <= spec.delta_th:
            converged = True
            break
        if sched.advance(it, u):
            rho = sched.rho
            f = true_objective(problem, u, x, rho)
    relaxed = problem.to_state(u, x, relaxed=True)
    f_relaxed = true_objective(problem, u, x, 0.0)
    state, x_b, repaired = round_boolean(problem, u, x, rho)
    f_round = true_objective(problem, state.u, x_b, 0.0)
    m = metrics_for(problem, state)
    viol = _recompute_violations(problem, state)
    return AllocationResult(state=state, relaxed=relaxed, metrics=m, iterations=it, converged=converged,
                            relaxation_gap=f_round - f_relaxed, objective_relaxed=f_relaxed,
                            objective_rounded=f_round, trace=trace, repaired=repaired,
                            feasible=not viol, violations=viol)


def _recompute_violations(problem, state, rtol=0.01) -> dict:
    """Relative constraint violations beyond ``rtol`` recomputed from the state."""
    m = metrics_for(problem, state)
    spec = problem.spec
    out = {}
    if spec.gamma0 > 0 and m["sensing_snr"] < spec.gamma0 * (1 - rtol):
        out["snr"] = m["sensing_snr"]
    if problem.use_rate and m["sum_rate"] < spec.eta0 * (1 - rtol):
        out["rate"] = m["sum_rate"]
    if state.power.sum() > spec.total_power * (1 + rtol):
        out["power"] = float(state.power.sum())
    if problem.beta is not None and problem.C is not None:
        lim = problem.beta * m["mainlobe"] if problem.psl_mode == "relative" else problem.beta / state.power.size
        if m["psl"] > lim * (1 + rtol):
            out["psl"] = m["psl"]
    return out


def _repair_order(problem, u_relaxed, assigned, sensing):
    """Candidate REs for a repair step and the entity each one moves to.

    Unassigned REs are used first. Once none is left, a sensing repair takes
    REs from the users and a rate repair takes them from sensing. Sensing
    candidates are ordered by decreasing relaxed sensing weight (ties: weakest
    channel first); rate candidates by decreasing best channel gain (ties:
    smallest relaxed sensing weight) and go to the user with that gain.
    """
    total = assigned.sum(axis=0)
    free = np.flatnonzero(total == 0)
    if sensing:
        if free.size == 0:
            free = np.flatnonzero((assigned[0] == 0) & (total > 0))
        weakest = problem.rate_gain[:, free].max(axis=0) if problem.K else np.zeros(free.size)
        order = free[np.lexsort((weakest, -np.round(u_relaxed[0, free], 6)))]
        return order, np.zeros(order.size, dtype=int)
    if free.size == 0:
        free = np.flatnonzero(assigned[0] == 1)
    gain = problem.rate_gain[:, free]
    order = np.lexsort((np.round(u_relaxed[0, free], 6), -gain.max(axis=0)))
    return free[order], 1 + np.argmax(gain[:, order], axis=0)


def _fill_users(problem, u_relaxed, ub):
    """Give every unassigned RE to a user (largest relaxed share, then channel gain).

    Sensing metrics do not depend on REs outside the sensing set and the
    power re-solve may leave a filled RE unpowered, so filling can only help
    the rate floor.
    """
    if problem.K == 0:
        return ub
    free = np.flatnonzero(ub.sum(axis=0) == 0)
    if free.size:
        share = np.round(u_relaxed[1:, free], 6)
        gain = problem.rate_gain[:, free]
        best = np.lexsort((gain, share), axis=0)[-1]
        ub[1 + best, free] = 1.0
    return ub


SENSING_CONSTRAINTS = ("snr", "psl", "delay_resolution", "doppler_resolution", "sensing_support")


def round_boolean(problem: ScaledProblem, u, x, rho, power_optimizer=None, max_repairs=None):
    """Winner-take-all rounding, power re-solve and greedy repair.

    REs left unassigned by winner-take-all go to a user (see
    :func:`_fill_users`). Returns ``(state, x, n_repaired)``. If the power
    subproblem is infeasible for the rounded selections, REs are moved to
    sensing (sensing constraints) or to users (rate floor) in the order of
    :func:`_repair_order`, in batches that double in size while the same side
    stays short. A batch that would revisit an assignment is replaced by the
    next batch in that order. Repair stops with :class:`InfeasibleError` when
    no candidate is left or more than ``max_repairs`` REs have been moved.
    """
    power_optimizer = power_optimizer or (lambda ub, xb: optimize_power(
        problem, ub, xb, 0.0, max_iter=problem.spec.refine_iter, delta_th=problem.spec.delta_th)[0])
    ub = _fill_users(problem, u, winner_take_all(u))
    repaired = 0
    batch, last = 1, None
    seen = set()
    limit = problem.n if max_repairs is None else max_repairs
    while True:
        try:
            xb = power_optimizer(ub, x.copy())
            break
        except (InfeasibleError, DegenerateInputError) as exc:
            # a sensing set too small to define the resolution ratios counts as a sensing shortfall
            constraint = getattr(exc, "constraint", "sensing_support")
            sensing = constraint in SENSING_CONSTRAINTS or problem.K == 0
            if sensing != last:
                batch, last = 1, sensing
            seen.add(ub.tobytes())
            order, target = _repair_order(problem, u, ub, sensing)
            # slide past candidate batches that lead back to an assignment already tried
            nxt = None
            for start in range(0, order.size, batch):
                cand = ub.copy()
                cand[:, order[start:start + batch]] = 0.0
                cand[target[start:start + batch], order[start:start + batch]] = 1.0
                if cand.tobytes() not in seen:
                    nxt, take = cand, order[start:start + batch]
                    break
            if nxt is None or repaired >= limit:
                raise InfeasibleError(f"rounding repair failed: {exc}", constraint=constraint,
                                      violation=getattr(exc, "violation", None),
                                      payload=problem.to_state(u, x)) from exc
            ub = nxt
            repaired += take.size
            batch *= 2
    return problem.to_state(ub, xb, relaxed=False), xb, repaired

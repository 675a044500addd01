"""Sidelobe-oriented allocation.

Minimizes the peak sidelobe level over the region, normalized by the
mainlobe ``ϑ(0,0)``, subject to delay/Doppler resolution thresholds and the
SNR, rate, power and selection constraints. The normalization matters: the
absolute sidelobe peak scales with the sensing power and would be driven to
zero by switching sensing off.

The resolution thresholds become the quadratic difference-of-convex
constraints ``2|a_τ|² - S² - t̄_τ·u_0ᵀBu_0 <= 0`` and
``2|a_v|² - S² + t̄_v·u_0ᵀDu_0 <= 0``; each outer step replaces the concave
parts by their tangents, which shrinks the feasible set, so every accepted
iterate stays feasible for the original constraints.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import convex
from .alloc_common import (AllocationResult, CommonSpec, IterState, RhoSchedule, ScaledProblem, armijo,
                           check_monotone,
                           feasible_point, metrics_for, now, solve_or_raise)
from .alloc_resolution import _recompute_violations, round_boolean
from .errors import DegenerateInputError, InfeasibleError, InvalidConfigError
from .grid import OfdmConfig
from .metrics import resolution_terms


@dataclass
class SidelobeSpec(CommonSpec):
    """Problem levels for the sidelobe-oriented allocator.

    ``tau_th`` (s) and ``f_th`` (Hz) cap the closed-form delay and Doppler
    resolutions. When left as ``None`` they default to ``tau_factor/(NΔf)``
    and ``f_factor/(M T_sym)``.
    """

    tau_th: float | None = None
    f_th: float | None = None
    tau_factor: float = 1.2
    f_factor: float = 1.2

    def resolved(self, cfg: OfdmConfig) -> tuple[float, float]:
        tau = self.tau_th if self.tau_th is not None else self.tau_factor / cfg.bandwidth
        f = self.f_th if self.f_th is not None else self.f_factor / (cfg.n_symbols * cfg.total_symbol_duration)
        return tau, f


def resolution_constants(spec: SidelobeSpec, cfg: OfdmConfig) -> tuple[float, float]:
    """``t̄_τ = 4π(Δf·τ_th - 1/N)`` and ``t̄_v = 4π(f_th·T_sym - 1/M)``."""
    tau, f = spec.resolved(cfg)
    tb_tau = 4 * np.pi * (cfg.subcarrier_spacing * tau - 1.0 / cfg.n_subcarriers)
    tb_v = 4 * np.pi * (f * cfg.total_symbol_duration - 1.0 / cfg.n_symbols)
    return tb_tau, tb_v


def make_problem(cfg: OfdmConfig, spec: SidelobeSpec, channels=None) -> ScaledProblem:
    spec.validate()
    if spec.region.is_empty:
        raise InvalidConfigError("the sidelobe region must contain at least one bin")
    tau, f = spec.resolved(cfg)
    if tau < 1.0 / cfg.bandwidth or f < 1.0 / (cfg.n_symbols * cfg.total_symbol_duration):
        warnings.warn("resolution threshold below the full-grid resolution; the problem is likely infeasible",
                      RuntimeWarning, stacklevel=2)
    pb = ScaledProblem(cfg, spec, channels, beta=None)
    pb.tbar = resolution_constants(spec, cfg)
    return pb


def true_objective(problem: ScaledProblem, u, x, rho) -> float:
    """Mainlobe-normalized PSL plus ``ρ Σ_k u_kᵀ(1 - u_k)``."""
    w = u[0] * x
    if w.sum() <= 0:
        return np.inf
    return problem.psl_ratio(u[0], x) + rho * ScaledProblem.penalty(u)


def resolution_gaps(problem: ScaledProblem, w) -> tuple[float, float]:
    """Values of the two resolution DC functions at ``w = u_0 ⊙ x`` (<= 0 when met)."""
    t = resolution_terms(w, np.ones_like(w), problem.N, problem.M, check=False)
    tb_tau, tb_v = problem.tbar
    g_tau = t.num_tau - tb_tau * t.bq
    g_v = (2 * abs(t.a_v) ** 2 - t.S ** 2) + tb_v * t.dq
    return g_tau, g_v


@dataclass
class Subproblem:
    """Surrogate subproblem and the functions it bounds.

    ``program`` works on ``[block; s]`` where ``s`` is the epigraph variable
    of the sidelobe peak. On the block alone, ``dc(z)`` is the Dinkelbach
    parametric function ``λ_i + (peak(z) - λ_i·D(z))/D_i`` plus the exact
    penalty, and ``majorizer(z)`` is the same with the penalty linearized;
    both equal ``f0`` at ``z0``. ``constraints`` maps each resolution
    constraint name to ``(exact, convexified)`` callables on the block.
    """

    program: convex.ConvexProgram
    z0: np.ndarray
    f0: float
    surrogate: object
    dc: object
    majorizer: object
    constraints: dict
    n_block: int


def _dc_pair(problem, d, z_i, scale):
    tb_tau, tb_v = problem.tbar
    c_tau, c_v = 4 * np.pi / problem.N, 4 * np.pi / problem.M
    out = {}
    for name, t_tau, t_v, wt, wv in (("delay_resolution", tb_tau / c_tau, 0.0, 1.0, 0.0),
                                     ("doppler_resolution", 0.0, tb_v / c_v, 0.0, 1.0)):
        Qc, Qv, _, _ = problem.resolution_dc(d, t_tau, t_v, wt, wv)
        Qc, Qv = Qc / scale, Qv / scale
        lin = 2 * Qv @ z_i
        c0 = -float(z_i @ Qv @ z_i)
        exact = (lambda z, Qc=Qc, Qv=Qv: float(z @ (Qc + Qv) @ z))
        cvx = (lambda z, Qc=Qc, lin=lin, c0=c0: float(z @ Qc @ z + lin @ z + c0))
        out[name] = (exact, cvx, Qc, lin, c0)
    return out


def _embed_quadratic(prog, Q, a, b, n_blk, name):
    """Add ``vᵀQv + aᵀv + b <= 0`` on the leading ``n_blk`` variables."""
    nz = prog.n
    sl = slice(0, n_blk)
    Q2 = Q + Q.T

    def fun(z):
        v = z[sl]
        return -float(v @ Q @ v + a @ v + b)

    def grad(z):
        g = np.zeros(nz)
        g[sl] = -(Q2 @ z[sl] + a)
        return g

    def hess(z):
        return sl, -Q2

    prog.add_concave(convex.ConcaveConstraint(fun, grad, hess, 0.0, name))


def _epigraph(prog, problem, d, n_blk):
    nz = prog.n
    e = np.zeros(nz)
    e[nz - 1] = 1.0
    for c in problem.C:
        F = np.zeros((2, nz))
        F[0, :n_blk] = (c * d).real
        F[1, :n_blk] = (c * d).imag
        prog.add_soc(F, np.zeros(2), e, 0.0, "psl_epigraph")


def _mainlobe_or_raise(u0, x) -> float:
    D = float(u0 @ x)
    if not D > 0:
        raise DegenerateInputError("the sensing set carries no power; the PSL ratio is undefined")
    return D


def build_u_subproblem(problem: ScaledProblem, u, x, rho) -> Subproblem:
    """Selection update; variables ``[u_0; ...; u_K; s]``."""
    n, K = problem.n, problem.K
    nu = n * (K + 1)
    nz = nu + 1
    z_u = u.ravel().copy()
    u0 = u[0]
    D_i = _mainlobe_or_raise(u0, x)
    lam = problem.psl_ratio(u0, x)
    q = np.zeros(nz)
    q[nz - 1] = 1.0 / D_i
    q[:n] = -lam * x / D_i
    q[:nu] += rho * (1 - 2 * z_u)
    prog = convex.ConvexProgram(nz, q=q, lb=np.r_[np.zeros(nu), 0.0], ub=np.r_[np.ones(nu), np.inf],
                                check_psd=False)
    prog.const = lam + rho * float(z_u @ z_u)
    _epigraph(prog, problem, x, n)
    pairs = _dc_pair(problem, x, u0, D_i ** 2)
    for name, (_, _, Qc, lin, c0) in pairs.items():
        _embed_quadratic(prog, Qc, lin, c0, n, name)
    problem.add_u_constraints(prog, x, nu, psl=False)
    z0 = np.r_[z_u, float(np.max(np.abs(problem.C @ (u0 * x))))]

    def surrogate(z):
        return float(q @ z + prog.const)

    def peak(zb):
        return float(np.max(np.abs(problem.C @ (zb[:n] * x))))

    def dc(zb):
        return lam + (peak(zb) - lam * float(zb[:n] @ x)) / D_i + rho * ScaledProblem.penalty(zb[:nu])

    def majorizer(zb):
        return surrogate(np.r_[zb[:nu], peak(zb)])

    return Subproblem(prog, z0, dc(z_u), surrogate, dc, majorizer,
                      {k: (v[0], v[1]) for k, v in pairs.items()}, nu)


def build_p_subproblem(problem: ScaledProblem, u, x, rho) -> Subproblem:
    """Power update; variables ``[x; s]``."""
    n = problem.n
    nz = n + 1
    u0 = u[0]
    D_i = _mainlobe_or_raise(u0, x)
    lam = problem.psl_ratio(u0, x)
    pen = rho * ScaledProblem.penalty(u)
    q = np.zeros(nz)
    q[n] = 1.0 / D_i
    q[:n] = -lam * u0 / D_i
    prog = convex.ConvexProgram(nz, q=q, lb=np.r_[np.zeros(n), 0.0], check_psd=False)
    prog.const = lam + pen
    _epigraph(prog, problem, u0, n)
    pairs = _dc_pair(problem, u0, x, D_i ** 2)
    for name, (_, _, Qc, lin, c0) in pairs.items():
        _embed_quadratic(prog, Qc, lin, c0, n, name)
    problem.add_p_constraints(prog, u, psl=False)
    z0 = np.r_[x, float(np.max(np.abs(problem.C @ (u0 * x))))]

    def surrogate(z):
        return float(q @ z + prog.const)

    def dc(zb):
        return lam + (float(np.max(np.abs(problem.C @ (u0 * zb[:n])))) - lam * float(u0 @ zb[:n])) / D_i + pen

    return Subproblem(prog, z0, dc(x), surrogate, dc, dc,
                      {k: (v[0], v[1]) for k, v in pairs.items()}, n)


def _step(sub: Subproblem, fun, f_cur, spec, what):
    """Solve the surrogate and line-search on the true objective.

    If the convexified feasible set has an empty interior the current
    iterate (which satisfies the convexified constraints with equality at
    worst) is kept; this is the feasibility-restoration fallback.
    """
    try:
        sol = solve_or_raise(sub.program, sub.z0, spec, what)
    except InfeasibleError:
        return sub.z0, f_cur, 0.0, False
    z1 = sol.x
    predicted = sub.surrogate(z1) - sub.surrogate(sub.z0)
    z, f, a = armijo(fun, sub.z0, z1, f_cur, predicted)
    return z, f, a, True


def default_rho(problem: ScaledProblem, u, x) -> float:
    """``ρ_rel·f_ref/n`` as in the resolution allocator.

    The initial PSL ratio is zero for the uniform start, so the objective
    scale ``f_ref`` is taken as 1, the upper bound of the PSL ratio.
    """
    return problem.spec.rho_rel / problem.n


def optimize_power(problem, u, x, rho, max_iter=30, delta_th=1e-4):
    fun = lambda zz: true_objective(problem, u, zz[:problem.n], rho)  # noqa: E731
    f = fun(x)
    for _ in range(max_iter):
        sub = build_p_subproblem(problem, u, x, rho)
        sol = solve_or_raise(sub.program, sub.z0, problem.spec, "power")
        predicted = sub.surrogate(sol.x) - sub.surrogate(sub.z0)
        z, f_new, a = armijo(fun, sub.z0, sol.x, f, predicted)
        check_monotone(f, f_new, "power update")
        done = abs(f_new - f) <= delta_th * max(abs(f), 1e-12)
        x, f = z[:problem.n], f_new
        if done or a == 0.0:
            break
    return x, f


def run(cfg: OfdmConfig, spec: SidelobeSpec, channels=None, init=None, observer=None) -> AllocationResult:
    """Alternating PSL minimization followed by Boolean rounding.

    ``init`` and ``observer`` behave as in the resolution allocator.
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
    n, nu = problem.n, problem.n * (problem.K + 1)
    trace = IterState()
    f = true_objective(problem, u, x, rho)
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        t0 = now()
        sub_u = build_u_subproblem(problem, u, x, rho)
        if observer is not None:
            observer("selection", it, sub_u, rho)
        fu = lambda zz: true_objective(problem, zz[:nu].reshape(u.shape), x, rho)  # noqa: E731
        z, f_u, a_u, _ = _step(sub_u, fu, f, spec, "selection")
        check_monotone(f, f_u, "selection update")
        u = z[:nu].reshape(u.shape)
        sub_p = build_p_subproblem(problem, u, x, rho)
        if observer is not None:
            observer("power", it, sub_p, rho)
        fp = lambda zz: true_objective(problem, u, zz[:n], rho)  # noqa: E731
        zp, f_new, a_p, _ = _step(sub_p, fp, f_u, spec, "power")
        check_monotone(f_u, f_new, "power update")
        x = zp[:n]
        rel = abs(f_new - f) / max(abs(f), 1e-12)
        slack = feasible_point(problem, u, x)
        g_tau, g_v = resolution_gaps(problem, u[0] * x)
        trace.record(objective=f_new, t_tau=g_tau, t_v=g_v, r=0, j=0, penalty=ScaledProblem.penalty(u), rho=rho,
                     step_u=a_u, step_p=a_p, slack_snr=slack["snr"], slack_rate=slack.get("rate", float("nan")),
                     seconds=now() - t0)
        f = f_new
        if rel <= spec.delta_th:
            converged = True
            break
        if sched.advance(it, u):
            rho = sched.rho
            f = true_objective(problem, u, x, rho)
    relaxed = problem.to_state(u, x, relaxed=True)
    f_relaxed = true_objective(problem, u, x, 0.0)
    power_opt = (lambda ub, xb: optimize_power(problem, ub, xb, 0.0, max_iter=spec.refine_iter,
                                               delta_th=spec.delta_th)[0])
    state, x_b, repaired = round_boolean(problem, u, x, rho, power_optimizer=power_opt)
    f_round = true_objective(problem, state.u, x_b, 0.0)
    m = metrics_for(problem, state)
    viol = _recompute_violations(problem, state)
    tau, fth = spec.resolved(cfg)
    if not m["delay_resolution"] <= tau * 1.01:
        viol["delay_resolution"] = m["delay_resolution"]
    if not m["doppler_resolution"] <= fth * 1.01:
        viol["doppler_resolution"] = m["doppler_resolution"]
    return AllocationResult(state=state, relaxed=relaxed, metrics=m, iterations=it, converged=converged,
                            relaxation_gap=f_round - f_relaxed, objective_relaxed=f_relaxed,
                            objective_rounded=f_round, trace=trace, repaired=repaired,
                            feasible=not viol, violations=viol)

"""Shared machinery of the two alternating allocators.

Power is optimized in the scaled variable ``x = p / p_ref`` with
``p_ref = P_t / (MN)`` so that a uniform allocation is ``x = 1`` and every
subproblem is well conditioned regardless of the physical power level.
The selection variables ``u_0, ..., u_K`` are stacked in one vector
``z = [u_0; u_1; ...; u_K]``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import convex
from .errors import InfeasibleError, InvalidConfigError, MonotonicityError
from .grid import OfdmConfig, ResourceState, unvec
from .metrics import (SidelobeRegion, channel_gains, mainlobe, phase_vectors, psl, reference_range,
                      resolution, resolution_terms, sensing_gain, sensing_snr, sidelobe_terms,
                      small_factors, sum_rate)

LN2 = np.log(2.0)
MONOTONE_SLACK = 1e-7


@dataclass
class CommonSpec:
    """Constraint levels shared by both allocation problems.

    ``rho`` fixes the Boolean penalty weight; when it is ``None`` the weight
    follows :class:`RhoSchedule` starting from ``rho_rel`` times the
    objective scale divided by ``MN``.

    ``gamma0`` is the linear sensing-SNR floor, ``eta0`` the sum-rate floor in
    bps/Hz and ``total_power`` the budget ``P_t`` in W. The sensing link budget
    uses ``mean_rcs`` (m²) at ``sensing_range`` (m; defaults to the range of
    delay bin ``max(l_max, 1)``).
    """

    gamma0: float = 0.1
    eta0: float = 3.0
    total_power: float = 1.6e5
    region: SidelobeRegion = field(default_factory=lambda: SidelobeRegion(4, 2))
    rho: float | None = None
    rho_rel: float = 0.1
    delta_th: float = 1e-4
    max_iter: int = 30
    mean_rcs: float = 10 ** 0.5
    sensing_range: float | None = None
    inner_tol: float = 1e-8
    max_newton: int = 400
    refine_iter: int = 30

    def validate(self):
        if self.gamma0 < 0 or self.eta0 < 0 or self.total_power <= 0:
            raise InvalidConfigError("gamma0, eta0 must be nonnegative and total_power positive")
        if self.rho is not None and self.rho < 0:
            raise InvalidConfigError("rho must be nonnegative")
        if self.delta_th <= 0 or self.max_iter < 1:
            raise InvalidConfigError("delta_th must be positive and max_iter >= 1")


@dataclass
class IterState:
    """Per-iteration bookkeeping of an alternating run."""

    objective: list = field(default_factory=list)
    t_tau: list = field(default_factory=list)
    t_v: list = field(default_factory=list)
    r: list = field(default_factory=list)
    j: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    step_u: list = field(default_factory=list)
    step_p: list = field(default_factory=list)
    slack_snr: list = field(default_factory=list)
    slack_rate: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def record(self, **kw):
        for k, v in kw.items():
            getattr(self, k).append(v)

    def rows(self):
        keys = ["objective", "rho", "t_tau", "t_v", "penalty", "step_u", "step_p", "slack_snr", "slack_rate"]
        n = len(self.objective)
        for i in range(n):
            row = {"iteration": i}
            for k in keys:
                col = getattr(self, k)
                row[k] = col[i] if i < len(col) else ""
            yield row


@dataclass
class AllocationResult:
    """Boolean allocation with metrics recomputed on it."""

    state: ResourceState
    relaxed: ResourceState
    metrics: dict
    iterations: int
    converged: bool
    relaxation_gap: float
    objective_relaxed: float
    objective_rounded: float
    trace: IterState
    repaired: int = 0
    feasible: bool = True
    violations: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "iterations": self.iterations,
            "converged": self.converged,
            "relaxation_gap": self.relaxation_gap,
            "objective_relaxed": self.objective_relaxed,
            "objective_rounded": self.objective_rounded,
            "repaired": self.repaired,
            "feasible": self.feasible,
            "violations": self.violations,
        }


@dataclass
class RhoSchedule:
    """Penalty homotopy shared by both allocators.

    Every ``every`` outer iterations the weight is multiplied by ``factor``
    while the mean penalty ``mean_k u_kᵀ(1 - u_k)`` still exceeds
    ``target·MN``. A fixed weight never changes.
    """

    rho: float
    every: int = 5
    factor: float = 2.0
    target: float = 0.01
    fixed: bool = False

    def advance(self, iteration: int, u) -> bool:
        """Apply the rule after outer iteration ``iteration``; returns whether ρ changed."""
        if self.fixed or iteration % self.every:
            return False
        mean_h = float(np.mean(np.sum(u * (1 - u), axis=1)))
        if mean_h > self.target * u.shape[1]:
            self.rho *= self.factor
            return True
        return False


def monotone_segments(objective, rho) -> list:
    """Split an objective trace into runs of constant ρ (the objective changes with ρ)."""
    out, cur = [], []
    for i, (f, r) in enumerate(zip(objective, rho)):
        if cur and r != rho[i - 1]:
            out.append(cur)
            cur = []
        cur.append(f)
    if cur:
        out.append(cur)
    return out


def write_trace_csv(trace: IterState, path) -> None:
    rows = list(trace.rows())
    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("iteration,objective\n")
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# Scaled problem data
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def axis_matrices(N: int, M: int) -> dict:
    """Real parts of the PSD splits of ``B_0``/``D_0`` at full size, plus phase ramps."""
    _, bp, bn, _, dp, dn = small_factors(N, M)
    onesM = np.ones((M, M))
    onesN = np.ones((N, N))
    phi, psi = phase_vectors(N, M)
    return {
        "B+": np.kron(onesM, bp.real), "B-": np.kron(onesM, bn.real),
        "D+": np.kron(dp.real, onesN), "D-": np.kron(dn.real, onesN),
        "phi": phi, "psi": psi,
    }


class ScaledProblem:
    """Constraint data in scaled power units shared by the subproblem builders."""

    def __init__(self, cfg: OfdmConfig, spec: CommonSpec, channels=None, beta=None, psl_mode="relative"):
        spec.validate()
        self.cfg = cfg
        self.spec = spec
        self.N, self.M = cfg.n_subcarriers, cfg.n_symbols
        self.n = self.N * self.M
        spec.region.check(self.N, self.M)
        H = np.zeros((0, self.N, self.M), complex) if channels is None else np.asarray(channels)
        if H.ndim == 2:
            H = H[None]
        if H.shape[1:] != (self.N, self.M):
            raise InvalidConfigError(f"channels must have shape (K, {self.N}, {self.M})")
        self.channels = H
        self.K = H.shape[0]
        self.p_ref = spec.total_power / self.n
        self.noise_power = cfg.noise_power
        rng_m = spec.sensing_range if spec.sensing_range is not None else reference_range(
            cfg, max(spec.region.l_max, 1))
        self.alpha = sensing_gain(cfg, rng_m, spec.mean_rcs)
        self.snr_gain = self.alpha * self.p_ref / self.noise_power
        self.rate_gain = channel_gains(H, self.noise_power) * self.p_ref if self.K else np.zeros((0, self.n))
        self.C = sidelobe_terms(self.N, self.M, spec.region) * self.n if not spec.region.is_empty else None
        self.beta = beta
        if psl_mode not in ("relative", "absolute"):
            raise InvalidConfigError("psl_mode must be 'relative' or 'absolute'")
        self.psl_mode = psl_mode
        self.mats = axis_matrices(self.N, self.M)
        if self.K == 0 and spec.eta0 > 0:
            self.use_rate = False
        else:
            self.use_rate = self.K > 0 and spec.eta0 > 0

    # -- state conversion --------------------------------------------------
    def to_state(self, u, x, relaxed=True) -> ResourceState:
        return ResourceState.from_vectors(u, x * self.p_ref, self.N, self.M, relaxed=relaxed)

    def initial_point(self):
        """``u_0 = 0.495``, ``u_k = 0.495/K`` and uniform power."""
        u = np.zeros((self.K + 1, self.n))
        u[0] = 0.495
        if self.K:
            u[1:] = 0.495 / self.K
        return u, np.ones(self.n)

    # -- metric pieces -------------------------------------------------------
    def rate(self, u, x) -> float:
        if self.K == 0:
            return 0.0
        return float(np.sum(np.log2(1 + self.rate_gain * u[1:] * x[None, :])) / self.n)

    def snr_slack(self, u0, x) -> float:
        """``snr_gain·xᵀu0 - Γ0·1ᵀu0`` (>= 0 when the SNR floor holds)."""
        return float(self.snr_gain * (x @ u0) - self.spec.gamma0 * u0.sum())

    def psl_ratio(self, u0, x) -> float:
        if self.C is None:
            return 0.0
        w = u0 * x
        return float(np.max(np.abs(self.C @ w)) / w.sum())

    def psl_bound_ok(self, u0, x, rtol=0.0) -> bool:
        if self.C is None or self.beta is None:
            return True
        w = u0 * x
        peak = float(np.max(np.abs(self.C @ w)))
        lim = self.beta * w.sum() if self.psl_mode == "relative" else self.beta / self.p_ref
        return peak <= lim * (1 + rtol)

    @staticmethod
    def penalty(u) -> float:
        return float(np.sum(u * (1 - u)))

    # -- constraint builders ---------------------------------------------------
    def add_u_constraints(self, prog: convex.ConvexProgram, x, n_vars_u: int, psl: bool = True):
        """SNR, PSL, rate and exclusivity constraints on ``z = [u_0..u_K, ...]``."""
        n, K = self.n, self.K
        nz = prog.n
        # exclusivity Σ_k u_k <= 1
        if K > 0:
            A = sp.hstack([sp.identity(n, format="csr")] * (K + 1) + (
                [sp.csr_matrix((n, nz - n_vars_u))] if nz > n_vars_u else []), format="csr")
            prog.add_linear(A, np.ones(n), "exclusivity")
        # SNR: Γ0·1ᵀu0 - g xᵀu0 <= 0
        row = np.zeros(nz)
        row[:n] = self.spec.gamma0 - self.snr_gain * x
        prog.add_linear(row[None, :], np.zeros(1), "snr")
        if psl and self.C is not None and self.beta is not None:
            for b, c in enumerate(self.C):
                F = np.zeros((2, nz))
                F[0, :n] = (c * x).real
                F[1, :n] = (c * x).imag
                cc = np.zeros(nz)
                if self.psl_mode == "relative":
                    cc[:n] = self.beta * x
                    prog.add_soc(F, np.zeros(2), cc, 0.0, "psl")
                else:
                    prog.add_soc(F, np.zeros(2), cc, self.beta / self.p_ref, "psl")
        if self.use_rate:
            a = self.rate_gain * x[None, :]  # (K, n)
            sl = slice(n, n * (K + 1))

            def fun(z, a=a):
                return float(np.sum(np.log1p(a * z[sl].reshape(K, n))) / (n * LN2))

            def grad(z, a=a):
                g = np.zeros(nz)
                g[sl] = (a / (1 + a * z[sl].reshape(K, n))).ravel() / (n * LN2)
                return g

            def hess(z, a=a):
                h = np.zeros(nz)
                h[sl] = -((a / (1 + a * z[sl].reshape(K, n))) ** 2).ravel() / (n * LN2)
                return h

            prog.add_concave(convex.ConcaveConstraint(fun, grad, hess, self.spec.eta0, "rate"))

    def add_p_constraints(self, prog: convex.ConvexProgram, u, psl: bool = True):
        """Power budget, SNR, PSL and rate constraints on ``[x, ...]``."""
        n, K = self.n, self.K
        nz = prog.n
        row = np.zeros(nz)
        row[:n] = 1.0
        prog.add_linear(row[None, :], np.array([float(n)]), "power_budget")
        u0 = u[0]
        row = np.zeros(nz)
        row[:n] = -self.snr_gain * u0
        prog.add_linear(row[None, :], np.array([-self.spec.gamma0 * u0.sum()]), "snr")
        if psl and self.C is not None and self.beta is not None:
            for c in self.C:
                F = np.zeros((2, nz))
                F[0, :n] = (c * u0).real
                F[1, :n] = (c * u0).imag
                cc = np.zeros(nz)
                if self.psl_mode == "relative":
                    cc[:n] = self.beta * u0
                    prog.add_soc(F, np.zeros(2), cc, 0.0, "psl")
                else:
                    prog.add_soc(F, np.zeros(2), cc, self.beta / self.p_ref, "psl")
        if self.use_rate:
            a = self.rate_gain * u[1:]  # (K, n)

            def fun(z, a=a):
                return float(np.sum(np.log1p(a * z[None, :n])) / (n * LN2))

            def grad(z, a=a):
                g = np.zeros(nz)
                g[:n] = np.sum(a / (1 + a * z[None, :n]), axis=0) / (n * LN2)
                return g

            def hess(z, a=a):
                h = np.zeros(nz)
                h[:n] = -np.sum((a / (1 + a * z[None, :n])) ** 2, axis=0) / (n * LN2)
                return h

            prog.add_concave(convex.ConcaveConstraint(fun, grad, hess, self.spec.eta0, "rate"))

    # -- resolution quadratics ---------------------------------------------------
    def resolution_dc(self, d, t_tau, t_v, w_tau, w_v):
        """Convex and concave parts of ``w_τ g_τ + w_v g_v`` as quadratics in ``z``.

        With ``w = d ⊙ z`` the weighted Dinkelbach function is
        ``zᵀ(Qc + Qv)z`` where ``Qc`` is PSD and ``Qv`` NSD. Signs follow
        ``r = sign(t_τ)`` and ``j = -sign(t_v)``: the convex parts carry the
        ``B_{-r}`` and ``D_{-j}`` PSD pieces.
        """
        mt = self.mats
        c_tau, c_v = 4 * np.pi / self.N, 4 * np.pi / self.M
        r = 1 if t_tau >= 0 else -1
        j = -1 if t_v >= 0 else 1
        B_cvx = mt["B-"] if r == 1 else mt["B+"]
        B_ccv = mt["B+"] if r == 1 else mt["B-"]
        D_cvx = mt["D+"] if j == -1 else mt["D-"]
        D_ccv = mt["D-"] if j == -1 else mt["D+"]
        dd = np.outer(d, d)
        fp = d * mt["phi"]
        fv = d * mt["psi"]
        Phi2 = np.outer(fp.real, fp.real) + np.outer(fp.imag, fp.imag)
        Psi2 = np.outer(fv.real, fv.real) + np.outer(fv.imag, fv.imag)
        Qc = w_tau * (2 * Phi2 + abs(t_tau) * c_tau * B_cvx * dd) + w_v * (2 * Psi2 + abs(t_v) * c_v * D_cvx * dd)
        Qv = -(w_tau + w_v) * dd - (w_tau * abs(t_tau) * c_tau * B_ccv + w_v * abs(t_v) * c_v * D_ccv) * dd
        return Qc, Qv, r, j


# ---------------------------------------------------------------------------
# Line search and monotonicity
# ---------------------------------------------------------------------------

def armijo(fun, z0, z1, f0, predicted, c=1e-4, min_step=1e-10):
    """Backtrack along ``z0 + α(z1 - z0)`` until ``f`` drops by ``c·α·|predicted|``.

    Returns ``(z, f, α)``; ``α = 0`` means no acceptable step was found and
    ``z0`` is returned unchanged.
    """
    dec = min(predicted, 0.0)
    a = 1.0
    while a >= min_step:
        z = z0 + a * (z1 - z0)
        f = fun(z)
        if np.isfinite(f) and f <= f0 + c * a * dec:
            return z, f, a
        a *= 0.5
    return z0, f0, 0.0


def check_monotone(prev, new, where):
    if new > prev + MONOTONE_SLACK * max(1.0, abs(prev)):
        raise MonotonicityError(f"objective increased in {where}: {prev!r} -> {new!r}")


def solve_or_raise(prog, x0, spec, what):
    sol = convex.solve(prog, tol=spec.inner_tol, max_iter=spec.max_newton, x0=x0)
    if sol.status == convex.INFEASIBLE:
        cert = sol.certificate or {}
        raise InfeasibleError(f"{what} subproblem infeasible: {cert.get('constraint')} violated by "
                              f"{cert.get('violation', float('nan')):.3e}",
                              constraint=cert.get("constraint"), violation=cert.get("violation"))
    return sol


def feasible_point(problem: ScaledProblem, u, x, extra=None) -> dict:
    """Constraint slacks (positive = satisfied) of a scaled iterate."""
    out = {"snr": problem.snr_slack(u[0], x)}
    if problem.use_rate:
        out["rate"] = problem.rate(u, x) - problem.spec.eta0
    out["power"] = float(problem.n - x.sum())
    out["exclusivity"] = float(1 - u.sum(axis=0).max())
    if problem.C is not None and problem.beta is not None:
        w = u[0] * x
        peak = float(np.max(np.abs(problem.C @ w)))
        lim = problem.beta * w.sum() if problem.psl_mode == "relative" else problem.beta / problem.p_ref
        out["psl"] = lim - peak
    if extra:
        out.update(extra)
    return out


# ---------------------------------------------------------------------------
# Rounding
# ---------------------------------------------------------------------------

def winner_take_all(u: np.ndarray) -> np.ndarray:
    """Assign each RE to ``argmax_k u_k`` when that maximum is >= 0.5.

    Ties resolve to the lowest entity index.
    """
    k = np.argmax(u, axis=0)
    best = u[k, np.arange(u.shape[1])]
    out = np.zeros_like(u)
    sel = best >= 0.5
    out[k[sel], np.flatnonzero(sel)] = 1.0
    return out


def metrics_for(problem: ScaledProblem, state: ResourceState) -> dict:
    """Recompute every reported metric from a (Boolean) state via :mod:`metrics`."""
    cfg = problem.cfg
    out = {}
    try:
        rep = resolution(state, cfg)
        out.update(delay_resolution=rep.delay_resolution, doppler_resolution=rep.doppler_resolution,
                   delta_tau=rep.delta_tau, delta_fd=rep.delta_fd)
    except Exception:  # degenerate sensing sets are reported, not fatal
        out.update(delay_resolution=float("nan"), doppler_resolution=float("nan"),
                   delta_tau=float("nan"), delta_fd=float("nan"))
    pk = psl(state, problem.spec.region)
    ml = mainlobe(state)
    out["psl"] = pk
    out["mainlobe"] = ml
    out["psl_ratio"] = pk / ml if ml > 0 else float("nan")
    out["psl_db"] = float(20 * np.log10(out["psl_ratio"])) if ml > 0 and pk > 0 else float("-inf")
    try:
        out["sensing_snr"] = sensing_snr(state, alpha=problem.alpha, noise_power=problem.noise_power)
    except Exception:
        out["sensing_snr"] = 0.0
    out["sum_rate"] = sum_rate(state, problem.channels, noise_power=problem.noise_power) if problem.K else 0.0
    out["sensing_rof"] = float(state.selections[0].mean())
    out["total_power"] = float(state.power.sum())
    return out


def unvec_u(problem, z):
    return z[: problem.n * (problem.K + 1)].reshape(problem.K + 1, problem.n)


def ensure_cfg(cfg, channels):
    if channels is not None:
        H = np.asarray(channels)
        if H.ndim == 3 and H.shape[1:] != (cfg.n_subcarriers, cfg.n_symbols):
            raise InvalidConfigError("channel grid does not match the configuration")


def now():
    return time.perf_counter()


__all__ = [
    "CommonSpec", "IterState", "AllocationResult", "ScaledProblem", "armijo", "check_monotone",
    "winner_take_all", "metrics_for", "write_trace_csv", "feasible_point", "solve_or_raise",
    "unvec", "asdict",
]

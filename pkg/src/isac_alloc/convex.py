"""A small dense log-barrier interior-point solver.

Handles programs of the form::

    minimize    ½ xᵀPx + qᵀx
    subject to  A x <= b,  E x = f,  lb <= x <= ub,
                ‖F_i x + g_i‖ <= c_iᵀx + d_i,
                g_j(x) >= η_j              (g_j smooth concave)

Concave constraints are supplied through value/gradient/Hessian oracles and
enter the barrier as ``-log(g_j(x) - η_j)``, so logarithmic rate constraints
are handled exactly rather than through a linearization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidConfigError, NumericalError

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"
LOOSE_NEWTON_TOL = 1e-4


@dataclass
class SocConstraint:
    """``‖F x + g‖ <= cᵀx + d``."""

    F: np.ndarray
    g: np.ndarray
    c: np.ndarray
    d: float = 0.0
    name: str = "soc"


@dataclass
class ConcaveConstraint:
    """``fun(x) >= eta`` with ``fun`` concave.

    ``hess`` may return a full matrix, a 1-D array holding the diagonal of
    the Hessian, or a pair ``(slice, block)`` when the Hessian vanishes
    outside one contiguous square block.
    """

    fun: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    eta: float = 0.0
    name: str = "concave"


def quadratic_constraint(Q, a, b, name="quadratic") -> ConcaveConstraint:
    """Express ``xᵀQx + aᵀx + b <= 0`` (``Q`` PSD) as a concave constraint."""
    Q = np.asarray(Q, float)
    a = np.asarray(a, float)
    Q2 = Q + Q.T
    return ConcaveConstraint(
        fun=lambda x: -(x @ Q @ x + a @ x + b),
        grad=lambda x: -(Q2 @ x + a),
        hess=lambda x: -Q2,
        eta=0.0,
        name=name,
    )


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    status: str
    kkt_residuals: dict
    iterations: int
    duals: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    certificate: dict | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class ConvexProgram:
    """Container for a convex program; build it up with the ``add_*`` methods."""

    def __init__(self, n: int, P=None, q=None, lb=None, ub=None, check_psd: bool = True):
        self.n = int(n)
        self.P = np.zeros((n, n)) if P is None else np.asarray(P, float)
        self.q = np.zeros(n) if q is None else np.asarray(q, float).copy()
        self.const = 0.0
        self.lb = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,)).copy()
        self.ub = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,)).copy()
        self._lin: list[tuple[object, np.ndarray, str]] = []
        self._eq: list[tuple[object, np.ndarray, str]] = []
        self.socs: list[SocConstraint] = []
        self.concave: list[ConcaveConstraint] = []
        if self.P.shape != (n, n) or self.q.shape != (n,):
            raise InvalidConfigError("objective dimensions do not match n")
        if np.any(self.lb > self.ub):
            raise InvalidConfigError("box bounds cross")
        if check_psd:
            self.check_objective()

    # -- construction -----------------------------------------------------
    def check_objective(self, tol: float = 1e-9) -> None:
        if not np.allclose(self.P, self.P.T, atol=1e-12 * (1 + np.abs(self.P).max())):
            raise InvalidConfigError("objective matrix P must be symmetric")
        if self.n and np.any(self.P):
            emin = float(np.linalg.eigvalsh(self.P)[0])
            if emin < -tol * max(1.0, float(np.abs(self.P).max())):
                raise InvalidConfigError(f"objective matrix P is not PSD (min eigenvalue {emin:.3e})")

    def add_linear(self, A, b, name: str = "linear") -> None:
        """Append ``A x <= b``; ``A`` may be dense or scipy.sparse."""
        A = A if sp.issparse(A) else np.atleast_2d(np.asarray(A, float))
        b = np.atleast_1d(np.asarray(b, float))
        if A.shape != (b.size, self.n):
            raise InvalidConfigError(f"linear block {name!r} has shape {A.shape}, expected ({b.size}, {self.n})")
        self._lin.append((A, b, name))

    def add_equality(self, E, f, name: str = "equality") -> None:
        E = np.atleast_2d(np.asarray(E.toarray() if sp.issparse(E) else E, float))
        f = np.atleast_1d(np.asarray(f, float))
        if E.shape != (f.size, self.n):
            raise InvalidConfigError(f"equality block {name!r} has wrong shape")
        self._eq.append((E, f, name))

    def add_soc(self, F, g, c, d=0.0, name: str = "soc") -> None:
        F = np.atleast_2d(np.asarray(F, float))
        g = np.atleast_1d(np.asarray(g, float))
        c = np.asarray(c, float)
        if F.shape[1] != self.n or c.shape != (self.n,) or g.size != F.shape[0]:
            raise InvalidConfigError(f"SOC {name!r} has inconsistent dimensions")
        self.socs.append(SocConstraint(F, g, c, float(d), name))

    def add_concave(self, con: ConcaveConstraint) -> None:
        self.concave.append(con)

    def add_quadratic(self, Q, a, b, name="quadratic") -> None:
        self.add_concave(quadratic_constraint(Q, a, b, name))

    # -- views ------------------------------------------------------------
    def linear_blocks(self):
        return list(self._lin)

    def equality_blocks(self):
        return list(self._eq)

    def stacked_linear(self):
        if not self._lin:
            return None, np.zeros(0), []
        blocks = [A for A, _, _ in self._lin]
        if any(sp.issparse(A) for A in blocks):
            A = sp.vstack([sp.csr_matrix(B) for B in blocks], format="csr")
        else:
            A = np.vstack(blocks)
        names = []
        for A_i, b_i, nm in self._lin:
            names += [nm] * b_i.size
        return A, np.concatenate([b for _, b, _ in self._lin]), names

    def stacked_equality(self):
        if not self._eq:
            return None, np.zeros(0)
        return np.vstack([E for E, _, _ in self._eq]), np.concatenate([f for _, f, _ in self._eq])

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)

    def violations(self, x) -> dict:
        """Largest violation per named constraint block (positive = violated)."""
        out = {}

        def put(name, v):
            out[name] = max(out.get(name, -np.inf), float(v))

        for A, b, nm in self._lin:
            r = A @ x - b
            put(nm, np.max(r) if r.size else -np.inf)
        for E, f, nm in self._eq:
            put(nm, np.max(np.abs(E @ x - f)))
        if np.any(np.isfinite(self.lb)):
            put("lower_bound", np.max(self.lb - x))
        if np.any(np.isfinite(self.ub)):
            put("upper_bound", np.max(x - self.ub))
        for s in self.socs:
            put(s.name, np.linalg.norm(s.F @ x + s.g) - (s.c @ x + s.d))
        for c in self.concave:
            put(c.name, c.eta - c.fun(x))
        return out

    def max_violation(self, x) -> tuple[str | None, float]:
        v = self.violations(x)
        if not v:
            return None, -np.inf
        name = max(v, key=lambda k: v[k])
        return name, v[name]

    def to_json(self) -> str:
        """Dump objective and the linear/SOC blocks (concave oracles are listed by name)."""
        A, b, names = self.stacked_linear()
        E, f = self.stacked_equality()
        dense = (lambda M: None if M is None else (M.toarray() if sp.issparse(M) else M).tolist())
        d = {
            "n": self.n, "P": self.P.tolist(), "q": self.q.tolist(), "const": self.const,
            "lb": [None if not np.isfinite(v) else v for v in self.lb],
            "ub": [None if not np.isfinite(v) else v for v in self.ub],
            "A_ub": dense(A), "b_ub": b.tolist(), "linear_names": names,
            "A_eq": dense(E), "b_eq": f.tolist(),
            "soc": [{"F": s.F.tolist(), "g": s.g.tolist(), "c": s.c.tolist(), "d": s.d, "name": s.name}
                    for s in self.socs],
            "concave": [{"name": c.name, "eta": c.eta} for c in self.concave],
        }
        return json.dumps(d)


# ---------------------------------------------------------------------------
# Epigraph helper
# ---------------------------------------------------------------------------

@dataclass
class MinimaxFragment:
    """SOC rows ``|c_iᵀx + d_i| <= s`` for an epigraph variable ``s`` at ``t_index``."""

    t_index: int
    n_total: int
    socs: list

    def install(self, prog: ConvexProgram, weight: float = 1.0) -> None:
        for s in self.socs:
            prog.socs.append(s)
        prog.q[self.t_index] += weight


def _term_key(coef, const, decimals=12):
    scale = max(np.abs(coef).max(initial=0.0), abs(const), 1e-300)
    a = np.round(np.concatenate([coef, [const]]) / scale, decimals) + 0.0
    k1 = hashlib.sha1(np.concatenate([a.real, a.imag]).tobytes()).hexdigest()
    b = np.conj(a)
    k2 = hashlib.sha1(np.concatenate([b.real, b.imag + 0.0]).tobytes()).hexdigest()
    return min(k1, k2), scale


def epigraph_minimax(terms, n_vars: int, names=None) -> MinimaxFragment:
    """Epigraph form of ``min max_i |c_iᵀx + d_i|`` for real ``x``.

    ``terms`` is a sequence of ``(coef, const)`` pairs with complex ``coef`` of
    length ``n_vars``. A new variable ``s`` is placed at index ``n_vars``. Terms
    whose coefficients coincide (up to conjugation, which leaves the modulus
    unchanged for real ``x``) are emitted once.
    """
    terms = list(terms)
    if not terms:
        raise InvalidConfigError("epigraph_minimax needs at least one term")
    n_total = n_vars + 1
    seen = {}
    socs = []
    e = np.zeros(n_total)
    e[n_vars] = 1.0
    for i, (coef, const) in enumerate(terms):
        coef = np.asarray(coef, complex)
        if coef.shape != (n_vars,):
            raise InvalidConfigError("term coefficient length must equal n_vars")
        const = complex(const)
        key, _ = _term_key(coef, const)
        if key in seen and np.allclose(np.abs(seen[key][0]), np.abs(coef)):
            continue
        seen[key] = (coef, const)
        F = np.zeros((2, n_total))
        F[0, :n_vars] = coef.real
        F[1, :n_vars] = coef.imag
        nm = names[i] if names is not None else f"minimax[{i}]"
        socs.append(SocConstraint(F, np.array([const.real, const.imag]), e.copy(), 0.0, nm))
    return MinimaxFragment(n_vars, n_total, socs)


# ---------------------------------------------------------------------------
# Barrier machinery
# ---------------------------------------------------------------------------

class _Compiled:
    """Stacked constraint data plus barrier value/gradient/Hessian evaluation."""

    def __init__(self, prog: ConvexProgram):
        self.prog = prog
        self.n = prog.n
        self.P, self.q = prog.P, prog.q
        self.A, self.b, self.lin_names = prog.stacked_linear()
        self.E, self.f = prog.stacked_equality()
        self.lo_idx = np.flatnonzero(np.isfinite(prog.lb))
        self.hi_idx = np.flatnonzero(np.isfinite(prog.ub))
        self.lo = prog.lb[self.lo_idx]
        self.hi = prog.ub[self.hi_idx]
        self.socs = prog.socs
        if self.socs:
            self.G = np.vstack([np.vstack([s.c[None, :], s.F]) for s in self.socs])
            self.h = np.concatenate([np.concatenate([[s.d], s.g]) for s in self.socs])
            sizes = [1 + s.F.shape[0] for s in self.socs]
            self.soc_starts = np.concatenate([[0], np.cumsum(sizes)])
        self.concave = prog.concave
        self.n_lin = 0 if self.A is None else self.A.shape[0]
        self.degree = self.n_lin + self.lo_idx.size + self.hi_idx.size + 2 * len(self.socs) + len(self.concave)

    def objective(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def slacks(self, x):
        """All constraint slacks; ``None`` when ``x`` is not strictly feasible."""
        s = {}
        if self.n_lin:
            s["lin"] = self.b - self.A @ x
            if np.any(s["lin"] <= 0):
                return None
        s["lo"] = x[self.lo_idx] - self.lo
        s["hi"] = self.hi - x[self.hi_idx]
        if np.any(s["lo"] <= 0) or np.any(s["hi"] <= 0):
            return None
        if self.socs:
            y = self.G @ x + self.h
            st = self.soc_starts
            y0 = y[st[:-1]]
            sq = np.add.reduceat(y * y, st[:-1]) - y0 * y0
            delta = y0 * y0 - sq
            if np.any(y0 <= 0) or np.any(delta <= 0):
                return None
            s["soc_y"], s["soc_delta"] = y, delta
        if self.concave:
            with np.errstate(invalid="ignore", divide="ignore"):
                cv = np.array([c.fun(x) - c.eta for c in self.concave])
            if not np.all(np.isfinite(cv)) or np.any(cv <= 0):
                return None
            s["conc"] = cv
        return s

    def barrier(self, s):
        v = 0.0
        if self.n_lin:
            v -= np.sum(np.log(s["lin"]))
        v -= np.sum(np.log(s["lo"])) + np.sum(np.log(s["hi"]))
        if self.socs:
            v -= np.sum(np.log(s["soc_delta"]))
        if self.concave:
            v -= np.sum(np.log(s["conc"]))
        return float(v)

    def _soc_jy(self, s):
        st = self.soc_starts
        jy = -s["soc_y"].copy()
        jy[st[:-1]] *= -1.0
        dl = np.repeat(s["soc_delta"], np.diff(st))
        return jy, dl

    def grad_hess(self, x, s, need_hess=True):
        n = self.n
        g = np.zeros(n)
        H = np.zeros((n, n)) if need_hess else None
        if self.n_lin:
            inv = 1.0 / s["lin"]
            g += self.A.T @ inv
            if need_hess:
                if sp.issparse(self.A):
                    H += (self.A.T @ sp.diags(inv * inv) @ self.A).toarray()
                else:
                    Aw = self.A * inv[:, None]
                    H += Aw.T @ Aw
        g[self.lo_idx] -= 1.0 / s["lo"]
        g[self.hi_idx] += 1.0 / s["hi"]
        if need_hess:
            H[self.lo_idx, self.lo_idx] += 1.0 / s["lo"] ** 2
            H[self.hi_idx, self.hi_idx] += 1.0 / s["hi"] ** 2
        low_rank = []
        if self.socs:
            jy, dl = self._soc_jy(s)
            g -= 2.0 * self.G.T @ (jy / dl)
            if need_hess:
                # Hessian of -log(yᵀJy) in y: -2J/Δ + 4 (Jy)(Jy)ᵀ/Δ²
                st = self.soc_starts
                sign = -np.ones(self.G.shape[0])
                sign[st[:-1]] = 1.0
                H -= (self.G * (2.0 * sign / dl)[:, None]).T @ self.G
                # v_i = G_iᵀ J y_i for every cone, stacked as rows
                V = np.add.reduceat(self.G * jy[:, None], st[:-1], axis=0)
                low_rank.append(V * (2.0 / s["soc_delta"])[:, None])
        for i, c in enumerate(self.concave):
            cv = s["conc"][i]
            gc = np.asarray(c.grad(x), float)
            g -= gc / cv
            if need_hess:
                hc = c.hess(x)
                if isinstance(hc, tuple):  # (index slice, block)
                    sl, blk = hc
                    H[sl, sl] -= np.asarray(blk, float) / cv
                else:
                    hc = np.asarray(hc, float)
                    if hc.ndim == 1:
                        H[np.diag_indices(n)] -= hc / cv
                    else:
                        H -= hc / cv
                low_rank.append((gc / cv)[None, :])
        if need_hess and low_rank:
            R = np.vstack(low_rank)
            H += R.T @ R
        return g, H

    def max_linear_step(self, x, dx):
        """Largest α keeping linear and box slacks positive."""
        amax = np.inf
        if self.n_lin:
            r = self.A @ dx
            sl = self.b - self.A @ x
            pos = r > 0
            if np.any(pos):
                amax = min(amax, float(np.min(sl[pos] / r[pos])))
        d = dx[self.lo_idx]
        neg = d < 0
        if np.any(neg):
            amax = min(amax, float(np.min((x[self.lo_idx][neg] - self.lo[neg]) / -d[neg])))
        d = dx[self.hi_idx]
        pos = d > 0
        if np.any(pos):
            amax = min(amax, float(np.min((self.hi[pos] - x[self.hi_idx][pos]) / d[pos])))
        return amax

    def duals(self, x, s, t):
        out = {}
        if self.n_lin:
            out["linear"] = 1.0 / (t * s["lin"])
        out["lower"] = 1.0 / (t * s["lo"])
        out["upper"] = 1.0 / (t * s["hi"])
        if self.socs:
            jy, dl = self._soc_jy(s)
            out["soc"] = 2.0 * jy / (t * dl)
        if self.concave:
            out["concave"] = 1.0 / (t * s["conc"])
        return out


def _solve_newton(H, g, E=None, r_eq=None):
    """Solve the (equality-constrained) Newton system; returns ``(dx, w)``."""
    n = H.shape[0]
    reg = 0.0
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    for attempt in range(6):
        try:
            Hr = H if reg == 0 else H + reg * np.eye(n)
            cf = sla.cho_factor(Hr, lower=True, check_finite=False)
            if E is None:
                return -sla.cho_solve(cf, g, check_finite=False), None
            HiE = sla.cho_solve(cf, E.T, check_finite=False)
            Hig = sla.cho_solve(cf, g, check_finite=False)
            S = E @ HiE
            w = np.linalg.lstsq(S, r_eq - E @ Hig, rcond=None)[0]
            return -Hig - HiE @ w, w
        except np.linalg.LinAlgError:
            reg = scale * 1e-14 * (100 ** attempt) if reg else scale * 1e-14
    # last resort: symmetric indefinite solve via lstsq on the full KKT matrix
    if E is None:
        dx = np.linalg.lstsq(H, -g, rcond=None)[0]
        return dx, None
    m = E.shape[0]
    K = np.block([[H, E.T], [E, np.zeros((m, m))]])
    sol = np.linalg.lstsq(K, -np.concatenate([g, r_eq]), rcond=None)[0]
    if not np.all(np.isfinite(sol)):
        raise NumericalError("Newton system could not be solved")
    return sol[:n], sol[n:]


class _Barrier:
    def __init__(self, comp: _Compiled, mu=10.0, newton_tol=1e-10, max_newton=100):
        self.c = comp
        self.mu = mu
        self.newton_tol = newton_tol
        self.max_newton = max_newton
        self.iterations = 0

    def center(self, x, t, stop=None, budget=np.inf, newton_tol=None):
        """Newton centering of ``t f0 + φ``; returns ``(x, s, w, converged, stopped)``."""
        newton_tol = self.newton_tol if newton_tol is None else newton_tol
        c = self.c
        s = c.slacks(x)
        w = None
        self.last_dx = None
        for _ in range(self.max_newton):
            if self.iterations >= budget:
                return x, s, w, False, False
            gb, Hb = c.grad_hess(x, s)
            g = t * (c.P @ x + c.q) + gb
            H = t * c.P + Hb
            r_eq = None if c.E is None else c.E @ x - c.f
            dx, w = _solve_newton(H, g, c.E, r_eq)
            lam2 = float(-g @ dx) if c.E is None else float(dx @ H @ dx)
            self.iterations += 1
            if not np.isfinite(lam2):
                raise NumericalError("non-finite Newton decrement")
            # λ²/2 bounds the suboptimality of t·f0 + φ; once it falls to the
            # rounding level of that sum further Newton steps only chase noise.
            floor = 1e-13 * t * (1.0 + abs(c.objective(x)))
            if lam2 / 2.0 <= max(newton_tol, floor):
                self.last_dx = dx
                return x, s, w, True, False
            alpha = min(1.0, 0.99 * c.max_linear_step(x, dx))
            psi0 = t * c.objective(x) + c.barrier(s)
            slope = float(g @ dx)
            small = lam2 < 1e-3
            for _ in range(80):
                xn = x + alpha * dx
                sn = c.slacks(xn)
                if sn is not None:
                    if small:
                        break
                    psin = t * c.objective(xn) + c.barrier(sn)
                    if psin <= psi0 + 0.01 * alpha * slope:
                        break
                alpha *= 0.5
            else:
                return x, s, w, False, False
            if np.array_equal(xn, x):
                return x, s, w, True, False
            x, s = xn, sn
            if stop is not None and stop(x):
                return x, s, w, True, True
        return x, s, w, False, False


def _initial_t(comp: _Compiled, x, s):
    gb, _ = comp.grad_hess(x, s, need_hess=False)
    g0 = comp.P @ x + comp.q
    nn = float(g0 @ g0)
    if nn > 0:
        t = -float(g0 @ gb) / nn
        if np.isfinite(t) and t > 0:
            return float(np.clip(t, 1e-6, 1e6))
    return max(1.0, comp.degree / max(1.0, abs(comp.objective(x))))


def _kkt(comp: _Compiled, x, s, t, w, dx=None):
    """KKT residuals with multipliers extrapolated along the last Newton step.

    At a barrier center the multipliers ``1/(t σ_i)`` make the Lagrangian
    gradient vanish only up to the centering tolerance, and that error is
    amplified by near-active constraints. Linearizing the multipliers along
    the final Newton direction and evaluating at ``x + dx`` removes the
    first-order error. Returns ``(residuals, duals, x_eval)``.
    """
    if dx is not None:
        xp = x + dx
        sp_ = comp.slacks(xp)
        if sp_ is None:
            dx, xp, sp_ = None, x, s
    else:
        xp, sp_ = x, s
    if dx is None:
        dx = np.zeros_like(x)
    lam = {}
    r = comp.P @ xp + comp.q
    scale = float(np.max(np.abs(r), initial=0.0))
    contrib = []
    comp_sum = 0.0
    if comp.n_lin:
        sl = s["lin"]
        lam["linear"] = (1.0 + (comp.A @ dx) / sl) / (t * sl)
        contrib.append(comp.A.T @ lam["linear"])
        comp_sum += float(lam["linear"] @ sp_["lin"])
    lam["lower"] = (1.0 - dx[comp.lo_idx] / s["lo"]) / (t * s["lo"])
    lam["upper"] = (1.0 + dx[comp.hi_idx] / s["hi"]) / (t * s["hi"])
    v = np.zeros_like(x)
    v[comp.lo_idx] -= lam["lower"]
    v[comp.hi_idx] += lam["upper"]
    contrib.append(v)
    comp_sum += float(lam["lower"] @ sp_["lo"] + lam["upper"] @ sp_["hi"])
    if comp.socs:
        st = comp.soc_starts
        y, dl = s["soc_y"], s["soc_delta"]
        sign = -np.ones(y.size)
        sign[st[:-1]] = 1.0
        jy = sign * y
        dy = comp.G @ dx
        z = np.empty_like(y)
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(len(comp.socs)):
                sl = slice(st[i], st[i + 1])
                d = dl[i]
                z[sl] = (2.0 * jy[sl] / d + 2.0 * sign[sl] * dy[sl] / d
                         - 4.0 * jy[sl] * (jy[sl] @ dy[sl]) / (d * d)) / t
        lam["soc"] = z
        contrib.append(-comp.G.T @ z)
        comp_sum += float(z @ sp_["soc_y"])
    if comp.concave:
        cv = s["conc"]
        grads = [np.asarray(c.grad(x), float) for c in comp.concave]
        lc = np.array([(1.0 - gc @ dx / cv[i]) / (t * cv[i]) for i, gc in enumerate(grads)])
        lam["concave"] = lc
        gp = sum(lc[i] * np.asarray(c.grad(xp), float) for i, c in enumerate(comp.concave))
        contrib.append(-gp)
        comp_sum += float(lc @ sp_["conc"])
    if w is not None and comp.E is not None:
        lam["equality"] = w / t
        contrib.append(comp.E.T @ lam["equality"])
    for c_ in contrib:
        r = r + c_
        scale = max(scale, float(np.max(np.abs(c_), initial=0.0)))
    prim = 0.0 if comp.E is None else float(np.max(np.abs(comp.E @ xp - comp.f), initial=0.0))
    viol = comp.prog.violations(xp)
    prim = max([prim] + [max(0.0, v_) for v_ in viol.values()])
    dual = 0.0
    for k, v_ in lam.items():
        if k == "soc":
            st = comp.soc_starts
            z0 = v_[st[:-1]]
            zn = np.sqrt(np.maximum(np.add.reduceat(v_ * v_, st[:-1]) - z0 * z0, 0.0))
            dual = max(dual, float(np.max(zn - z0, initial=0.0)))
        elif k != "equality" and v_.size:
            dual = max(dual, float(np.max(-v_)))
    f0 = comp.objective(xp)
    res = {
        "stationarity": float(np.max(np.abs(r), initial=0.0)) / (1.0 + scale),
        "primal": prim / (1.0 + float(np.max(np.abs(comp.b), initial=0.0))),
        "dual": dual / (1.0 + scale),
        "complementarity": max(comp_sum, comp.degree / t) / (1.0 + abs(f0)),
    }
    return res, lam, xp


def _phase_one(prog: ConvexProgram, x0, tol, max_iter, mu):
    """Find a strictly feasible point by minimizing a uniform slack ``s``.

    Returns ``(x, None)`` on success or ``(x_best, certificate)``.
    """
    n = prog.n
    aug = ConvexProgram(n + 1, check_psd=False)
    aug.q[n] = 1.0
    aug.lb[n] = -1.0
    for A, b, nm in prog.linear_blocks():
        if sp.issparse(A):
            A2 = sp.hstack([A, sp.csr_matrix(-np.ones((A.shape[0], 1)))], format="csr")
        else:
            A2 = np.hstack([A, -np.ones((A.shape[0], 1))])
        aug.add_linear(A2, b, nm)
    for E, f, nm in prog.equality_blocks():
        aug.add_equality(np.hstack([E, np.zeros((E.shape[0], 1))]), f, nm)
    lo = np.flatnonzero(np.isfinite(prog.lb))
    hi = np.flatnonzero(np.isfinite(prog.ub))
    if lo.size:
        A = sp.csr_matrix((-np.ones(lo.size), (np.arange(lo.size), lo)), shape=(lo.size, n + 1)).tolil()
        A[:, n] = -1.0
        aug.add_linear(A.tocsr(), -prog.lb[lo], "lower_bound")
    if hi.size:
        A = sp.csr_matrix((np.ones(hi.size), (np.arange(hi.size), hi)), shape=(hi.size, n + 1)).tolil()
        A[:, n] = -1.0
        aug.add_linear(A.tocsr(), prog.ub[hi], "upper_bound")
    for s in prog.socs:
        F = np.hstack([s.F, np.zeros((s.F.shape[0], 1))])
        aug.add_soc(F, s.g, np.concatenate([s.c, [1.0]]), s.d, s.name)
    for c in prog.concave:
        aug.add_concave(ConcaveConstraint(
            fun=(lambda z, c=c: c.fun(z[:-1]) + z[-1]),
            grad=(lambda z, c=c: np.concatenate([c.grad(z[:-1]), [1.0]])),
            hess=(lambda z, c=c: _pad_hess(c.hess(z[:-1]))),
            eta=c.eta, name=c.name))
    x = np.zeros(n) if x0 is None else np.asarray(x0, float).copy()
    if prog.equality_blocks():
        E, f = prog.stacked_equality()
        x = x - np.linalg.lstsq(E, E @ x - f, rcond=None)[0]
    _, v = prog.max_violation(x)
    if not np.isfinite(v):
        v = 0.0
    z = np.concatenate([x, [v + max(1.0, 0.1 * abs(v))]])
    sol = _barrier_solve(_Compiled(aug), z, tol=tol, max_iter=max_iter, mu=mu,
                         stop=lambda zz: zz[-1] < 0 and prog_strict(prog, zz[:-1]))
    xs = sol.x[:n]
    if sol.x[n] < 0 and prog_strict(prog, xs):
        return xs, None
    # The uniform slack spreads infeasibility over all rows, so the box rows
    # are often the most violated at the phase-one point although a general
    # constraint is what blocks feasibility. Name the general constraint.
    viols = prog.violations(xs)
    general = {k: v for k, v in viols.items() if k not in ("lower_bound", "upper_bound") and v > 0}
    name, viol = (max(general.items(), key=lambda kv: kv[1]) if general else prog.max_violation(xs))
    return xs, {"constraint": name, "violation": float(viol), "phase_one_objective": float(sol.x[n]),
                "violations": viols}


def _pad_hess(h):
    if isinstance(h, tuple):
        return h
    h = np.asarray(h, float)
    if h.ndim == 1:
        return np.concatenate([h, [0.0]])
    n = h.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = h
    return out


def prog_strict(prog: ConvexProgram, x) -> bool:
    return _Compiled(prog).slacks(x) is not None


def _barrier_solve(comp: _Compiled, x, tol, max_iter, mu, stop=None):
    bar = _Barrier(comp, mu=mu)
    s = comp.slacks(x)
    if s is None:
        raise NumericalError("barrier start is not strictly feasible")
    t = _initial_t(comp, x, s)
    history = []
    status = MAX_ITER
    while True:
        # intermediate centerings only need to stay near the central path;
        # the last one (once the duality-gap bound is met) is done tightly
        x, s, w, conv, stopped = bar.center(x, t, stop=stop, budget=max_iter, newton_tol=LOOSE_NEWTON_TOL)
        f0 = comp.objective(x)
        if conv and not stopped and comp.degree / t <= tol * (1.0 + abs(f0)):
            x, s, w, conv, stopped = bar.center(x, t, stop=stop, budget=max_iter)
            f0 = comp.objective(x)
        history.append({"t": t, "primal": f0, "dual_bound": f0 - comp.degree / t, "newton": bar.iterations})
        if stopped:
            return Solution(x=x, objective=f0, status=OPTIMAL, kkt_residuals={},
                            iterations=bar.iterations, history=history)
        if conv and comp.degree / t <= tol * (1.0 + abs(f0)):
            res, lam, xe = _kkt(comp, x, s, t, w, bar.last_dx)
            if max(res.values()) <= tol:
                status = OPTIMAL
                break
            if t > 1e20 or bar.iterations >= max_iter:
                break
        elif bar.iterations >= max_iter:
            res, lam, xe = _kkt(comp, x, s, t, w, bar.last_dx)
            break
        t *= mu
    return Solution(x=xe, objective=comp.objective(xe), status=status, kkt_residuals=res,
                    iterations=bar.iterations, duals=lam, history=history)


def solve(prog: ConvexProgram, tol: float = 1e-8, max_iter: int = 500, x0=None, mu: float = 10.0) -> Solution:
    """Solve ``prog`` with a primal log-barrier method.

    ``x0`` is an optional warm start. When it is not strictly feasible a
    phase-I problem is solved first; if that fails the returned solution has
    ``status == "infeasible"`` and ``certificate`` names the maximally
    violated constraint block.
    """
    comp = _Compiled(prog)
    x = np.zeros(prog.n) if x0 is None else np.asarray(x0, float).copy()
    if comp.E is not None:
        x = x - np.linalg.lstsq(comp.E, comp.E @ x - comp.f, rcond=None)[0]
    if comp.slacks(x) is None:
        x1, cert = _phase_one(prog, x, tol, max_iter, mu)
        if cert is not None:
            return Solution(x=x1, objective=prog.objective(x1), status=INFEASIBLE,
                            kkt_residuals={}, iterations=0, certificate=cert)
        x = x1
    sol = _barrier_solve(comp, x, tol, max_iter, mu)
    sol.objective += prog.const
    return sol

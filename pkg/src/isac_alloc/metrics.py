"""Closed-form sensing metrics for a selection of OFDM resource elements.

Everything here works on the ``vec`` ordering defined in :mod:`isac_alloc.grid`
and accepts relaxed (fractional) selections, because the allocators evaluate
these quantities mid-iteration.

Two families of functions are provided. The state-level API
(:func:`af_eval`, :func:`psl`, :func:`delay_resolution`, ...) takes a
:class:`~isac_alloc.grid.ResourceState`; the vector-level helpers
(:func:`resolution_terms`, :func:`sidelobe_terms`, ...) take ``u0`` and ``p``
directly and are what the optimizers call in their inner loops.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .errors import AmbiguousMainlobeError, DegenerateInputError, InvalidConfigError, NumericalError
from .grid import OfdmConfig, ProbeMatrix, ResourceState, vec

_GUARD = 1e-12


# ---------------------------------------------------------------------------
# Sidelobe region
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SidelobeRegion:
    """Integer delay/Doppler bins ``|l| <= l_max, |ν| <= ν_max`` minus the origin."""

    l_max: int
    nu_max: int

    def __post_init__(self):
        if self.l_max < 0 or self.nu_max < 0:
            raise InvalidConfigError("l_max and nu_max must be nonnegative")
        object.__setattr__(self, "l_max", int(self.l_max))
        object.__setattr__(self, "nu_max", int(self.nu_max))

    def check(self, n_subcarriers: int, n_symbols: int) -> None:
        if self.l_max >= n_subcarriers or self.nu_max >= n_symbols:
            raise InvalidConfigError(
                f"region (l_max={self.l_max}, nu_max={self.nu_max}) must satisfy l_max < N, nu_max < M")

    @property
    def is_empty(self) -> bool:
        return self.l_max == 0 and self.nu_max == 0

    def bins(self) -> np.ndarray:
        """All ``(l, ν)`` pairs of the region, shape ``(n_bins, 2)``."""
        ls, vs = np.meshgrid(np.arange(-self.l_max, self.l_max + 1),
                             np.arange(-self.nu_max, self.nu_max + 1), indexing="ij")
        b = np.column_stack([ls.ravel(), vs.ravel()])
        return b[np.any(b != 0, axis=1)]

    def half_bins(self) -> np.ndarray:
        """One representative per conjugate pair: ``l > 0`` or ``l = 0, ν > 0``."""
        b = self.bins()
        keep = (b[:, 0] > 0) | ((b[:, 0] == 0) & (b[:, 1] > 0))
        return b[keep]


# ---------------------------------------------------------------------------
# Ambiguity function
# ---------------------------------------------------------------------------

def _u0_p(state: ResourceState) -> tuple[np.ndarray, np.ndarray]:
    return state.u0, state.p


def af_eval(state: ResourceState, cfg: OfdmConfig, tau, f_d):
    """Continuous AF ``χ(τ, f_d)`` of the sensing REs.

    ``tau`` and ``f_d`` broadcast against each other; a scalar pair returns a
    Python complex.
    """
    u0, p = _u0_p(state)
    n, m = cfg.re_indices()
    tau_a, fd_a = np.broadcast_arrays(np.asarray(tau, float), np.asarray(f_d, float))
    w = u0 * p
    # Separable in (n, m): sum over subcarriers per symbol, then over symbols.
    W = w.reshape(cfg.n_symbols, cfg.n_subcarriers)  # [m, n]
    en = np.exp(-2j * np.pi * np.multiply.outer(tau_a.ravel() * cfg.subcarrier_spacing,
                                                np.arange(cfg.n_subcarriers)))
    em = np.exp(2j * np.pi * np.multiply.outer(fd_a.ravel() * cfg.total_symbol_duration,
                                               np.arange(cfg.n_symbols)))
    val = np.einsum("kn,mn,km->k", en, W, em) / cfg.n_res
    if tau_a.ndim == 0:
        return complex(val[0])
    return val.reshape(tau_a.shape)


def af_bins(u0, p, n_subcarriers, n_symbols, bins) -> np.ndarray:
    """Sampled AF ``ϑ(l, ν)`` at an explicit list of integer bins."""
    N, M = n_subcarriers, n_symbols
    W = (np.asarray(u0, float) * np.asarray(p, float)).reshape(M, N)
    bins = np.asarray(bins, dtype=int).reshape(-1, 2)
    En = np.exp(-2j * np.pi * np.outer(bins[:, 0], np.arange(N)) / N)
    Em = np.exp(2j * np.pi * np.outer(bins[:, 1], np.arange(M)) / M)
    return np.einsum("kn,mn,km->k", En, W, Em) / (M * N)


def af_grid(state: ResourceState, region: SidelobeRegion) -> np.ndarray:
    """Sampled AF on the full rectangle ``|l| <= l_max``, ``|ν| <= ν_max``.

    Returns an array of shape ``(2 l_max + 1, 2 ν_max + 1)``; entry
    ``[l + l_max, ν + ν_max]`` holds ``ϑ(l, ν)``.
    """
    N, M = state.shape
    region.check(N, M)
    ls = np.arange(-region.l_max, region.l_max + 1)
    vs = np.arange(-region.nu_max, region.nu_max + 1)
    W = state.power * state.selections[0]  # [n, m]
    En = np.exp(-2j * np.pi * np.outer(ls, np.arange(N)) / N)
    Em = np.exp(2j * np.pi * np.outer(np.arange(M), vs) / M)
    return En @ W @ Em / (M * N)


def psl(state: ResourceState, region: SidelobeRegion) -> float:
    """Peak ``|ϑ(l, ν)|`` over the sidelobe region (0 for an empty region)."""
    N, M = state.shape
    region.check(N, M)
    if region.is_empty:
        return 0.0
    vals = af_bins(state.u0, state.p, N, M, region.half_bins())
    return float(np.max(np.abs(vals)))


def mainlobe(state: ResourceState) -> float:
    """``ϑ(0, 0) = u_0ᵀp / (MN)``."""
    return float(state.u0 @ state.p) / state.power.size


def sidelobe_terms(n_subcarriers, n_symbols, region: SidelobeRegion) -> np.ndarray:
    """Complex coefficient rows ``c_b`` with ``ϑ(l_b, ν_b) = Σ c_b ⊙ u0 ⊙ p``.

    Only the conjugate-symmetry representatives are returned.
    """
    N, M = n_subcarriers, n_symbols
    bins = region.half_bins()
    n = np.tile(np.arange(N), M)
    m = np.repeat(np.arange(M), N)
    ph = -np.outer(bins[:, 0], n) / N + np.outer(bins[:, 1], m) / M
    return np.exp(2j * np.pi * ph) / (M * N)


def af_time_domain(state: ResourceState, probe: ProbeMatrix, cfg: OfdmConfig, tau: float, f_d: float,
                   samples: int = 256) -> complex:
    """Reference AF by integrating the CP-OFDM waveform in time.

    The baseband signal on symbol ``m`` is
    ``x(t) = N^{-1/2} Σ_n u_{n,m} √p_{n,m} s_{n,m} e^{j2πnΔf(t - mT_sym)}``,
    periodically extended over the cyclic prefix, and
    ``χ(τ, f_d) = (MT)^{-1} Σ_m ∫ x(t) x*(t+τ) e^{j2πf_d t} dt`` over one useful
    period per symbol, evaluated with the midpoint rule. Only valid for
    ``0 <= τ <= T_CP`` where neighbouring symbols do not overlap.

    The time origin is placed at the middle of the first useful period. A
    different origin multiplies χ by a unit-modulus constant; this choice makes
    the constant vanish to first order in ``f_d T`` so that the result can be
    compared against :func:`af_eval` without a phase correction.
    """
    if not 0.0 <= tau <= cfg.cp_duration * (1 + 1e-12):
        raise InvalidConfigError("time-domain oracle requires 0 <= tau <= T_CP")
    N, M = state.shape
    T, Ts, df = cfg.symbol_duration, cfg.total_symbol_duration, cfg.subcarrier_spacing
    amp = state.selections[0] * np.sqrt(state.power) * probe.entries  # [n, m]
    h = T / samples
    rel = (np.arange(samples) + 0.5) * h  # offset within [mT_sym, mT_sym + T]
    total = 0j
    k = np.arange(N)
    e1 = np.exp(2j * np.pi * np.outer(rel, k) * df)
    e2 = np.exp(2j * np.pi * np.outer(rel + tau, k) * df)
    for mi in range(M):
        x1 = e1 @ amp[:, mi] / np.sqrt(N)
        x2 = e2 @ amp[:, mi] / np.sqrt(N)
        t = mi * Ts + rel - 0.5 * T
        total += np.sum(x1 * np.conj(x2) * np.exp(2j * np.pi * f_d * t)) * h
    return complex(total / (M * T))


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolutionReport:
    """Closed-form mainlobe widths and their deviations from the full-grid values."""

    delta_tau: float = float("nan")
    delay_resolution: float = float("nan")
    delta_fd: float = float("nan")
    doppler_resolution: float = float("nan")
    tau0: float = float("nan")
    f0: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@lru_cache(maxsize=64)
def _delay_kernel(N: int) -> np.ndarray:
    n = np.arange(N)
    # S[a, b] = n_b sin(π(n_b - n_a)/N)
    return n[None, :] * np.sin(np.pi * (n[None, :] - n[:, None]) / N)


@lru_cache(maxsize=64)
def _doppler_kernel(M: int) -> np.ndarray:
    m = np.arange(M)
    # S[a, b] = m_b sin(π(m_a - m_b)/M)
    return m[None, :] * np.sin(np.pi * (m[:, None] - m[None, :]) / M)


@dataclass(frozen=True)
class ResolutionTerms:
    """Scalar building blocks of the resolution ratios.

    ``S = u0ᵀp``, ``a_tau = u0ᵀ(φ ⊙ p)``, ``a_v = u0ᵀ(ψ ⊙ p)``,
    ``bq = u0ᵀBu0 > 0`` and ``dq = u0ᵀDu0 < 0``.
    """

    S: float
    a_tau: complex
    a_v: complex
    bq: float
    dq: float
    N: int
    M: int

    @property
    def c_tau(self) -> float:
        return 4.0 * np.pi / self.N

    @property
    def c_v(self) -> float:
        return 4.0 * np.pi / self.M

    @property
    def num_tau(self) -> float:
        return 2.0 * abs(self.a_tau) ** 2 - self.S ** 2

    @property
    def num_v(self) -> float:
        return self.S ** 2 - 2.0 * abs(self.a_v) ** 2

    @property
    def t_tau(self) -> float:
        """``δ_τ / τ_0``."""
        return self.num_tau / (self.c_tau * self.bq)

    @property
    def t_v(self) -> float:
        """``δ_fd / f_0``."""
        return self.num_v / (self.c_v * self.dq)


def phase_vectors(N: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-bin phase ramps ``φ_n = e^{-jπn/N}`` and ``ψ_m = e^{jπm/M}`` in ``vec`` order."""
    n = np.tile(np.arange(N), M)
    m = np.repeat(np.arange(M), N)
    return np.exp(-1j * np.pi * n / N), np.exp(1j * np.pi * m / M)


def resolution_terms(u0, p, N: int, M: int, check: bool = True) -> ResolutionTerms:
    """Evaluate :class:`ResolutionTerms` in ``O(MN + N² + M²)``."""
    w = np.asarray(u0, float) * np.asarray(p, float)
    W = w.reshape(M, N)
    wn = W.sum(axis=0)
    wm = W.sum(axis=1)
    S = float(wn.sum())
    a_tau = complex(wn @ np.exp(-1j * np.pi * np.arange(N) / N))
    a_v = complex(wm @ np.exp(1j * np.pi * np.arange(M) / M))
    bq = float(wn @ _delay_kernel(N) @ wn)
    dq = float(wm @ _doppler_kernel(M) @ wm)
    if check:
        scale = _GUARD * float(w @ w) * w.size
        if not np.isfinite(bq) or abs(bq) <= scale or abs(dq) <= scale:
            raise DegenerateInputError(
                "resolution denominators vanish: the sensing allocation must span at least two "
                "subcarriers and two symbols with nonzero power")
    return ResolutionTerms(S, a_tau, a_v, bq, dq, N, M)


def delay_resolution(state: ResourceState, cfg: OfdmConfig) -> ResolutionReport:
    """Closed-form delay resolution ``Δτ = 1/(NΔf) + 2δ_τ``."""
    t = _terms_or_raise(state, cfg, need="delay")
    delta = t.t_tau * cfg.tau0
    return ResolutionReport(delta_tau=delta, delay_resolution=1.0 / cfg.bandwidth + 2 * delta,
                            tau0=cfg.tau0, f0=cfg.f0)


def doppler_resolution(state: ResourceState, cfg: OfdmConfig) -> ResolutionReport:
    """Closed-form Doppler resolution ``Δf_d = 1/(MT_sym) + 2δ_fd``."""
    t = _terms_or_raise(state, cfg, need="doppler")
    delta = t.t_v * cfg.f0
    return ResolutionReport(delta_fd=delta,
                            doppler_resolution=1.0 / (cfg.n_symbols * cfg.total_symbol_duration) + 2 * delta,
                            tau0=cfg.tau0, f0=cfg.f0)


def resolution(state: ResourceState, cfg: OfdmConfig) -> ResolutionReport:
    """Both axes at once."""
    d = delay_resolution(state, cfg)
    f = doppler_resolution(state, cfg)
    return ResolutionReport(d.delta_tau, d.delay_resolution, f.delta_fd, f.doppler_resolution, cfg.tau0, cfg.f0)


def _terms_or_raise(state, cfg, need):
    N, M = cfg.n_subcarriers, cfg.n_symbols
    if state.shape != (N, M):
        raise InvalidConfigError("state grid does not match the configuration")
    u0, p = state.u0, state.p
    if not np.any(u0 * p):
        raise DegenerateInputError("sensing allocation carries no power")
    t = resolution_terms(u0, p, N, M, check=False)
    w = u0 * p
    scale = _GUARD * float(w @ w) * w.size
    den = t.bq if need == "delay" else t.dq
    if abs(den) <= scale:
        axis = "subcarriers" if need == "delay" else "symbols"
        raise DegenerateInputError(f"{need} resolution undefined: sensing REs occupy a single column of {axis}")
    return t


def measure_3db_width(state: ResourceState, cfg: OfdmConfig, axis: str = "delay",
                      window: float | None = None, points_per_bin: int = 32, rtol: float = 1e-6) -> float:
    """Numeric half-power mainlobe width of the zero-Doppler or zero-delay AF cut.

    The cut ``|χ|²/|χ(0,0)|²`` is scanned outward from the origin on a grid of
    ``points_per_bin`` samples per natural bin (``1/(NΔf)`` or ``1/(MT_sym)``)
    and the first crossing of ``1/2`` is refined with Brent's method. The width
    is twice the crossing offset.
    """
    if axis not in ("delay", "doppler"):
        raise InvalidConfigError("axis must be 'delay' or 'doppler'")
    peak = abs(af_eval(state, cfg, 0.0, 0.0))
    if peak == 0:
        raise DegenerateInputError("AF peak is zero")
    if axis == "delay":
        unit = 1.0 / cfg.bandwidth
        span = window if window is not None else 0.5 / cfg.subcarrier_spacing
        cut = lambda x: abs(af_eval(state, cfg, x, 0.0)) ** 2 / peak ** 2 - 0.5  # noqa: E731
        vec_cut = lambda xs: np.abs(af_eval(state, cfg, xs, np.zeros_like(xs))) ** 2 / peak ** 2 - 0.5  # noqa: E731
    else:
        unit = 1.0 / (cfg.n_symbols * cfg.total_symbol_duration)
        span = window if window is not None else 0.5 / cfg.total_symbol_duration
        cut = lambda x: abs(af_eval(state, cfg, 0.0, x)) ** 2 / peak ** 2 - 0.5  # noqa: E731
        vec_cut = lambda xs: np.abs(af_eval(state, cfg, np.zeros_like(xs), xs)) ** 2 / peak ** 2 - 0.5  # noqa: E731
    step = unit / points_per_bin
    xs = np.arange(1, int(np.ceil(span / step)) + 1) * step
    vals = vec_cut(xs)
    below = np.flatnonzero(vals < 0)
    if below.size == 0:
        raise AmbiguousMainlobeError(f"no half-power crossing on the {axis} axis within {span:.3e}")
    i = below[0]
    lo = 0.0 if i == 0 else xs[i - 1]
    root = brentq(cut, lo, xs[i], xtol=rtol * xs[i] * 1e-2, rtol=4 * np.finfo(float).eps)
    return 2.0 * root


# ---------------------------------------------------------------------------
# Coupling matrices
# ---------------------------------------------------------------------------

def _psd_split(h: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"EVD of {name} failed (cond={np.linalg.cond(h):.3e})") from exc
    pos = (v * np.clip(w, 0, None)) @ v.conj().T
    neg = (v * np.clip(-w, 0, None)) @ v.conj().T
    return pos, neg


@lru_cache(maxsize=32)
def small_factors(N: int, M: int):
    """Per-axis Hermitian factors of ``B_0`` and ``D_0`` and their PSD parts.

    ``B_0 = 1_{M×M} ⊗ b0`` and ``D_0 = d0 ⊗ 1_{N×N}``; because the all-ones
    factor is rank-one PSD, the PSD split of ``B_0`` is the all-ones factor
    times the split of ``b0`` (likewise for ``D_0``).
    Returns ``(b0, b0_pos, b0_neg, d0, d0_pos, d0_neg)``.
    """
    n = np.arange(N)
    phi = np.exp(-1j * np.pi * n / N)
    q1 = np.outer(phi, n * phi.conj())
    b0 = (q1 - q1.conj().T) / 2j
    m = np.arange(M)
    psi = np.exp(1j * np.pi * m / M)
    q2 = np.outer(psi, m * psi.conj())
    d0 = (q2 - q2.conj().T) / 2j
    bp, bn = _psd_split(b0, "B0")
    dp, dn = _psd_split(d0, "D0")
    return b0, bp, bn, d0, dp, dn


@dataclass(frozen=True)
class CouplingMatrices:
    """Full ``MN × MN`` coupling matrices for a given power vector."""

    B: np.ndarray
    D: np.ndarray
    B0: np.ndarray
    D0: np.ndarray
    B_pos: np.ndarray
    B_neg: np.ndarray
    D_pos: np.ndarray
    D_neg: np.ndarray


def coupling_matrices(state: ResourceState) -> CouplingMatrices:
    """Build ``B``, ``D`` (real) and ``B_0``, ``D_0`` (Hermitian) with their PSD parts.

    ``u_0ᵀBu_0 = u_0ᵀ P̃ B_0 P̃ u_0`` and ``u_0ᵀDu_0 = u_0ᵀ P̃ D_0 P̃ u_0`` for
    every real ``u_0`` where ``P̃ = diag(p)``.
    """
    N, M = state.shape
    p = state.p
    if not np.any(p):
        raise DegenerateInputError("coupling matrices need a nonzero power vector")
    n = np.tile(np.arange(N), M)
    m = np.repeat(np.arange(M), N)
    phi = np.exp(-1j * np.pi * n / N)
    psi = np.exp(1j * np.pi * m / M)
    B = np.imag(np.outer(phi * p, p * n * phi.conj()))
    D = np.imag(np.outer(psi * p, p * m * psi.conj()))
    b0, bp, bn, d0, dp, dn = small_factors(N, M)
    onesM = np.ones((M, M))
    onesN = np.ones((N, N))
    return CouplingMatrices(
        B=B, D=D,
        B0=np.kron(onesM, b0), D0=np.kron(d0, onesN),
        B_pos=np.kron(onesM, bp), B_neg=np.kron(onesM, bn),
        D_pos=np.kron(dp, onesN), D_neg=np.kron(dn, onesN),
    )


# ---------------------------------------------------------------------------
# SNR and rate
# ---------------------------------------------------------------------------

def reference_range(cfg: OfdmConfig, l_max: int) -> float:
    """Range of delay bin ``l_max``: ``l_max · c_0 / (2NΔf)``."""
    return l_max * cfg.range_bin


def sensing_gain(cfg: OfdmConfig, range_m: float, mean_rcs: float) -> float:
    """Average round-trip power gain ``λ² ς / ((4π)³ R⁴)``."""
    if range_m <= 0 or mean_rcs <= 0:
        raise InvalidConfigError("range and mean RCS must be positive")
    return cfg.wavelength ** 2 * mean_rcs / ((4 * np.pi) ** 3 * range_m ** 4)


def sensing_snr(state: ResourceState, cfg: OfdmConfig | None = None, *, range_m: float | None = None,
                mean_rcs: float | None = None, alpha: float | None = None,
                noise_power: float | None = None) -> float:
    """Average per-RE sensing SNR ``α u_0ᵀp / (u_0ᵀ1 σ²)``.

    Either pass ``alpha`` directly or ``range_m`` and ``mean_rcs`` with ``cfg``.
    ``noise_power`` defaults to ``cfg.noise_power``.
    """
    if alpha is None:
        if cfg is None or range_m is None or mean_rcs is None:
            raise InvalidConfigError("sensing_snr needs alpha or (cfg, range_m, mean_rcs)")
        alpha = sensing_gain(cfg, range_m, mean_rcs)
    if noise_power is None:
        if cfg is None:
            raise InvalidConfigError("sensing_snr needs noise_power or cfg")
        noise_power = cfg.noise_power
    u0 = state.u0
    count = float(u0.sum())
    if count <= 0:
        raise DegenerateInputError("sensing SNR is undefined without sensing REs")
    return float(alpha * (u0 @ state.p) / (count * noise_power))


def channel_gains(channels, noise_power: float) -> np.ndarray:
    """``|h|²/σ²`` per user in ``vec`` order, shape ``(K, MN)``."""
    H = np.asarray(channels)
    if H.ndim == 2:
        H = H[None]
    return vec(np.abs(H) ** 2) / noise_power


def sum_rate(state: ResourceState, channels, cfg: OfdmConfig | None = None,
             noise_power: float | None = None) -> float:
    """Average sum-rate ``(1/MN) Σ_k Σ_{n,m} log2(1 + |h|² p u_k / σ²)`` in bps/Hz.

    ``channels`` has shape ``(K, N, M)``.
    """
    if noise_power is None:
        if cfg is None:
            raise InvalidConfigError("sum_rate needs noise_power or cfg")
        noise_power = cfg.noise_power
    K = state.n_users
    if K == 0:
        return 0.0
    g = channel_gains(channels, noise_power)
    if g.shape != (K, state.p.size):
        raise InvalidConfigError(f"channels must have shape (K={K}, N, M)")
    x = g * state.u[1:] * state.p[None, :]
    return float(np.sum(np.log2(1 + x)) / state.p.size)


def user_rates(state, channels, noise_power):
    """Per-user average rates, shape ``(K,)``."""
    g = channel_gains(channels, noise_power)
    return np.sum(np.log2(1 + g * state.u[1:] * state.p[None, :]), axis=1) / state.p.size


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_af_csv(grid: np.ndarray, region: SidelobeRegion, path) -> None:
    """Write a sampled-AF grid as rows ``l, nu, re, im, mag, mag_db``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l", "nu", "re", "im", "mag", "mag_db"])
        for i, l in enumerate(range(-region.l_max, region.l_max + 1)):
            for k, v in enumerate(range(-region.nu_max, region.nu_max + 1)):
                z = complex(grid[i, k])
                mag = abs(z)
                db = 20 * np.log10(mag) if mag > 1e-300 else -6000.0
                w.writerow([l, v, repr(z.real), repr(z.imag), repr(mag), repr(float(db))])

"""OFDM numerology, resource-element grids and baseline allocation patterns.

All grids are ``(N, M)`` arrays indexed ``[subcarrier, symbol]``. Whenever a
grid is flattened it is vectorized column by column, i.e. subcarriers are
stacked within each symbol (``vec(U)``), so RE ``(n, m)`` lands at index
``n + N * m``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError

C0 = 299_792_458.0

BASELINE_KINDS = ("TDM", "FDM", "Uniform", "Random", "RadarOnly", "CommOnly")


class ZadoffChuWarning(UserWarning):
    """Raised when a Zadoff-Chu root/length pair lacks ideal autocorrelation."""


def vec(grid: np.ndarray) -> np.ndarray:
    """Column-major vectorization of an ``(..., N, M)`` grid."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        return grid.reshape(-1, order="F")
    return np.stack([vec(g) for g in grid])


def unvec(v: np.ndarray, n_subcarriers: int, n_symbols: int) -> np.ndarray:
    """Inverse of :func:`vec` for one vector or a stack of vectors."""
    v = np.asarray(v)
    if v.ndim == 1:
        return v.reshape((n_subcarriers, n_symbols), order="F")
    return np.stack([unvec(x, n_subcarriers, n_symbols) for x in v])


@dataclass(frozen=True)
class OfdmConfig:
    """Waveform numerology.

    Parameters
    ----------
    n_subcarriers, n_symbols : int
        Grid size ``N x M``.
    subcarrier_spacing : float
        ``Δf`` in Hz.
    carrier_freq : float
        ``f_c`` in Hz.
    cp_duration : float, optional
        Cyclic prefix length in seconds. Defaults to a quarter of the useful
        symbol duration ``T = 1/Δf``.
    noise_psd : float
        ``N_0`` in W/Hz (``-150`` dBm/Hz is ``1e-18`` W/Hz).
    """

    n_subcarriers: int
    n_symbols: int
    subcarrier_spacing: float = 120e3
    carrier_freq: float = 28e9
    cp_duration: float | None = None
    noise_psd: float = 1e-18

    def __post_init__(self):
        if int(self.n_subcarriers) != self.n_subcarriers or self.n_subcarriers < 2:
            raise InvalidConfigError(f"n_subcarriers must be an integer >= 2, got {self.n_subcarriers}")
        if int(self.n_symbols) != self.n_symbols or self.n_symbols < 2:
            raise InvalidConfigError(f"n_symbols must be an integer >= 2, got {self.n_symbols}")
        if not self.subcarrier_spacing > 0:
            raise InvalidConfigError("subcarrier_spacing must be positive")
        if not self.carrier_freq > 0:
            raise InvalidConfigError("carrier_freq must be positive")
        if self.noise_psd < 0:
            raise InvalidConfigError("noise_psd must be nonnegative")
        object.__setattr__(self, "n_subcarriers", int(self.n_subcarriers))
        object.__setattr__(self, "n_symbols", int(self.n_symbols))
        if self.cp_duration is None:
            object.__setattr__(self, "cp_duration", 0.25 / self.subcarrier_spacing)
        if not 0 <= self.cp_duration < self.symbol_duration:
            raise InvalidConfigError("cp_duration must satisfy 0 <= T_CP < T")

    @property
    def N(self) -> int:
        return self.n_subcarriers

    @property
    def M(self) -> int:
        return self.n_symbols

    @property
    def n_res(self) -> int:
        return self.n_subcarriers * self.n_symbols

    @property
    def symbol_duration(self) -> float:
        """Useful symbol duration ``T = 1/Δf``."""
        return 1.0 / self.subcarrier_spacing

    @property
    def total_symbol_duration(self) -> float:
        """``T_sym = T + T_CP``."""
        return self.symbol_duration + self.cp_duration

    @property
    def wavelength(self) -> float:
        return C0 / self.carrier_freq

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def noise_power(self) -> float:
        """``σ² = N_0 Δf`` in W."""
        return self.noise_psd * self.subcarrier_spacing

    @property
    def range_bin(self) -> float:
        """Range spanned by one delay bin, ``c_0 / (2 N Δf)``."""
        return C0 / (2.0 * self.bandwidth)

    @property
    def velocity_bin(self) -> float:
        """Velocity spanned by one Doppler bin, ``λ / (2 M T_sym)``."""
        return self.wavelength / (2.0 * self.n_symbols * self.total_symbol_duration)

    @property
    def tau0(self) -> float:
        """Half of the full-band delay resolution, ``1/(2NΔf)``."""
        return 1.0 / (2.0 * self.bandwidth)

    @property
    def f0(self) -> float:
        """Half of the full-frame Doppler resolution, ``1/(2 M T_sym)``."""
        return 1.0 / (2.0 * self.n_symbols * self.total_symbol_duration)

    def re_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Subcarrier and symbol index of every RE in ``vec`` order."""
        n = np.tile(np.arange(self.n_subcarriers), self.n_symbols)
        m = np.repeat(np.arange(self.n_symbols), self.n_subcarriers)
        return n, m

    def to_dict(self) -> dict:
        return {
            "n_subcarriers": self.n_subcarriers,
            "n_symbols": self.n_symbols,
            "subcarrier_spacing": self.subcarrier_spacing,
            "carrier_freq": self.carrier_freq,
            "cp_duration": self.cp_duration,
            "noise_psd": self.noise_psd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OfdmConfig":
        return cls(**{k: d[k] for k in (
            "n_subcarriers", "n_symbols", "subcarrier_spacing",
            "carrier_freq", "cp_duration", "noise_psd") if k in d})


@dataclass
class ResourceState:
    """Selection grids ``u_k`` (``k = 0`` sensing, ``1..K`` users) and RE powers.

    ``selections`` has shape ``(K+1, N, M)``; ``power`` has shape ``(N, M)``.
    """

    selections: np.ndarray
    power: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        self.selections = np.asarray(self.selections, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.selections.ndim != 3:
            raise InvalidConfigError("selections must have shape (K+1, N, M)")
        if self.power.shape != self.selections.shape[1:]:
            raise InvalidConfigError("power grid shape does not match selections")

    @classmethod
    def from_vectors(cls, u, p, n_subcarriers, n_symbols, relaxed=False):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return cls(unvec(u, n_subcarriers, n_symbols), unvec(np.asarray(p, float), n_subcarriers, n_symbols),
                   relaxed=relaxed)

    @classmethod
    def empty(cls, n_subcarriers, n_symbols, n_users=0):
        return cls(np.zeros((n_users + 1, n_subcarriers, n_symbols)), np.zeros((n_subcarriers, n_symbols)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.power.shape

    @property
    def n_users(self) -> int:
        return self.selections.shape[0] - 1

    @property
    def u0(self) -> np.ndarray:
        """Sensing selection vector ``vec(U_0)``."""
        return vec(self.selections[0])

    @property
    def p(self) -> np.ndarray:
        """Power vector ``vec(A ⊙ A)``."""
        return vec(self.power)

    @property
    def u(self) -> np.ndarray:
        """All selection vectors stacked, shape ``(K+1, MN)``."""
        return vec(self.selections)

    @property
    def sensing_rof(self) -> float:
        return float(self.selections[0].mean())

    def is_boolean(self, atol=0.0) -> bool:
        s = self.selections
        return bool(np.all((np.abs(s) <= atol) | (np.abs(s - 1) <= atol)))

    def assignment_map(self) -> np.ndarray:
        """Entity id per RE (``-1`` unassigned). Requires a Boolean state."""
        if not self.is_boolean(atol=1e-9):
            raise InvalidConfigError("assignment_map needs Boolean selections")
        sel = np.rint(self.selections).astype(int)
        out = np.full(self.shape, -1, dtype=int)
        for k in range(sel.shape[0] - 1, -1, -1):
            out[sel[k] == 1] = k
        return out

    def with_power(self, power) -> "ResourceState":
        return ResourceState(self.selections.copy(), np.asarray(power, float).reshape(self.shape), self.relaxed)

    def copy(self) -> "ResourceState":
        return ResourceState(self.selections.copy(), self.power.copy(), self.relaxed)


@dataclass(frozen=True)
class ProbeMatrix:
    """Unit-modulus radar probe ``S_r`` with per-symbol Zadoff-Chu roots."""

    entries: np.ndarray
    roots: tuple = field(default=())


def zadoff_chu(length: int, root: int = 1) -> np.ndarray:
    """Zadoff-Chu sequence ``exp(-jπ q n(n+1)/N)`` for ``n = 0..N-1``.

    Even lengths or roots sharing a factor with the length are accepted but
    emit :class:`ZadoffChuWarning`, since the periodic autocorrelation is then
    not ideal under this (odd-length) convention.
    """
    if int(length) != length or length < 1:
        raise InvalidConfigError(f"Zadoff-Chu length must be a positive integer, got {length}")
    length = int(length)
    if length % 2 == 0 or math.gcd(int(root), length) != 1:
        warnings.warn(f"Zadoff-Chu (N={length}, q={root}) has no ideal periodic autocorrelation",
                      ZadoffChuWarning, stacklevel=2)
    n = np.arange(length)
    # n(n+1) is always even, so reduce modulo 2N before scaling to keep the
    # phase argument small for long sequences.
    k = (root * n * (n + 1)) % (2 * length)
    return np.exp(-1j * np.pi * k / length)


def probe_matrix(cfg: OfdmConfig, roots=None) -> ProbeMatrix:
    """Build ``S_r``; ``roots`` is a scalar or one root per symbol (default 1)."""
    if roots is None:
        roots = 1
    roots = np.broadcast_to(np.asarray(roots, dtype=int), (cfg.n_symbols,))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZadoffChuWarning)
        cache = {q: zadoff_chu(cfg.n_subcarriers, int(q)) for q in set(roots.tolist())}
    if caught:
        warnings.warn(str(caught[0].message), ZadoffChuWarning, stacklevel=2)
    entries = np.stack([cache[int(q)] for q in roots], axis=1)
    return ProbeMatrix(entries, tuple(int(q) for q in roots))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _lattice_steps(n_res, count, n_sub, n_sym):
    """Subcarrier/symbol strides of an exact 2-D lattice with ``count`` points."""
    if count == 0 or n_res % count:
        return None
    stride = n_res // count
    best = None
    for sn in range(1, stride + 1):
        if stride % sn:
            continue
        sm = stride // sn
        if n_sub % sn or n_sym % sm:
            continue
        score = abs(math.log(sn) - math.log(sm))
        if best is None or score < best[0] or (score == best[0] and sn > best[1]):
            best = (score, sn, sm)
    return None if best is None else best[1:]


def baseline_allocation(cfg: OfdmConfig, kind: str, sensing_fraction: float = 0.5,
                        n_users: int = 1, seed=None, total_power: float | None = None) -> ResourceState:
    """Generate one of the fixed reference allocations.

    ``TDM`` takes a contiguous block of symbols, ``FDM`` a contiguous block of
    subcarriers, ``Uniform`` an evenly strided lattice, ``Random`` uniformly
    drawn REs; ``RadarOnly``/``CommOnly`` give every RE to sensing/users.
    REs not used for sensing go to the users round-robin in ``vec`` order.
    Power is spread uniformly, ``total_power / MN`` per RE (1 W if omitted).
    """
    if kind not in BASELINE_KINDS:
        raise InvalidConfigError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if not 0.0 <= sensing_fraction <= 1.0:
        raise InvalidConfigError("sensing_fraction must lie in [0, 1]")
    N, M = cfg.n_subcarriers, cfg.n_symbols
    n_res = N * M
    count = round_half_up(sensing_fraction * n_res)
    if kind == "RadarOnly":
        count = n_res
    elif kind == "CommOnly":
        count = 0

    sensing = np.zeros(n_res, dtype=bool)
    if kind in ("TDM", "RadarOnly"):
        sensing[:count] = True
    elif kind == "FDM":
        grid = np.zeros((N, M), dtype=bool)
        grid.reshape(-1)[:count] = True  # row-major fill walks symbols within a subcarrier
        sensing = vec(grid)
    elif kind == "Uniform":
        steps = _lattice_steps(n_res, count, N, M)
        if steps is not None:
            sn, sm = steps
            grid = np.zeros((N, M), dtype=bool)
            grid[::sn, ::sm] = True
            sensing = vec(grid)
        elif count:
            idx = np.floor(np.arange(count) * n_res / count).astype(int)
            sensing[idx] = True
    elif kind == "Random":
        rng = np.random.default_rng(seed)
        sensing[rng.choice(n_res, size=count, replace=False)] = True

    u = np.zeros((n_users + 1, n_res))
    u[0, sensing] = 1.0
    if n_users > 0:
        rest = np.flatnonzero(~sensing)
        u[1 + (np.arange(rest.size) % n_users), rest] = 1.0
    p = np.full(n_res, 1.0 if total_power is None else total_power / n_res)
    return ResourceState.from_vectors(u, p, N, M)


@dataclass(frozen=True)
class Violation:
    kind: str
    cell: tuple | None
    value: float
    excess: float


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}


def validate(state: ResourceState, budget: float | None = None, atol: float = 1e-9) -> ValidationReport:
    """Check exclusivity, power sign, power budget and Boolean-ness.

    Returns a report listing every violated cell instead of raising.
    """
    out = []
    occ = state.selections.sum(axis=0)
    for n, m in zip(*np.nonzero(occ > 1 + atol)):
        out.append(Violation("exclusivity", (int(n), int(m)), float(occ[n, m]), float(occ[n, m] - 1)))
    for k, n, m in zip(*np.nonzero((state.selections < -atol) | (state.selections > 1 + atol))):
        v = float(state.selections[k, n, m])
        out.append(Violation("box", (int(k), int(n), int(m)), v, max(-v, v - 1)))
    for n, m in zip(*np.nonzero(state.power < -atol)):
        out.append(Violation("power_sign", (int(n), int(m)), float(state.power[n, m]), float(-state.power[n, m])))
    if budget is not None:
        total = float(state.power.sum())
        if total > budget * (1 + atol):
            out.append(Violation("power_budget", None, total, total - budget))
    if not state.relaxed:
        s = state.selections
        frac = (np.abs(s) > atol) & (np.abs(s - 1) > atol)
        for k, n, m in zip(*np.nonzero(frac)):
            v = float(s[k, n, m])
            out.append(Violation("boolean", (int(k), int(n), int(m)), v, min(abs(v), abs(v - 1))))
    return ValidationReport(out)


def write_allocation_csv(state: ResourceState, path) -> None:
    """Rows are subcarriers, columns symbols; cells hold the entity id or -1."""
    amap = state.assignment_map()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in amap:
            w.writerow([int(v) for v in row])


def read_allocation_csv(path, n_users: int | None = None, power=None) -> ResourceState:
    with open(path, newline="") as fh:
        amap = np.array([[int(v) for v in row] for row in csv.reader(fh) if row])
    K = int(amap.max()) if n_users is None else n_users
    K = max(K, 0)
    sel = np.stack([(amap == k).astype(float) for k in range(K + 1)])
    p = np.ones(amap.shape) if power is None else np.asarray(power, float).reshape(amap.shape)
    return ResourceState(sel, p)


def allocation_to_json(state: ResourceState, cfg: OfdmConfig | None = None) -> dict:
    d = {
        "n_subcarriers": state.shape[0],
        "n_symbols": state.shape[1],
        "n_users": state.n_users,
        "relaxed": state.relaxed,
        "selections": [list(map(float, x)) for x in state.u],
        "power": list(map(float, state.p)),
    }
    if cfg is not None:
        d["config"] = cfg.to_dict()
    return d


def allocation_from_json(d: dict) -> ResourceState:
    return ResourceState.from_vectors(np.asarray(d["selections"], float), np.asarray(d["power"], float),
                                      d["n_subcarriers"], d["n_symbols"], relaxed=d.get("relaxed", False))


def save_allocation_json(state, path, cfg=None) -> None:
    Path(path).write_text(json.dumps(allocation_to_json(state, cfg), indent=1, sort_keys=True) + "\n")

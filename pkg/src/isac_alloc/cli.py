"""Command-line experiment runner.

Configuration is layered: built-in defaults, then the ``--preset``, then the
``--config`` file, then explicit flags. The file is either JSON or a flat
``key = value`` file with optional ``[section]`` headers (section names are
only for readability; keys are global). dB-valued keys (``beta0_db``,
``gamma0_db``, ``noise_psd_dbm_hz``, ``mean_rcs_dbsm``) are converted to
linear units while parsing, and only the linear values are stored.

Every artifact ``name.ext`` is written next to a sidecar ``name.ext.json``
holding the command, the resolved configuration, where each value came
from, and the artifact's SHA-256. Passing a sidecar back through
``--config`` (or ``isac-alloc rerun SIDECAR``) reproduces the same files.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem,
4 numerical failure. Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import alloc_resolution, alloc_sidelobe, sim
from .alloc_common import write_trace_csv
from .errors import InfeasibleError, InvalidConfigError, IsacError, MonotonicityError, NumericalError
from .grid import (BASELINE_KINDS, OfdmConfig, allocation_from_json, allocation_to_json, baseline_allocation,
                   probe_matrix, write_allocation_csv)
from .metrics import SidelobeRegion, af_eval, af_grid, mainlobe, psl, write_af_csv

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("af", "baseline", "solve-res", "solve-psl", "simulate", "sweep")

# key -> (type, default)
SCHEMA = {
    # numerology
    "n_subcarriers": (int, 256), "n_symbols": (int, 128), "subcarrier_spacing": (float, 120e3),
    "carrier_freq": (float, 28e9), "cp_duration": (float, None), "noise_psd": (float, 1e-18),
    # shared problem levels
    "gamma0": (float, 0.1), "eta0": (float, 3.0), "total_power": (float, 1.6e5), "l_max": (int, 4),
    "nu_max": (int, 2), "rho": (float, None), "rho_rel": (float, 0.1), "delta_th": (float, 1e-4),
    "max_iter": (int, 30), "mean_rcs": (float, 10 ** 0.5), "sensing_range": (float, None),
    # resolution variant
    "eps_tau": (float, 0.5), "beta0": (float, 0.01), "psl_mode": (str, "relative"),
    # sidelobe variant
    "tau_th": (float, None), "f_th": (float, None), "tau_factor": (float, 1.2), "f_factor": (float, 1.2),
    # channels
    "n_users": (int, 2), "taps": (int, 4), "path_loss_db": (float, 130.0),
    # allocation input for af / simulate / baseline
    "kind": (str, "Random"), "sensing_fraction": (float, 0.5), "allocation": (str, None),
    # scene / Monte-Carlo
    "targets": (str, None), "scene_file": (str, None), "sweep_kind": (str, "snr_db"), "trials": (int, 100),
    # sweep
    "algorithm": (str, "psl"), "variable": (str, "eta0"), "values": (str, None),
    "seed": (int, None),
}

DB_KEYS = {"beta0_db": ("beta0", 20.0), "gamma0_db": ("gamma0", 10.0),
           "noise_psd_dbm_hz": ("noise_psd", None), "mean_rcs_dbsm": ("mean_rcs", 10.0)}

RES_ONLY = ("eps_tau", "beta0", "psl_mode")
PSL_ONLY = ("tau_th", "f_th", "tau_factor", "f_factor")

PRESETS = {
    "desk": {"n_subcarriers": 16, "n_symbols": 8, "n_users": 2},
    "paper": {"n_subcarriers": 256, "n_symbols": 128},
}


class ConfigError(InvalidConfigError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _convert(key, value):
    if key in DB_KEYS:
        target, factor = DB_KEYS[key]
        v = float(value)
        lin = 10 ** (v / 10) * 1e-3 if factor is None else 10 ** (v / factor)
        return target, lin
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key '{key}'")
    typ = SCHEMA[key][0]
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
        return key, None
    try:
        if typ is int:
            f = float(value)
            if f != int(f):
                raise ValueError
            return key, int(f)
        if typ is float:
            return key, float(value)
        if isinstance(value, (list, tuple)):
            return key, ",".join(str(v) for v in value)
        return key, str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key '{key}' expects {typ.__name__}, got {value!r}") from None


def _normalize(raw: dict) -> dict:
    out = {}
    for k, v in raw.items():
        key, val = _convert(k.strip().lower(), v)
        out[key] = val
    return out


def read_config_file(path) -> tuple[dict, dict | None]:
    """Parse a config file; returns ``(values, sources)`` (sources only for sidecars)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc.msg} at line {exc.lineno}") from None
        if "config" in data and "command" in data:  # a sidecar
            return _normalize(data["config"]), data.get("sources")
        flat = {}
        for k, v in data.items():
            if isinstance(v, dict):
                flat.update(v)
            else:
                flat[k] = v
        return _normalize(flat), None
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {str(exc).splitlines()[0]}") from None
    flat = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            if k in flat:
                raise ConfigError(f"key '{k}' given twice")
            flat[k] = v
    return _normalize(flat), None


def resolve_config(preset, file_values, file_sources, flags) -> tuple[dict, dict]:
    """Merge the layers; returns ``(config, sources)``."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    src = {k: "default" for k in SCHEMA}
    if preset:
        for k, v in PRESETS[preset].items():
            cfg[k], src[k] = v, f"preset:{preset}"
    for k, v in file_values.items():
        cfg[k] = v
        src[k] = (file_sources or {}).get(k, "file")
    for k, v in flags.items():
        cfg[k], src[k] = v, "flag"
    return cfg, src


def ofdm_config(c) -> OfdmConfig:
    return OfdmConfig(c["n_subcarriers"], c["n_symbols"], c["subcarrier_spacing"], c["carrier_freq"],
                      c["cp_duration"], c["noise_psd"])


def _common_kwargs(c):
    return dict(gamma0=c["gamma0"], eta0=c["eta0"], total_power=c["total_power"],
                region=SidelobeRegion(c["l_max"], c["nu_max"]), rho=c["rho"], rho_rel=c["rho_rel"],
                delta_th=c["delta_th"], max_iter=c["max_iter"], mean_rcs=c["mean_rcs"],
                sensing_range=c["sensing_range"])


def resolution_spec(c) -> alloc_resolution.ResolutionSpec:
    return alloc_resolution.ResolutionSpec(eps_tau=c["eps_tau"], beta0=c["beta0"], psl_mode=c["psl_mode"],
                                           **_common_kwargs(c))


def sidelobe_spec(c) -> alloc_sidelobe.SidelobeSpec:
    return alloc_sidelobe.SidelobeSpec(tau_th=c["tau_th"], f_th=c["f_th"], tau_factor=c["tau_factor"],
                                       f_factor=c["f_factor"], **_common_kwargs(c))


def _check_variant(command, c, src):
    other = PSL_ONLY if command == "solve-res" else RES_ONLY if command == "solve-psl" else ()
    if command == "sweep":
        other = PSL_ONLY if c["algorithm"] == "res" else RES_ONLY
    bad = [k for k in other if src.get(k) not in ("default",) and not src[k].startswith("preset")]
    if bad:
        raise ConfigError(f"keys {bad} belong to the other allocation variant")


def _need_seed(c):
    if c["seed"] is None:
        raise ConfigError("this command is randomized and needs an explicit --seed")
    return c["seed"]


def _values(c):
    if not c["values"]:
        raise ConfigError("a sweep needs 'values'")
    try:
        return [float(v) for v in str(c["values"]).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse values {c['values']!r}") from None


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

class Writer:
    """Writes artifacts plus their sidecars into one directory."""

    def __init__(self, out, command, config, sources):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.sources = sources
        self.artifacts = []

    def path(self, name) -> Path:
        return self.out / name

    def done(self, name):
        p = self.path(name)
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        meta = {"command": self.command, "artifact": name, "sha256": digest, "seed": self.config.get("seed"),
                "config": self.config, "sources": self.sources}
        Path(str(p) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        self.artifacts.append(name)

    def json(self, name, obj):
        self.path(name).write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")
        self.done(name)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if np.isfinite(f) else repr(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def _load_allocation(c, cfg, seed):
    if c["allocation"]:
        p = Path(c["allocation"])
        if not p.is_file():
            raise ConfigError(f"allocation file not found: {p}")
        return allocation_from_json(json.loads(p.read_text()))
    kind = c["kind"]
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown allocation kind '{kind}'")
    if kind == "Random":
        seed = _need_seed(c)
    return baseline_allocation(cfg, kind, c["sensing_fraction"], max(c["n_users"], 1), seed=seed,
                               total_power=c["total_power"])


def _scene(c, cfg):
    if c["scene_file"]:
        return sim.TargetScene.from_json(c["scene_file"])
    if c["targets"]:
        items = []
        for chunk in c["targets"].split(";"):
            parts = [float(v) for v in chunk.split(":")]
            if len(parts) != 3:
                raise ConfigError("targets are 'range:velocity:rcs_dbsm' separated by ';'")
            items.append({"range_m": parts[0], "velocity_mps": parts[1], "swerling_mean_dbsm": parts[2]})
        return sim.TargetScene.from_json(items)
    # default: one Swerling I target at 3 range bins (or half the CP range on small grids)
    bins = min(3.0, 0.5 * cfg.cp_duration * cfg.bandwidth)
    return sim.TargetScene([bins * cfg.range_bin], [1 * cfg.velocity_bin], swerling_mean=[10.0], rcs=[None])


def _score(state, cfg, region, channels=None):
    from .metrics import resolution, sensing_snr, sum_rate, reference_range, sensing_gain
    out = {"sensing_rof": float(state.selections[0].mean())}
    try:
        r = resolution(state, cfg)
        out.update(delay_resolution=r.delay_resolution, doppler_resolution=r.doppler_resolution)
    except IsacError:
        out.update(delay_resolution=float("nan"), doppler_resolution=float("nan"))
    ml = mainlobe(state)
    pk = psl(state, region) if not region.is_empty else 0.0
    out["psl_db"] = float(20 * np.log10(pk / ml)) if ml > 0 and pk > 0 else float("-inf")
    try:
        alpha = sensing_gain(cfg, reference_range(cfg, max(region.l_max, 1)), 10 ** 0.5)
        out["sensing_snr"] = sensing_snr(state, alpha=alpha, noise_power=cfg.noise_power)
    except IsacError:
        out["sensing_snr"] = 0.0
    if channels is not None and state.n_users:
        out["sum_rate"] = sum_rate(state, channels[:state.n_users], noise_power=cfg.noise_power)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_af(c, w: Writer):
    cfg = ofdm_config(c)
    region = SidelobeRegion(c["l_max"], c["nu_max"])
    state = _load_allocation(c, cfg, c["seed"])
    grid = af_grid(state, region)
    write_af_csv(grid, region, w.path("af.csv"))
    w.done("af.csv")
    # zero-Doppler and zero-delay cuts over ±2 bins for half-power contour extraction
    x = np.linspace(-2.0, 2.0, 161)
    cut_tau = af_eval(state, cfg, x / cfg.bandwidth, np.zeros_like(x))
    cut_f = af_eval(state, cfg, np.zeros_like(x), x / (cfg.n_symbols * cfg.total_symbol_duration))
    peak = abs(af_eval(state, cfg, 0.0, 0.0))
    with open(w.path("af_cuts.csv"), "w") as fh:
        fh.write("axis,offset_bins,mag_norm\n")
        for name, cut in (("delay", cut_tau), ("doppler", cut_f)):
            for xi, v in zip(x, np.abs(cut) / peak):
                fh.write(f"{name},{xi!r},{float(v)!r}\n")
    w.done("af_cuts.csv")
    w.json("allocation.json", allocation_to_json(state, cfg))
    w.json("summary.json", _score(state, cfg, region))
    return EXIT_OK


def cmd_baseline(c, w: Writer):
    cfg = ofdm_config(c)
    region = SidelobeRegion(c["l_max"], c["nu_max"])
    kinds = [c["kind"]] if c["_explicit_kind"] else list(BASELINE_KINDS)
    if any(k not in BASELINE_KINDS for k in kinds):
        raise ConfigError(f"unknown allocation kind '{c['kind']}'")
    channels = None
    if c["n_users"] > 0 and c["seed"] is not None:
        channels = sim.gen_channels(cfg, c["n_users"], c["taps"], c["seed"], c["path_loss_db"]).H
    rows = []
    for kind in kinds:
        seed = _need_seed(c) if kind == "Random" else None
        st = baseline_allocation(cfg, kind, c["sensing_fraction"], max(c["n_users"], 1), seed=seed,
                                 total_power=c["total_power"])
        write_allocation_csv(st, w.path(f"allocation_{kind}.csv"))
        w.done(f"allocation_{kind}.csv")
        rows.append({"kind": kind, **_score(st, cfg, region, channels)})
    _write_rows(w, "baselines.csv", rows)
    return EXIT_OK


def _write_rows(w, name, rows):
    keys = list(rows[0])
    with open(w.path(name), "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else str(r[k])
                              for k in keys) + "\n")
    w.done(name)


def _solve(c, algorithm):
    cfg = ofdm_config(c)
    seed = _need_seed(c)
    ch = sim.gen_channels(cfg, c["n_users"], c["taps"], seed, c["path_loss_db"]) if c["n_users"] > 0 else None
    H = None if ch is None else ch.H
    if algorithm == "res":
        return alloc_resolution.run(cfg, resolution_spec(c), H), cfg
    return alloc_sidelobe.run(cfg, sidelobe_spec(c), H), cfg


def _emit_result(w, res, cfg):
    write_allocation_csv(res.state, w.path("allocation.csv"))
    w.done("allocation.csv")
    w.json("allocation.json", allocation_to_json(res.state, cfg))
    write_trace_csv(res.trace, w.path("trace.csv"))
    w.done("trace.csv")
    w.json("result.json", res.to_dict())


def cmd_solve(c, w: Writer, algorithm):
    res, cfg = _solve(c, algorithm)
    _emit_result(w, res, cfg)
    if not res.feasible:
        raise InfeasibleError(f"rounded allocation violates {sorted(res.violations)}",
                              constraint=",".join(sorted(res.violations)))
    return EXIT_OK


def cmd_simulate(c, w: Writer):
    cfg = ofdm_config(c)
    seed = _need_seed(c)
    state = _load_allocation(c, cfg, seed)
    if c["allocation"]:
        # an allocation file carries the numerology it was optimized for
        embedded = json.loads(Path(c["allocation"]).read_text()).get("config")
        if embedded:
            cfg = OfdmConfig.from_dict(embedded)
    if state.shape != (cfg.n_subcarriers, cfg.n_symbols):
        raise ConfigError(f"allocation grid {state.shape} does not match the configured "
                          f"{cfg.n_subcarriers}x{cfg.n_symbols} grid")
    scene = _scene(c, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = sim.monte_carlo_rmse(state, cfg, scene, _values(c), sweep=c["sweep_kind"], trials=c["trials"],
                                    seed=seed, probe=probe_matrix(cfg))
    sim.write_rmse_csv(rows, w.path("rmse.csv"), label=c["sweep_kind"])
    w.done("rmse.csv")
    return EXIT_OK


def _sweep_point(args):
    c, algorithm = args
    try:
        res, _ = _solve(c, algorithm)
    except InfeasibleError as exc:
        return {"feasible": False, "error": str(exc).splitlines()[0]}
    m = res.metrics
    return {"feasible": res.feasible, "iterations": res.iterations, "delay_resolution": m["delay_resolution"],
            "doppler_resolution": m["doppler_resolution"], "psl_db": m["psl_db"],
            "sensing_rof": m["sensing_rof"], "sum_rate": m["sum_rate"], "sensing_snr": m["sensing_snr"]}


def cmd_sweep(c, w: Writer, jobs=1):
    var = c["variable"]
    if var not in ("eta0", "l_max", "gamma0", "total_power"):
        raise ConfigError(f"cannot sweep over '{var}'")
    algorithm = c["algorithm"]
    if algorithm not in ("res", "psl"):
        raise ConfigError("algorithm must be 'res' or 'psl'")
    _need_seed(c)
    points = []
    for v in _values(c):
        ci = dict(c)
        ci[var] = int(v) if SCHEMA[var][0] is int else v
        points.append((ci, algorithm))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_sweep_point, points))
    else:
        results = [_sweep_point(p) for p in points]
    keys = ["delay_resolution", "doppler_resolution", "psl_db", "sensing_rof", "sum_rate", "sensing_snr",
            "iterations", "feasible"]
    rows = []
    for (ci, _), r in zip(points, results):
        rows.append({var: float(ci[var]), **{k: r.get(k, float("nan")) for k in keys}})
    _write_rows(w, "sweep.csv", rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


FLAG_KEYS = {
    "n": "n_subcarriers", "m": "n_symbols", "k": "n_users", "eta0": "eta0", "gamma0": "gamma0",
    "gamma0_db": "gamma0_db", "beta0": "beta0", "beta0_db": "beta0_db", "lmax": "l_max", "numax": "nu_max",
    "pt": "total_power", "eps_tau": "eps_tau", "tau_th": "tau_th", "f_th": "f_th", "tau_factor": "tau_factor",
    "f_factor": "f_factor", "max_iter": "max_iter", "rho_rel": "rho_rel", "taps": "taps",
    "path_loss_db": "path_loss_db", "kind": "kind", "rof": "sensing_fraction", "allocation": "allocation",
    "scene": "scene_file", "targets": "targets", "sweep_kind": "sweep_kind", "values": "values",
    "trials": "trials", "variable": "variable", "algorithm": "algorithm", "noise_psd_dbm_hz": "noise_psd_dbm_hz",
    "psl_mode": "psl_mode", "seed": "seed",
}


def build_parser():
    p = _Parser(prog="isac-alloc", description="OFDM ISAC ambiguity metrics and resource allocation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--jobs", type=int, default=1)
        for flag, key in FLAG_KEYS.items():
            s.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    r = sub.add_parser("rerun")
    r.add_argument("sidecar")
    r.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        meta = json.loads(Path(args.sidecar).read_text())
        argv2 = [meta["command"], "--config", args.sidecar, "--out", args.out]
        return run(argv2)
    file_vals, file_src = read_config_file(args.config) if args.config else ({}, None)
    flags = {}
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            k, val = _convert(key, v)
            flags[k] = val
    c, src = resolve_config(args.preset, file_vals, file_src, flags)
    _check_variant(args.command, c, src)
    c_run = dict(c)
    c_run["_explicit_kind"] = src["kind"] != "default"
    cfg = ofdm_config(c)  # validates numerology early
    SidelobeRegion(c["l_max"], c["nu_max"]).check(cfg.n_subcarriers, cfg.n_symbols)
    w = Writer(args.out, args.command, c, src)
    if args.command == "af":
        return cmd_af(c_run, w)
    if args.command == "baseline":
        return cmd_baseline(c_run, w)
    if args.command == "solve-res":
        return cmd_solve(c_run, w, "res")
    if args.command == "solve-psl":
        return cmd_solve(c_run, w, "psl")
    if args.command == "simulate":
        return cmd_simulate(c_run, w)
    return cmd_sweep(c_run, w, args.jobs)


def _fail(kind, exc, code):
    msg = " ".join(str(exc).split())
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        code = run(argv)
    except InfeasibleError as exc:
        code = _fail("infeasible", exc, EXIT_INFEASIBLE)
    except (MonotonicityError, NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        code = _fail("numerical", exc, EXIT_NUMERIC)
    except (InvalidConfigError, IsacError, KeyError, OSError) as exc:
        code = _fail("config", exc, EXIT_CONFIG)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()

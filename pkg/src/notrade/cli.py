"""
Batch front end: ``notrade solve|sweep|scenarios|simulate --config FILE --out DIR``.

The config is an INI file; every key is checked before any computation and
unknown sections or keys are rejected.  Floats are written with 17
significant digits so CSV/JSON output re-parses to the in-memory values.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import model
from .hjbgrid import Grid
from .model import InvalidParamsError, ModelParams
from .policy import Position, PolicyField
from .sim import SimConfig, compare_to_solution, simulate
from .solver import REGION_NAMES, SolveOptions, SolverError, solve

log = logging.getLogger("notrade")

SCHEMA_VERSION = 1
BOUNDARY_COLUMNS = ("scenario", "theta", "p", "eta2", "eta1", "resolution")
POLICY_COLUMNS = ("theta", "p", "z", "u", "region", "pi", "c_ratio")


def _float_list(s):
    return [float(t) for t in s.replace(",", " ").split()]


def _int_list(s):
    return [int(t) for t in s.replace(",", " ").split()]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


# section -> key -> (parser, default, help)
KEYS = {
    "params": {
        "scenario": (int, 1, "base parameter set 1-4; keys below override it"),
        "r": (float, None, "risk-free rate"),
        "alpha1": (float, None, "excess drift of the liquid risky asset"),
        "alpha2": (float, None, "excess drift of the illiquid asset"),
        "sigma1": (float, None, "volatility of the liquid risky asset"),
        "sigma2": (float, None, "volatility of the illiquid asset"),
        "rho": (float, None, "correlation of the two Brownian motions"),
        "lam": (float, None, "purchase cost fraction"),
        "mu": (float, None, "sale cost fraction"),
        "beta": (float, None, "discount rate"),
        "p": (float, 0.3, "CRRA exponent"),
        "theta": (float, 0.8, "liquidity-preference weight"),
        "liquid_asset": (_bool, None, "false removes the liquid risky asset"),
    },
    "grid": {
        "n": (int, 4001, "node count"),
        "z_lo": (_opt_float, None, "lower truncation point"),
        "z_hi": (_opt_float, None, "upper truncation point"),
        "margin": (int, 10, "cells between the domain ends and the grid"),
        "z_floor": (float, -5.0, "lowest z used when the domain is longer"),
    },
    "solve": {
        "tol": (float, 1e-8, "relative residual and update tolerance"),
        "max_iters": (int, 200, "policy-iteration cap"),
        "pi_cap": (float, 50.0, "bound on |pi|"),
        "d_cap": (float, 100.0, "bound on the consumption ratio"),
        "damping": (float, 1.0, "initial relaxation factor"),
        "boundary_mode": (str, "obstacle-pinned", "obstacle-pinned or extrapolated"),
    },
    "sweep": {
        "theta_list": (_float_list, [0.2, 0.4, 0.6, 0.8, 1.0], "theta values (sweep)"),
        "p_list": (_float_list, [-0.3, 0.3], "p values"),
        "scenarios": (_int_list, [1, 2, 3, 4], "scenario numbers (scenarios mode)"),
        "scenario_thetas": (_float_list, [round(0.1 * k, 1) for k in range(1, 11)],
                            "theta values (scenarios mode)"),
    },
    "sim": {
        "dt": (float, 1e-3, "time step in years"),
        "T": (float, 200.0, "horizon in years"),
        "n_paths": (int, 100_000, "number of paths"),
        "seed": (int, 20240601, "master seed"),
        "start_x": (_opt_float, None, "liquid wealth at start (default: NT midpoint, x+y=1)"),
        "start_y": (_opt_float, None, "illiquid wealth at start"),
        "antithetic": (_bool, True, "antithetic pairs"),
        "consumption_scale": (float, 1.0, "multiplier on the optimal consumption ratio"),
    },
    "output": {
        "boundaries": (str, "boundaries.csv", "boundary table file name"),
        "policy": (str, "policy.csv", "policy curve file name"),
        "summary": (str, "summary.json", "run summary file name"),
        "sim": (str, "sim.json", "simulation result file name"),
    },
}


class ConfigError(ValueError):
    pass


def _keys_help() -> str:
    lines = ["config keys ([section] key = value):"]
    for sec, keys in KEYS.items():
        lines.append(f"  [{sec}]")
        for k, (_, default, text) in keys.items():
            lines.append(f"    {k:<18} {text} (default: {default})")
    return "\n".join(lines)


def load_config(path: str | os.PathLike | None) -> dict:
    """Parse and validate the INI config; returns section -> key -> value."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config {path}")
    out = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in KEYS.items()}
    for sec in cp.sections():
        if sec not in KEYS:
            raise ConfigError(f"unknown section [{sec}]")
        for k, raw in cp.items(sec):
            if k not in KEYS[sec]:
                raise ConfigError(f"unknown key {k!r} in [{sec}]")
            try:
                out[sec][k] = KEYS[sec][k][0](raw)
            except ValueError as e:
                raise ConfigError(f"[{sec}] {k}: {e}") from None
    return out


def apply_overrides(cfg: dict, args) -> dict:
    if args.grid_n is not None:
        cfg["grid"]["n"] = args.grid_n
    if args.tol is not None:
        cfg["solve"]["tol"] = args.tol
    if args.seed is not None:
        cfg["sim"]["seed"] = args.seed
    return cfg


def build_params(cfg: dict, scenario: int | None = None, theta=None, p=None) -> ModelParams:
    sec = cfg["params"]
    num = sec["scenario"] if scenario is None else scenario
    if num not in model.SCENARIOS:
        raise ConfigError(f"scenario must be one of {sorted(model.SCENARIOS)}")
    over = {k: v for k, v in sec.items() if k not in ("scenario", "p", "theta") and v is not None}
    return model.scenario(num, p=sec["p"] if p is None else p,
                          theta=sec["theta"] if theta is None else theta, **over)


def build_grid(cfg: dict, params: ModelParams) -> Grid:
    g = cfg["grid"]
    return Grid.default(params, n=g["n"], margin=g["margin"], z_floor=g["z_floor"],
                        z_lo=g["z_lo"], z_hi=g["z_hi"])


def build_options(cfg: dict) -> SolveOptions:
    return SolveOptions(**cfg["solve"])


def validate_config(cfg: dict, mode: str) -> None:
    """Everything that can be checked without solving."""
    cells = _cells(cfg, mode)
    for sc, th, p in cells:
        params = build_params(cfg, sc, th, p)
        report = model.validate(params)
        if not report.ok:
            bad = ", ".join(c.name for c in report.checks if not c.passed)
            raise ConfigError(f"invalid parameters (scenario {sc}, theta {th}, p {p}): {bad}")
        build_grid(cfg, params)
    build_options(cfg)
    if mode == "simulate":
        _sim_config(cfg, None)


def _cells(cfg: dict, mode: str):
    sw = cfg["sweep"]
    base = cfg["params"]["scenario"]
    if mode == "sweep":
        return [(base, th, p) for p in sw["p_list"] for th in sw["theta_list"]]
    if mode == "scenarios":
        return [(sc, th, p) for sc in sw["scenarios"] for p in sw["p_list"]
                for th in sw["scenario_thetas"]]
    return [(base, None, None)]


def _sim_config(cfg: dict, start: Position | None) -> SimConfig:
    s = cfg["sim"]
    kw = dict(dt=s["dt"], T=s["T"], n_paths=s["n_paths"], master_seed=s["seed"],
              antithetic=s["antithetic"], consumption_scale=s["consumption_scale"])
    if start is not None:
        kw["start"] = start
    return SimConfig(**kw)


# -- serialisation -------------------------------------------------------------

def fmt(v) -> str:
    """17 significant digits; integers and strings unchanged."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def to_json(obj, indent: int = 2, _lvl: int = 0) -> str:
    """JSON text with floats at 17 significant digits; non-finite floats become null."""
    pad = " " * (indent * (_lvl + 1))
    end = " " * (indent * _lvl)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format(float(obj), ".17g") if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{to_json(str(k))}: {to_json(v, indent, _lvl + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [f"{pad}{to_json(v, indent, _lvl + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


# -- work units ----------------------------------------------------------------

def _solve_cell(args):
    """Solve one (scenario, theta, p) cell; returns a plain dict (picklable)."""
    cfg, sc, th, p, want_policy = args
    params = build_params(cfg, sc, th, p)
    rec = {"scenario": sc, "theta": params.theta, "p": params.p,
           "params": dataclasses.asdict(params),
           "validation": {c.name: {"passed": c.passed, "slack": c.slack}
                          for c in model.validate(params).checks}}
    try:
        grid = build_grid(cfg, params)
        sol = solve(params, grid, build_options(cfg))
    except (SolverError, InvalidParamsError, ValueError) as e:
        log.error("scenario %s theta %s p %s failed: %s", sc, params.theta, params.p, e)
        rec.update(status="failed", error=str(e), eta2=float("nan"), eta1=float("nan"),
                   resolution=float("nan"))
        return rec
    rec.update(
        status="converged", eta2=sol.eta2, eta1=sol.eta1, resolution=sol.resolution,
        iters=sol.iters, final_residual=sol.final_residual, pi_cap_slack=sol.pi_cap_slack,
        counts=sol.counts(), flags={k: bool(v) for k, v in sol.flags.items()},
        grid={"z_lo": grid.z_lo, "z_hi": grid.z_hi, "n": grid.n, "h": grid.h},
    )
    if want_policy:
        fld = PolicyField(sol, pi_cap=cfg["solve"]["pi_cap"])
        rec["policy_rows"] = [
            (params.theta, params.p, z, u, REGION_NAMES[int(sol.region[k])], pi, c)
            for k, z, u, pi, c in zip(fld.nt_index, fld.z_nt, fld.u_nt, fld.pi_nt, fld.c_ratio_nt)
        ]
    return rec


def _run_cells(cfg, cells, want_policy, jobs):
    work = [(cfg, sc, th, p, want_policy) for sc, th, p in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_solve_cell, work))
    return [_solve_cell(w) for w in work]


def _boundary_rows(recs):
    return [(r["scenario"], r["theta"], r["p"], r["eta2"], r["eta1"], r["resolution"]) for r in recs]


def _summary(mode, cfg, recs, extra=None):
    out = {"schema_version": SCHEMA_VERSION, "mode": mode,
           "config": {k: dict(v) for k, v in cfg.items()},
           "ok": all(r["status"] == "converged" for r in recs),
           "cells": [{k: v for k, v in r.items() if k != "policy_rows"} for r in recs]}
    if extra:
        out.update(extra)
    return out


def run_solve(cfg, out: Path, jobs: int = 1) -> bool:
    recs = _run_cells(cfg, _cells(cfg, "solve"), True, 1)
    o = cfg["output"]
    write_csv(out / o["boundaries"], BOUNDARY_COLUMNS, _boundary_rows(recs))
    write_csv(out / o["policy"], POLICY_COLUMNS, recs[0].get("policy_rows", []))
    summary = _summary("solve", cfg, recs)
    (out / o["summary"]).write_text(to_json(summary) + "\n")
    return summary["ok"]


def run_sweep(cfg, out: Path, jobs: int = 1) -> bool:
    recs = _run_cells(cfg, _cells(cfg, "sweep"), True, jobs)
    o = cfg["output"]
    rows = [row for r in recs for row in r.get("policy_rows", [])]
    write_csv(out / o["policy"], POLICY_COLUMNS, rows)
    write_csv(out / o["boundaries"], BOUNDARY_COLUMNS, _boundary_rows(recs))
    summary = _summary("sweep", cfg, recs)
    (out / o["summary"]).write_text(to_json(summary) + "\n")
    return summary["ok"]


def run_scenarios(cfg, out: Path, jobs: int = 1) -> bool:
    recs = _run_cells(cfg, _cells(cfg, "scenarios"), False, jobs)
    o = cfg["output"]
    write_csv(out / o["boundaries"], BOUNDARY_COLUMNS, _boundary_rows(recs))
    summary = _summary("scenarios", cfg, recs)
    (out / o["summary"]).write_text(to_json(summary) + "\n")
    return summary["ok"]


def run_simulate(cfg, out: Path, jobs: int = 1) -> bool:
    params = build_params(cfg)
    sol = solve(params, build_grid(cfg, params), build_options(cfg))
    fld = PolicyField(sol, pi_cap=cfg["solve"]["pi_cap"])
    s = cfg["sim"]
    if s["start_x"] is None and s["start_y"] is None:
        zm = 0.5 * (sol.eta1 + sol.eta2)
        start = Position(1.0 - zm, zm)
    elif s["start_x"] is None or s["start_y"] is None:
        raise ConfigError("give both start_x and start_y or neither")
    else:
        start = Position(s["start_x"], s["start_y"])
    sc = _sim_config(cfg, start)
    res = simulate(fld, params, sc)
    rep = compare_to_solution(res, fld, start)
    doc = {"schema_version": SCHEMA_VERSION,
           "params": dataclasses.asdict(params),
           "eta2": sol.eta2, "eta1": sol.eta1,
           "sim": {"dt": sc.dt, "T": sc.T, "n_paths": sc.n_paths, "seed": sc.master_seed,
                   "start_x": start.x, "start_y": start.y, "antithetic": sc.antithetic,
                   "consumption_scale": sc.consumption_scale},
           "result": res.to_dict(),
           "consistency": rep.to_dict()}
    o = cfg["output"]
    (out / o["sim"]).write_text(to_json(doc) + "\n")
    ok = res.bankrupt_paths == 0 and rep.verdict in ("consistent", "undetermined")
    summary = {"schema_version": SCHEMA_VERSION, "mode": "simulate", "ok": ok,
               "eta2": sol.eta2, "eta1": sol.eta1, "iters": sol.iters,
               "final_residual": sol.final_residual, "verdict": rep.verdict}
    (out / o["summary"]).write_text(to_json(summary) + "\n")
    return ok


MODES = {"solve": run_solve, "sweep": run_sweep, "scenarios": run_scenarios,
         "simulate": run_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="notrade",
        description="Buy/no-trade/sell boundaries, policy curves and Monte Carlo checks.",
        epilog=_keys_help() + "\n\nenvironment: NOTRADE_LOG sets the log level (default WARNING).",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("mode", choices=sorted(MODES))
    ap.add_argument("--config", required=True, help="INI config file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--grid-n", type=int, default=None, help="override [grid] n")
    ap.add_argument("--tol", type=float, default=None, help="override [solve] tol")
    ap.add_argument("--seed", type=int, default=None, help="override [sim] seed")
    ap.add_argument("--jobs", type=int, default=1, help="concurrent sweep cells")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NOTRADE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        validate_config(cfg, args.mode)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (ConfigError, InvalidParamsError, ValueError) as e:
        print(f"notrade: config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        ok = MODES[args.mode](cfg, out, args.jobs)
    except (SolverError, ConfigError, ValueError) as e:
        print(f"notrade: {args.mode} failed: {e}", file=sys.stderr)
        return 1
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

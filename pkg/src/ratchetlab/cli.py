"""Scenario runner.

    ratchetlab [COMMAND] --config run.yaml [--out DIR] [--seed N] [--paths N] [--quiet]

Every run writes summary.json (schema-versioned, carries the config hash
and the effective tolerances) plus CSV plot data. Exit codes: 0 ok,
2 config error, 3 infeasible input, 4 failed certificate.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml
from jsonschema import Draft7Validator

from . import __version__
from .complete import (KernelSpec, budget_match_riedel, drawdown_formula_check, martingale_check,
                       match_floor_budget, riedel_plan)
from .envelope import ResolutionError, alternative_solution, verify_envelope
from .esssup import (check_drawdown, debut_profile, generalized_inverse, running_esssup,
                     running_esssup_interior, solid_hull_lift)
from .grid import Clock, PathPanel, TimeGrid
from .primal import (ConvergenceError, InfeasibleError, certify_duality, solve_primal_tree,
                     value_surface, verify_foc_regions)
from .tree import TreeModel, alpha, optional_projection, validate_deflator
from .utility import Utility

REPORT_SCHEMA = "ratchetlab.report/1"
COMMANDS = ("esssup-demo", "tree-solve", "certify", "riedel", "envelope", "floor-match",
            "value-surface", "selftest")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CERT = 0, 2, 3, 4

DEFAULT_TOL = {
    "primal": 1e-8,
    "certificate": 1e-8,
    "envelope": 1e-8,
    "match": 1e-12,
    "utility_match": 1e-6,
    "drawdown": 1e-8,
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["command"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tree": {"type": "string"},
                "deflator": {"type": "string"},
                "process": {"type": "array", "items": _num, "minItems": 1},
                "dt": _pos,
                "cells": {"type": "integer", "minimum": 1},
                "kernel": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "theta": _num, "r": _num, "delta_pref": _pos, "dt": _pos, "t_max": _pos,
                        "jump_intensity": {"type": "number", "minimum": 0},
                        "jump_dist": {"enum": ["normal", "exponential"]},
                        "jump_mean": _num, "jump_std": {"type": "number", "minimum": 0},
                        "jump_sign": {"enum": [-1, 1, -1.0, 1.0]},
                        "trunc_tol": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "checkpoints": {"type": "array", "items": _pos},
                    },
                },
            },
        },
        "utility": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"gamma": _pos, "delta_pref": _num, "r": _num},
        },
        "constraint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"lam": {"type": "number", "minimum": 0, "maximum": 1}, "q": _num},
        },
        "budget": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"x": _pos, "y": _pos},
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "paths": {"type": "integer", "minimum": 1},
                "store_paths": {"type": "integer", "minimum": 0},
                "csv_stride": {"type": "integer", "minimum": 1},
                "levels": {"type": "integer", "minimum": 8},
                "x_grid": {"type": "array", "items": _pos, "minItems": 1},
                "q_grid": {"type": "array", "items": _num, "minItems": 1},
                "tolerances": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _pos for k in DEFAULT_TOL},
                },
            },
        },
    },
}


class ConfigError(ValueError):
    pass


class CertificateFailure(RuntimeError):
    pass


# ----------------------------------------------------------------------
# Config handling
# ----------------------------------------------------------------------
def validate_config(doc: Any) -> None:
    errors = sorted(Draft7Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"<file>: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<yaml>: {exc}") from exc
    return {} if doc is None else doc


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def tolerances(cfg: dict) -> dict:
    tol = dict(DEFAULT_TOL)
    tol.update(cfg.get("run", {}).get("tolerances", {}))
    return tol


def _load_tree(cfg: dict, base: Path):
    ref = cfg.get("model", {}).get("tree")
    if ref is None:
        raise ConfigError("model.tree: required for this command")
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        try:
            text = resources.files("ratchetlab").joinpath("data", f"{name}.json").read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"model.tree: no bundled tree {name!r}") from exc
    else:
        p = Path(ref)
        p = p if p.is_absolute() else base / p
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"model.tree: {exc}") from exc
    try:
        tree, procs = TreeModel.from_json(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model.tree: {exc}") from exc
    name = cfg["model"].get("deflator", "Z")
    if name not in procs:
        raise ConfigError(f"model.deflator: process {name!r} not in tree file")
    try:
        Z = validate_deflator(tree, procs[name])
    except ValueError as exc:
        raise ConfigError(f"model.deflator: {exc}") from exc
    return tree, Z


def _utility(cfg: dict) -> Utility:
    u = cfg.get("utility", {})
    return Utility(float(u.get("gamma", 1.0)), float(u.get("delta_pref", 0.0)), float(u.get("r", 0.0)))


def _constraint(cfg: dict):
    c = cfg.get("constraint", {})
    return float(c.get("lam", 1.0)), float(c.get("q", 0.0))


def _need(cfg: dict, block: str, key: str):
    try:
        return cfg[block][key]
    except KeyError:
        raise ConfigError(f"{block}.{key}: required for command {cfg['command']!r}") from None


def _kernel(cfg: dict) -> KernelSpec:
    k = dict(cfg.get("model", {}).get("kernel", {}))
    k.pop("checkpoints", None)
    try:
        return KernelSpec(seed=int(cfg.get("run", {}).get("seed", 0)), **k)
    except ValueError as exc:
        raise ConfigError(f"model.kernel: {exc}") from exc


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------
def _clean(obj):
    """JSON-safe, deterministic values (non-finite floats become strings)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def emit_report(results: dict, out: Path) -> List[Path]:
    """Write summary.json and one CSV per table; returns the written paths.

    results = {"summary": {...}, "tables": {name: {"columns": [...], "rows": [...]}}}
    """
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "summary.json"
    p.write_text(json.dumps(_clean(results.get("summary", {})), indent=2, sort_keys=True) + "\n")
    written.append(p)
    for name, table in sorted(results.get("tables", {}).items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table["columns"])
        for row in table["rows"]:
            w.writerow([_cell(v) for v in row])
        p = out / f"{name}.csv"
        p.write_text(buf.getvalue())
        written.append(p)
    return written


def _nodes_table(tree: TreeModel, c, dual, labels) -> dict:
    rows = [(u, int(tree.depth[u]), float(c[u]), float(dual[u]), str(labels[u])) for u in range(tree.n_nodes)]
    return {"columns": ["node_id", "depth", "c", "dual", "label"], "rows": rows}


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def _solve(cfg, base, tol):
    tree, Z = _load_tree(cfg, base)
    u = _utility(cfg)
    lam, q = _constraint(cfg)
    x = float(_need(cfg, "budget", "x"))
    sol = solve_primal_tree(tree, Z, u, x, q, lam, tol=tol["primal"])
    return tree, Z, u, sol


def cmd_tree_solve(cfg, base, tol):
    tree, Z, u, sol = _solve(cfg, base, tol)
    foc = verify_foc_regions(sol, tree, Z, u, tol["certificate"])
    dual = u.dU(tree.time, sol.c)
    summary = {"u_hat": sol.u_hat, "y": sol.y, "r": sol.r, "x": sol.x, "q": sol.q, "lam": sol.lam,
               "iterations": sol.iterations, "kkt": sol.kkt, "alpha": alpha(tree, Z),
               "foc_valid": foc["valid"]}
    return summary, {"nodes": _nodes_table(tree, sol.c, dual, foc["labels"])}, True


def cmd_certify(cfg, base, tol):
    tree, Z, u, sol = _solve(cfg, base, tol)
    cert = certify_duality(sol, tree, Z, u, tol["certificate"])
    summary = {"u_hat": sol.u_hat, "y": sol.y, "x": sol.x, "q": sol.q, "lam": sol.lam,
               "certificate": cert.summary()}
    summary["root_tail_dual"] = float(optional_projection(tree, cert.delta_hat)[0])
    summary["root_tail_yZ"] = float(optional_projection(tree, cert.yZ)[0])
    return summary, {"nodes": _nodes_table(tree, sol.c, cert.delta_hat, cert.labels)}, cert.valid


def cmd_envelope(cfg, base, tol):
    tree, Z = _load_tree(cfg, base)
    u = _utility(cfg)
    lam, q = _constraint(cfg)
    if lam != 1.0:
        raise ConfigError("constraint.lam: the envelope route covers the ratchet case lam = 1 only")
    b = cfg.get("budget", {})
    if "y" in b:
        y = float(b["y"])
    elif "x" in b:
        y = solve_primal_tree(tree, Z, u, float(b["x"]), 0.0, 1.0, tol=tol["primal"]).y
    else:
        raise ConfigError("budget: envelope needs budget.y or budget.x")
    m = int(cfg.get("run", {}).get("levels", 512))
    try:
        res = alternative_solution(tree, Z, u, y, q=q, m=m)
    except ResolutionError as exc:
        raise CertificateFailure(str(exc)) from exc
    env = verify_envelope(tree, Z, u, y, res["sweep"].values, tol["envelope"])
    labels = np.where(env["increase"], "increase", "flat")
    summary = {"y": y, "q": q, "x": res["x"], "eta": res["eta"], "sup_diff": res["sup_diff"],
               "agrees": res["agrees"], "envelope_inequality": env["inequality"],
               "envelope_equality": env["equality"], "envelope_valid": env["valid"], "levels": m}
    ok = bool(res["agrees"] and env["valid"])
    sw = res["sweep"]
    sweep = {"columns": ["level"] + [f"node_{u}" for u in range(tree.n_nodes)],
             "rows": [(float(l), *map(int, r)) for l, r in zip(sw.levels, sw.reached)]}
    tables = {"nodes": _nodes_table(tree, res["c"], env["lhs"] - env["rhs"], labels), "sweep": sweep}
    return summary, tables, ok


def cmd_floor_match(cfg, base, tol):
    tree, Z = _load_tree(cfg, base)
    u = _utility(cfg)
    lam, q = _constraint(cfg)
    if q <= 0 or lam <= 0:
        raise ConfigError("constraint: floor-match needs q > 0 and lam in (0, 1]")
    x_target = float(_need(cfg, "budget", "x"))
    m = match_floor_budget(x_target, q, lam, tree, Z, u, rel_tol=tol["match"])
    direct = solve_primal_tree(tree, Z, u, x_target, q, lam, tol=tol["primal"])
    gap = abs(m["utility"] - direct.u_hat)
    summary = {"x_target": x_target, "x": m["x"], "pi": m["pi"], "utility": m["utility"],
               "direct_utility": direct.u_hat, "utility_gap": gap, "q": q, "lam": lam,
               "alpha": alpha(tree, Z)}
    labels = np.where(np.abs(m["c"] - direct.c) <= 1e-6 * max(1.0, float(np.max(direct.c))), "match", "differs")
    ok = gap <= tol["utility_match"]
    return summary, {"nodes": _nodes_table(tree, m["c"], direct.c, labels)}, ok


def cmd_value_surface(cfg, base, tol):
    tree, Z = _load_tree(cfg, base)
    u = _utility(cfg)
    lam, _ = _constraint(cfg)
    run = cfg.get("run", {})
    xs = np.asarray(_need(cfg, "run", "x_grid"), float)
    qs = np.asarray(run.get("q_grid", [0.0]), float)
    a = alpha(tree, Z)
    bad = [(x, q) for x in xs for q in qs if x <= a * lam * q]
    if bad:
        raise InfeasibleError(f"grid point (x={bad[0][0]}, q={bad[0][1]}) is outside the feasible cone")
    vs = value_surface(tree, Z, u, xs, qs, lam, tol=tol["certificate"] * 100)
    rows = []
    for i, x in enumerate(xs):
        for j, q in enumerate(qs):
            rows.append((float(x), float(q), vs["u"][i, j], vs["y"][i, j], vs["r"][i, j]))
    summary = {"lam": lam, "alpha": a, "concavity_violation": vs["concavity_violation"],
               "in_Lstar": vs["in_Lstar"], "fd_in_Lstar": vs["fd_in_Lstar"],
               "conjugacy_residual": vs["conjugacy_residual"]}
    ok = bool(vs["in_Lstar"] and vs["fd_in_Lstar"] and vs["concavity_violation"] <= 1e-8
              and vs["conjugacy_residual"] <= 1e-6 * max(1.0, float(np.abs(vs["u"]).max())))
    return summary, {"surface": {"columns": ["x", "q", "u", "y", "r"], "rows": rows}}, ok


def cmd_esssup_demo(cfg, base, tol):
    model = cfg.get("model", {})
    lam, q = _constraint(cfg)
    if "process" in model:
        vals = np.asarray(model["process"], float)
    else:
        rng = np.random.default_rng(int(cfg.get("run", {}).get("seed", 0)))
        n = int(model.get("cells", 32))
        vals = np.round(np.cumsum(rng.normal(size=n)) + 5.0, 3)
    dt = float(model.get("dt", 1.0))
    grid = TimeGrid.uniform(vals.size, dt)
    c = PathPanel(vals[None, :], grid, Clock.lebesgue(grid))
    bar = running_esssup(c).values[0]
    bar_in = running_esssup_interior(c).values[0]
    lifted = solid_hull_lift(c, lam, q).values[0]
    ok_mask, worst = check_drawdown(c, lam, q)
    prof = debut_profile(c)
    back = generalized_inverse(prof)[0]
    round_trip = float(np.max(np.abs(back - bar)))
    rows = [(k, float(grid.left[k]), vals[k], bar[k], bar_in[k], lifted[k], bool(ok_mask[0, k]))
            for k in range(vals.size)]
    summary = {"cells": int(vals.size), "lam": lam, "q": q, "drawdown_violation": worst,
               "debut_round_trip": round_trip}
    table = {"columns": ["cell", "t", "c", "running_esssup", "running_esssup_interior", "lifted", "drawdown_ok"],
             "rows": rows}
    return summary, {"cells": table}, round_trip == 0.0


def cmd_riedel(cfg, base, tol):
    spec = _kernel(cfg)
    u = _utility(cfg)
    if u.delta_pref != spec.delta_pref or u.r != spec.r:
        u = Utility(u.gamma, spec.delta_pref, spec.r)
    run = cfg.get("run", {})
    n_paths = int(run.get("paths", 1000))
    store = int(run.get("store_paths", 4))
    stride = int(run.get("csv_stride", 21))
    b = cfg.get("budget", {})
    try:
        if "x" in b:
            plan = budget_match_riedel(spec, u, float(b["x"]), n_paths, store=store)
        elif "y" in b:
            plan = riedel_plan(spec, u, float(b["y"]), n_paths, store=store)
        else:
            raise ConfigError("budget: riedel needs budget.x or budget.y")
    except ValueError as exc:
        raise ConfigError(f"model.kernel: {exc}") from exc
    summary = plan.summary()
    checkpoints = cfg.get("model", {}).get("kernel", {}).get("checkpoints", [1.0, 5.0])
    mc = martingale_check(spec, min(n_paths, 10_000), tuple(checkpoints))
    summary["martingale"] = mc
    summary["kernel"] = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    rows = []
    if store:
        st = plan.stored
        panel = plan.panel()
        Zp = panel.like(st["Z"])
        dd = drawdown_formula_check(panel, plan.y, Zp, 1.0, u, tol["drawdown"])
        summary["drawdown_formula_residual"] = dd["max_residual"]
        # at lam = 1 the regimes collapse to c = cbar; label where the plan rises
        run_inf = st["running_inf"]
        rises = np.ones_like(run_inf, dtype=bool)
        rises[:, 1:] = run_inf[:, 1:] < run_inf[:, :-1]
        idx = np.unique(np.r_[np.arange(0, panel.grid.n_cells, stride), panel.grid.n_cells - 1])
        for i in range(st["c"].shape[0]):
            for k in idx:
                rows.append((i, float(st["t"][k]), st["Z"][i, k], run_inf[i, k], st["c"][i, k],
                             "increase" if rises[i, k] else "flat"))
    ok = bool(plan.envelope_inequality <= tol["envelope"] and plan.envelope_equality <= tol["envelope"]
              and plan.monotone_violations == 0)
    table = {"columns": ["scenario", "t", "Z", "running_inf", "c", "label"], "rows": rows}
    return summary, {"paths": table}, ok


def cmd_selftest(cfg, base, tol):
    from .selftest import run_selftest
    results = run_selftest(seed=int(cfg.get("run", {}).get("seed", 0)))
    rows = [(name, bool(r["ok"]), r["detail"]) for name, r in results.items()]
    ok = all(r["ok"] for r in results.values())
    return {"checks": {k: v["ok"] for k, v in results.items()}}, \
        {"selftest": {"columns": ["check", "ok", "detail"], "rows": rows}}, ok


HANDLERS = {
    "esssup-demo": cmd_esssup_demo,
    "tree-solve": cmd_tree_solve,
    "certify": cmd_certify,
    "riedel": cmd_riedel,
    "envelope": cmd_envelope,
    "floor-match": cmd_floor_match,
    "value-surface": cmd_value_surface,
    "selftest": cmd_selftest,
}


def run(cfg: dict, out: Path, base: Path = Path("."), quiet: bool = True) -> int:
    """Execute one scenario and write its report. Returns the exit status."""
    validate_config(cfg)
    tol = tolerances(cfg)
    header = {"schema": REPORT_SCHEMA, "version": __version__, "command": cfg["command"],
              "config_hash": config_hash(cfg), "tolerances": tol}
    try:
        summary, tables, ok = HANDLERS[cfg["command"]](cfg, base, tol)
    except InfeasibleError as exc:
        emit_report({"summary": {**header, "status": "infeasible", "error": str(exc)}}, out)
        if not quiet:
            print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CertificateFailure, ConvergenceError) as exc:
        emit_report({"summary": {**header, "status": "certificate_failed", "error": str(exc)}}, out)
        if not quiet:
            print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERT
    status = "ok" if ok else "certificate_failed"
    emit_report({"summary": {**header, "status": status, "result": summary}, "tables": tables}, out)
    if not quiet:
        print(json.dumps(_clean({"command": cfg["command"], "status": status, "out": str(out)})))
    return EXIT_OK if ok else EXIT_CERT


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="ratchetlab", description=__doc__.splitlines()[0])
    ap.add_argument("command", nargs="?", choices=COMMANDS)
    ap.add_argument("--config", help="YAML scenario file")
    ap.add_argument("--out", help="output directory (default ./out/<command>)")
    ap.add_argument("--seed", type=int, help="overrides run.seed")
    ap.add_argument("--paths", type=int, help="overrides run.paths")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args(argv)
    try:
        cfg = copy.deepcopy(load_config(args.config))
        if not isinstance(cfg, dict):
            raise ConfigError("<root>: config must be a mapping")
        if args.command:
            if cfg.get("command", args.command) != args.command:
                raise ConfigError(f"command: config says {cfg['command']!r}, CLI says {args.command!r}")
            cfg["command"] = args.command
        if args.seed is not None:
            cfg.setdefault("run", {})["seed"] = args.seed
        if args.paths is not None:
            cfg.setdefault("run", {})["paths"] = args.paths
        validate_config(cfg)
        out = Path(args.out) if args.out else Path("out") / cfg["command"]
        base = Path(args.config).resolve().parent if args.config else Path.cwd()
        return run(cfg, out, base, quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

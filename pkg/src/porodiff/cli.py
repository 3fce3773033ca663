"""Command-line front end: config-driven, reproducible runs.

Every run resolves its JSON config (defaults materialized, unknown keys
rejected), writes the artifacts plus a manifest.json carrying the resolved
config and its fingerprint, and uses exit codes 0 (ok), 2 (config), 3
(solver), 4 (budget) so sweeps stay scriptable. Reruns of a manifest are
byte-identical; --threads parallelizes independent runs without touching
numerical results.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import cell as cell_mod
from . import convergence as conv_mod
from . import fem
from . import geometry as geo
from . import kinetics as kin_mod
from . import macro as macro_mod
from . import micro as micro_mod
from .errors import (BudgetExceededError, ConfigError, InvalidGeometryError,
                     PorodiffError, ResourceLimitError,
                     UnknownNameError, UnsupportedDimensionError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_BUDGET = 4


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_INITIAL_KINDS = ("zero", "constant", "bump", "sine")

_SCHEMA = {
    "geometry": {
        "inclusion": dict,
        "h": float,
    },
    "domain": {
        "rectangles": list,
    },
    "coefficients": {
        "d1": object,
        "d2": object,
        "d3": object,
    },
    "kinetics": str,
    "cell": {
        "h": float,
        "s_grid": list,
        "lambda_macro": float,
        "midpoint_tol": object,
        "exchange_values": list,
    },
    "macro": {
        "h": float,
        "dt": float,
        "t_end": float,
        "theta": float,
        "positivity": str,
        "snapshot_every": int,
        "initial": dict,
        "forced_b": object,
        "forced_d0": object,
        "variant": bool,
    },
    "micro": {
        "epsilon": float,
        "h_cell": object,
        "dt": float,
        "t_end": float,
        "scaling": str,
        "positivity": str,
        "snapshot_every": int,
        "initial": dict,
        "solver_method": str,
    },
    "sweep": {
        "epsilons": list,
        "dt": float,
        "t_end": float,
        "macro_h": float,
        "scaling": str,
        "snapshot_every": int,
        "initial": dict,
    },
    "output": {
        "snapshot_fields": bool,
    },
    "seed": int,
}

_DEFAULTS = {
    "geometry": {"inclusion": {"shape": "disc", "center": [0.5, 0.5],
                               "radius": 0.25}, "h": 0.05},
    "domain": {"rectangles": [[0.0, 0.0, 1.0, 1.0]]},
    "coefficients": {"d1": 1.0, "d2": 1.0, "d3": 1.0},
    "kinetics": "zero",
    "cell": {"h": 0.05, "s_grid": [0.0, 0.5, 1.0, 2.0], "lambda_macro": 2.0,
             "midpoint_tol": None, "exchange_values": [0.0, 0.5, 1.0, 10.0]},
    "macro": {"h": 0.0625, "dt": 1e-3, "t_end": 0.05, "theta": 1.0,
              "positivity": "monitor", "snapshot_every": 1,
              "initial": {}, "forced_b": None, "forced_d0": None,
              "variant": False},
    "micro": {"epsilon": 0.25, "h_cell": None, "dt": 1e-3, "t_end": 0.05,
              "scaling": "fast_exchange", "positivity": "monitor",
              "snapshot_every": 1, "initial": {}, "solver_method": "auto"},
    "sweep": {"epsilons": [0.25, 0.125, 0.0625], "dt": 1e-3, "t_end": 0.1,
              "macro_h": 0.03125, "scaling": "fast_exchange",
              "snapshot_every": 2, "initial": {}},
    "output": {"snapshot_fields": False},
    "seed": 0,
}

_DEFAULT_INITIAL = {
    "c1": {"kind": "bump", "amplitude": 1.0},
    "c2": {"kind": "bump", "amplitude": 1.0},
    "c3": {"kind": "bump", "amplitude": 1.0},
}

_COMMAND_SECTIONS = {
    "validate": ("geometry", "kinetics", "seed"),
    "mesh": ("geometry", "seed"),
    "cell-tensor": ("geometry", "coefficients", "cell", "seed"),
    "btable": ("geometry", "coefficients", "cell", "kinetics", "seed"),
    "macro": ("geometry", "domain", "coefficients", "cell", "kinetics",
              "macro", "output", "seed"),
    "micro": ("geometry", "domain", "coefficients", "kinetics", "micro",
              "output", "seed"),
    "sweep": ("geometry", "domain", "coefficients", "cell", "kinetics",
              "sweep", "output", "seed"),
    "tensor-suite": ("geometry", "coefficients", "cell", "seed"),
}


def _check_keys(mapping, allowed, path):
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}{key!r}")


def resolve_config(raw, command):
    """Validate against the schema and materialize all defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    sections = _COMMAND_SECTIONS[command]
    _check_keys(raw, sections, "")
    resolved = {}
    for section in sections:
        spec = _SCHEMA[section]
        default = _DEFAULTS[section]
        value = raw.get(section, default)
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {section!r} must be an object")
            _check_keys(value, spec, f"{section}.")
            merged = json.loads(json.dumps(default))
            merged.update(value)
            if "initial" in merged:
                init = dict(_DEFAULT_INITIAL)
                for fname, fval in merged["initial"].items():
                    if fname not in ("c1", "c2", "c3"):
                        raise ConfigError(
                            f"unknown initial field {section}.initial.{fname!r}")
                    if not isinstance(fval, dict) or \
                            set(fval) - {"kind", "amplitude"}:
                        raise ConfigError(
                            f"initial data {fname!r} must set kind/amplitude")
                    kind = fval.get("kind", "bump")
                    if kind not in _INITIAL_KINDS:
                        raise ConfigError(f"unknown initial kind {kind!r}")
                    init[fname] = {"kind": kind,
                                   "amplitude": float(fval.get("amplitude", 1.0))}
                merged["initial"] = init
            resolved[section] = merged
        else:
            resolved[section] = value
    return resolved


def _initial_closure(spec):
    kind = spec["kind"]
    amp = spec["amplitude"]
    if kind == "zero":
        return lambda x, y: np.zeros_like(np.asarray(x, float))
    if kind == "constant":
        return lambda x, y: np.full_like(np.asarray(x, float), amp)
    if kind == "bump":
        return lambda x, y: amp * 16.0 * x * (1 - x) * y * (1 - y)
    if kind == "sine":
        return lambda x, y: amp * np.sin(np.pi * x) * np.sin(np.pi * y)
    raise ConfigError(f"unknown initial kind {kind!r}")


def _coefficient(value):
    if isinstance(value, (int, float)):
        return fem.CoefficientField.isotropic(float(value))
    if isinstance(value, list):
        return fem.CoefficientField.constant(np.asarray(value, dtype=float))
    raise ConfigError(f"coefficient must be scalar or 2x2 matrix, got {value!r}")


def _inclusion(cfg):
    try:
        incl = geo.InclusionSpec.from_config(cfg)
        incl.validate()
        return incl
    except InvalidGeometryError:
        raise
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad inclusion config: {exc}") from exc


def _domain(cfg):
    return geo.RectUnion.of(*cfg["rectangles"])


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(outdir, command, resolved):
    manifest = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "fingerprint": conv_mod.config_fingerprint(resolved),
    }
    _write_json(manifest, os.path.join(outdir, "manifest.json"))
    return manifest


def write_field(path, name, values):
    with open(path, "w") as f:
        f.write(f"field v1 {name} {len(values)}\n")
        for v in values:
            f.write(f"{float(v)!r}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate(cfg, outdir, args):
    kin = kin_mod.parse_kinetics(cfg["kinetics"])
    report = kin_mod.validate(kin)
    geo_ok = True
    geo_msg = "ok"
    try:
        _inclusion(cfg["geometry"]["inclusion"])
    except InvalidGeometryError as exc:
        geo_ok = False
        geo_msg = str(exc)
    out = {"kinetics": report.as_dict(),
           "geometry": {"passed": geo_ok, "message": geo_msg},
           "passed": report.passed and geo_ok}
    _write_json(out, os.path.join(outdir, "validate.json"))
    for check in report.checks:
        status = "pass" if check.passed else "FAIL"
        print(f"{status} {check.name} (worst {check.worst_value:.3e})")
    print(("pass" if geo_ok else "FAIL") + f" geometry ({geo_msg})")
    return EXIT_OK


def cmd_mesh(cfg, outdir, args):
    incl = _inclusion(cfg["geometry"]["inclusion"])
    mesh = geo.build_unit_cell_mesh(incl, cfg["geometry"]["h"])
    geo.write_poromesh(mesh, os.path.join(outdir, "cell.poromesh"))
    stats = {
        "n_nodes": mesh.n_nodes,
        "n_triangles": mesh.n_triangles,
        "area": mesh.area,
        "gamma_length": mesh.marked_length(geo.EdgeMarker.GAMMA),
        "gamma_loops": geo.count_marked_loops(mesh),
    }
    _write_json(stats, os.path.join(outdir, "mesh_stats.json"))
    print(f"cell mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return EXIT_OK


def _cell_context(cfg):
    incl = _inclusion(cfg["geometry"]["inclusion"])
    mesh = geo.build_unit_cell_mesh(incl, cfg["cell"]["h"])
    return cell_mod.CellContext.from_mesh(mesh)


def cmd_cell_tensor(cfg, outdir, args):
    ctx = _cell_context(cfg)
    d3 = _coefficient(cfg["coefficients"]["d3"])
    tensor, _ = cell_mod.scalar_tensor_with_check(ctx, d3)
    cell_mod.write_tensor_json(tensor, os.path.join(outdir, "d0.json"))
    print(f"d0 = {tensor.matrix.tolist()} (cross check "
          f"{tensor.cross_check_err:.2e})")
    return EXIT_OK


def cmd_btable(cfg, outdir, args):
    ctx = _cell_context(cfg)
    d1 = _coefficient(cfg["coefficients"]["d1"])
    d2 = _coefficient(cfg["coefficients"]["d2"])
    kin = kin_mod.parse_kinetics(cfg["kinetics"])
    table = cell_mod.tabulate_b(ctx, d1, d2, kin.h, cfg["cell"]["s_grid"],
                                midpoint_tol=cfg["cell"]["midpoint_tol"])
    cell_mod.write_table_json(table, os.path.join(outdir, "btable.json"))
    print(f"btable: {len(table.s)} samples, midpoint error "
          f"{table.midpoint_error:.3e}")
    return EXIT_OK


def cmd_tensor_suite(cfg, outdir, args):
    report = conv_mod.tensor_suite(
        inclusion=_inclusion(cfg["geometry"]["inclusion"]),
        h=cfg["cell"]["h"],
        d1=_coefficient(cfg["coefficients"]["d1"]),
        d2=_coefficient(cfg["coefficients"]["d2"]),
        d3=_coefficient(cfg["coefficients"]["d3"]),
        exchange_values=tuple(cfg["cell"]["exchange_values"]))
    _write_json(report, os.path.join(outdir, "suite.json"))
    for check in report["checks"]:
        print(("pass" if check["passed"] else "FAIL")
              + f" {check['name']} ({check['value']:.3e})")
    return EXIT_OK if report["passed"] else EXIT_SOLVER


def _macro_pieces(cfg):
    domain = _domain(cfg["domain"])
    kin = kin_mod.parse_kinetics(cfg["kinetics"])
    mcfg = cfg["macro"]
    forced_b = mcfg["forced_b"]
    forced_d0 = mcfg["forced_d0"]
    lam = cfg["cell"]["lambda_macro"]
    if (forced_b is None) != (forced_d0 is None):
        raise ConfigError("forced_b and forced_d0 must be set together")
    if forced_b is not None and forced_d0 is not None:
        d0 = np.asarray(forced_d0, dtype=float)
        table = cell_mod.DispersionTable.constant(
            np.asarray(forced_b, dtype=float), s_max=lam)
        ctx = None
        gamma_len, cell_area = 0.0, 1.0
        if kin.y_dependent:
            ctx = _cell_context(cfg)
            gamma_len, cell_area = ctx.gamma_length, ctx.area
    else:
        ctx = _cell_context(cfg)
        d1 = _coefficient(cfg["coefficients"]["d1"])
        d2 = _coefficient(cfg["coefficients"]["d2"])
        d3 = _coefficient(cfg["coefficients"]["d3"])
        tensor, _ = cell_mod.scalar_tensor_with_check(ctx, d3)
        d0 = tensor.matrix
        table = cell_mod.tabulate_b(ctx, d1, d2, kin.h, cfg["cell"]["s_grid"],
                                    midpoint_tol=cfg["cell"]["midpoint_tol"])
        gamma_len, cell_area = ctx.gamma_length, ctx.area
    return domain, kin, d0, table, ctx, gamma_len, cell_area


def cmd_macro(cfg, outdir, args):
    domain, kin, d0, table, ctx, gamma_len, cell_area = _macro_pieces(cfg)
    mcfg = cfg["macro"]
    mesh = geo.build_macro_mesh(domain, mcfg["h"])
    x, y = mesh.nodes.T
    init = {k: _initial_closure(v)(x, y) for k, v in mcfg["initial"].items()}
    if mcfg["variant"]:
        d1 = _coefficient(cfg["coefficients"]["d1"])
        d2 = _coefficient(cfg["coefficients"]["d2"])
        ctx2 = ctx or _cell_context(cfg)
        t1, _ = cell_mod.scalar_tensor_with_check(ctx2, d1)
        t2, _ = cell_mod.scalar_tensor_with_check(ctx2, d2)
        vcfg = macro_mod.VariantConfig(
            dt=mcfg["dt"], t_end=mcfg["t_end"], d1=t1.matrix, d2=t2.matrix,
            d3=d0, kinetics=kin, gamma_length=ctx2.gamma_length,
            cell_area=ctx2.area,
            positivity=macro_mod.PositivityPolicy(mcfg["positivity"]),
            snapshot_every=mcfg["snapshot_every"], cell_ctx=ctx2)
        solver = macro_mod.MacroVariantSolver(mesh, vcfg)
        state = macro_mod.VariantState(0.0, init["c1"], init["c2"], init["c3"])
        traj = solver.run(state)
    else:
        config = macro_mod.MacroConfig(
            dt=mcfg["dt"], t_end=mcfg["t_end"], d0=d0, btable=table,
            kinetics=kin, gamma_length=gamma_len, cell_area=cell_area,
            theta=mcfg["theta"], lambda_macro=cfg["cell"]["lambda_macro"],
            positivity=macro_mod.PositivityPolicy(mcfg["positivity"]),
            snapshot_every=mcfg["snapshot_every"], cell_ctx=ctx)
        solver = macro_mod.MacroSolver(mesh, config)
        c0 = 0.5 * (init["c1"] + init["c2"])
        state = macro_mod.MacroState(0.0, c0, init["c3"])
        traj = solver.run(state)
    traj.write_csv(os.path.join(outdir, "trajectory.csv"))
    if cfg["output"]["snapshot_fields"]:
        for name in traj.field_names:
            t, fields = traj.snapshots[-1]
            write_field(os.path.join(outdir, f"final_{name}.field"),
                        name, fields[name])
    print(f"macro run: {len(traj.times) - 1} steps, "
          f"events={len(traj.events)}")
    return EXIT_OK


def cmd_micro(cfg, outdir, args):
    domain = _domain(cfg["domain"])
    kin = kin_mod.parse_kinetics(cfg["kinetics"])
    incl = _inclusion(cfg["geometry"]["inclusion"])
    mcfg = cfg["micro"]
    eps = mcfg["epsilon"]
    h_cell = mcfg["h_cell"] if mcfg["h_cell"] is not None else eps / 8.0
    spec = geo.EpsilonDomainSpec(domain, eps, incl)
    mesh = geo.build_epsilon_mesh(spec, h_cell, node_cap=args.budget_nodes)
    config = micro_mod.MicroConfig(
        dt=mcfg["dt"], t_end=mcfg["t_end"],
        d1=_coefficient(cfg["coefficients"]["d1"]),
        d2=_coefficient(cfg["coefficients"]["d2"]),
        d3=_coefficient(cfg["coefficients"]["d3"]),
        kinetics=kin, scaling=micro_mod.Scaling(mcfg["scaling"]),
        positivity=macro_mod.PositivityPolicy(mcfg["positivity"]),
        snapshot_every=mcfg["snapshot_every"],
        solver_method=mcfg["solver_method"])
    init = mcfg["initial"]
    state = micro_mod.initial_state(
        mesh, _initial_closure(init["c1"]), _initial_closure(init["c2"]),
        _initial_closure(init["c3"]))
    solver = micro_mod.MicroSolver(mesh, eps, config)
    traj = solver.run(state)
    traj.write_csv(os.path.join(outdir, "trajectory.csv"))
    micro_mod.write_gamma_gap_csv(traj, os.path.join(outdir, "gamma_gap.csv"))
    if cfg["output"]["snapshot_fields"]:
        t, fields = traj.snapshots[-1]
        for name in traj.field_names:
            write_field(os.path.join(outdir, f"final_{name}.field"),
                        name, fields[name])
    print(f"micro run (eps={eps}): {mesh.n_nodes} nodes, "
          f"{len(traj.times) - 1} steps, events={len(traj.events)}")
    return EXIT_OK


def cmd_sweep(cfg, outdir, args):
    scfg = cfg["sweep"]
    init = scfg["initial"]
    problem = conv_mod.SweepProblem(
        inclusion=_inclusion(cfg["geometry"]["inclusion"]),
        cell_h=cfg["cell"]["h"],
        d1=_coefficient(cfg["coefficients"]["d1"]),
        d2=_coefficient(cfg["coefficients"]["d2"]),
        d3=_coefficient(cfg["coefficients"]["d3"]),
        kinetics=kin_mod.parse_kinetics(cfg["kinetics"]),
        init_c1=_initial_closure(init["c1"]),
        init_c2=_initial_closure(init["c2"]),
        init_c3=_initial_closure(init["c3"]),
        dt=scfg["dt"], t_end=scfg["t_end"], macro_h=scfg["macro_h"],
        scaling=micro_mod.Scaling(scfg["scaling"]),
        s_grid=tuple(cfg["cell"]["s_grid"]),
        lambda_macro=cfg["cell"]["lambda_macro"],
        snapshot_every=scfg["snapshot_every"],
        node_budget=args.budget_nodes,
        domain=_domain(cfg["domain"]),
        config_dict=cfg)
    report = conv_mod.run_sweep(problem, scfg["epsilons"],
                                threads=args.threads,
                                keep_trajectories=True)
    trajectories = report.meta.pop("trajectories")
    macro_traj = report.meta.pop("macro_trajectory")
    _write_json(report.as_json_dict(), os.path.join(outdir, "report.json"))
    with open(os.path.join(outdir, "report.csv"), "w") as f:
        f.write(report.csv_text())
    macro_traj.write_csv(os.path.join(outdir, "macro_trajectory.csv"))
    for eps, traj in zip(report.epsilons, trajectories):
        tag = f"{eps:g}".replace(".", "p")
        traj.write_csv(os.path.join(outdir, f"micro_trajectory_eps{tag}.csv"))
        micro_mod.write_gamma_gap_csv(
            traj, os.path.join(outdir, f"gamma_gap_eps{tag}.csv"))
    print("sweep errors:")
    for name, vals in sorted(report.errors.items()):
        print(f"  {name}: " + " ".join(f"{v:.6f}" for v in vals))
    return EXIT_OK


_COMMANDS = {
    "validate": cmd_validate,
    "mesh": cmd_mesh,
    "cell-tensor": cmd_cell_tensor,
    "btable": cmd_btable,
    "macro": cmd_macro,
    "micro": cmd_micro,
    "sweep": cmd_sweep,
    "tensor-suite": cmd_tensor_suite,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="porodiff",
        description="Periodic-homogenization toolkit for coupled "
                    "reaction-diffusion in perforated media.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel independent runs (never changes output)")
    parser.add_argument("--budget-nodes", type=int,
                        default=geo.DEFAULT_NODE_CAP,
                        help="cap on projected mesh nodes")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        resolved = resolve_config(raw, args.command)
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, args.command, resolved)
        return _COMMANDS[args.command](resolved, args.out, args)
    except (ConfigError, InvalidGeometryError, UnknownNameError,
            UnsupportedDimensionError, ValueError) as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExceededError, ResourceLimitError) as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except PorodiffError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

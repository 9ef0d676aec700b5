"""Command-line entry point: batch runs, config handling, artifact emission.

Subcommands: solve, dual, berg, critical-b, perturb, sweep, converge,
continuity.  Options come from flags, optionally seeded by a flat TOML file
(``--config``); explicit flags win.  Every run writes a machine-readable
``report.json`` (schema-versioned, deterministic: no timestamps, sorted
keys, atomic rename) plus CSV traces and SVG line drawings into the output
directory.  ``BERG_LAB_OUT`` overrides the output directory.

Exit codes: 0 success, 1 solver failure, 2 invalid configuration,
3 assertion failure when ``--assert`` is passed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .berg import check_berg
from .experiments import (
    MeshParams,
    aspect_ratio_sweep,
    convergence_study,
    critical_b,
    dual_continuity_test,
    perturbation_study,
)
from .fem import SolverError, l2_norm, nodal_facet_trace, solve_laplace
from .geometry import inner_facet, make_domain, GeometryError
from .meshgen import MeshError, build_mesh, dump_svg, dump_text
from .singular import (
    SingularError,
    build_dual_solution,
    extract_coefficient_dual,
    facet_integral_of_dual,
    level_set,
)
from .svgplot import outline_with_polylines_svg, profile_svg

SCHEMA_VERSION = 1
COMMANDS = ("solve", "dual", "berg", "critical-b", "perturb", "sweep",
            "converge", "continuity")


@dataclass
class RunConfig:
    command: str
    r1: float = 1.0
    r2: float = 1.0
    lambda0: float = 2.0
    eps: float = 0.0
    a: float = 1.0
    b: float = 1.0
    n_base: int = 8
    grading_ratio: float = 1.2
    bands: int = 8
    levels: int = 2
    tol: float = 1e-10
    output_dir: str = "berglab-out"
    assert_results: bool = False
    # command-specific; empty eps_grid means the command default
    factors: tuple = (0.6, 0.8, 1.0, 1.2, 1.4)
    eps_grid: tuple = ()
    ratios: tuple = (0.5, 1.0, 2.0)
    case: str = "manufactured-smooth"
    compact_margin: float = None

    def mesh_params(self) -> MeshParams:
        return MeshParams(n_base=self.n_base, grading_ratio=self.grading_ratio,
                          bands=self.bands, levels=self.levels)


class ConfigError(ValueError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="TOML file with flat keys matching the flags")
    common.add_argument("--r1", type=float, help="inner half-width (> 0), default 1")
    common.add_argument("--r2", type=float, help="inner half-height (> 0), default 1")
    common.add_argument("--lambda0", type=float, help="outer similarity ratio (> 1), default 2")
    common.add_argument("--eps", type=float, help="inner-width perturbation (>= 0), default 0")
    common.add_argument("--a", type=float, help="flux on horizontal inner facets, default 1")
    common.add_argument("--b", type=float, help="flux on vertical inner facets, default 1")
    common.add_argument("--n-base", dest="n_base", type=int, help="intervals per half-span, default 8")
    common.add_argument("--grading-ratio", dest="grading_ratio", type=float,
                        help="geometric corner grading factor, default 1.2")
    common.add_argument("--bands", type=int, help="graded bands per corner, default 8")
    common.add_argument("--levels", type=int, help="uniform refinements, default 2")
    common.add_argument("--tol", type=float, help="solver relative residual, default 1e-10")
    common.add_argument("--output-dir", dest="output_dir", type=str,
                        help="artifact directory, default ./berglab-out (env BERG_LAB_OUT overrides)")
    common.add_argument("--assert", dest="assert_results", action="store_true",
                        help="exit 3 if the run's qualitative checks fail")

    parser = argparse.ArgumentParser(
        prog="berglab",
        description="Laplace solves, dual singular solutions, and facet-monotonicity "
                    "diagnostics on rectangular annuli")
    parser.add_argument("--version", action="version", version=f"berglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve and dump the field")
    sub.add_parser("dual", parents=[common], help="dual singular solution, level set, class")
    sub.add_parser("berg", parents=[common], help="facet monotonicity check for (a, b)")
    sub.add_parser("critical-b", parents=[common], help="critical vertical datum, both routes")
    p = sub.add_parser("perturb", parents=[common], help="domain-widening instability study")
    p.add_argument("--eps-grid", dest="eps_grid", type=float, nargs="+",
                   help="widenings as fractions of r1, default 0.02..0.10")
    p = sub.add_parser("sweep", parents=[common], help="aspect-ratio sweep of b*/a")
    p.add_argument("--ratios", type=float, nargs="+", help="r2/r1 values, default 0.5 1 2")
    p = sub.add_parser("converge", parents=[common], help="convergence study")
    p.add_argument("--case", type=str, default=None,
                   choices=["manufactured-smooth", "symmetric-regular", "detuned-singular"])
    p = sub.add_parser("continuity", parents=[common], help="dual continuity under widening")
    p.add_argument("--eps-grid", dest="eps_grid", type=float, nargs="+",
                   help="decreasing widenings as fractions of r1")
    p.add_argument("--compact-margin", dest="compact_margin", type=float,
                   help="corner exclusion radius of the compact")
    return parser


def parse_config(argv=None) -> RunConfig:
    """Build a validated RunConfig from flags (optionally seeded by TOML)."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    values = {}
    if args.config is not None:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file {args.config}: {exc}") from exc
        for key, val in data.items():
            norm = key.replace("-", "_")
            if norm not in RunConfig.__dataclass_fields__:
                raise ConfigError(f"config file {args.config}: unknown key {key!r}")
            values[norm] = tuple(val) if isinstance(val, list) else val
    for key, val in vars(args).items():
        if key in ("config",) or val is None:
            continue
        if key in ("eps_grid", "ratios", "factors") and not isinstance(val, tuple):
            val = tuple(val)
        values[key] = val
    values.setdefault("command", args.command)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if not (cfg.r1 > 0 and cfg.r2 > 0):
        raise ConfigError(f"r1 and r2 must be positive, got {cfg.r1}, {cfg.r2}")
    if not cfg.lambda0 > 1:
        raise ConfigError(f"lambda0 must exceed 1, got {cfg.lambda0}")
    if cfg.eps < 0:
        raise ConfigError(f"eps must be nonnegative, got {cfg.eps}")
    if cfg.n_base < 2:
        raise ConfigError(f"n_base must be >= 2, got {cfg.n_base}")
    if cfg.grading_ratio < 1:
        raise ConfigError(f"grading_ratio must be >= 1, got {cfg.grading_ratio}")
    if cfg.levels < 0 or cfg.bands < 0:
        raise ConfigError("levels and bands must be nonnegative")
    if not 0 < cfg.tol < 1:
        raise ConfigError(f"tol must lie in (0, 1), got {cfg.tol}")
    if cfg.command == "critical-b" and cfg.a <= 0:
        raise ConfigError("critical-b needs a > 0")
    if cfg.command in ("perturb", "continuity") and cfg.eps_grid:
        if any(g <= 0 for g in cfg.eps_grid):
            raise ConfigError("eps grid entries must be positive")


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _check_finite(obj, path="report"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value at {path}")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_report(out_dir: str, payload: dict) -> str:
    _check_finite(payload)
    path = os.path.join(out_dir, "report.json")
    _atomic_write(path, json.dumps(payload, sort_keys=True, indent=2,
                                   default=_json_default) + "\n")
    return path


def _write_csv(out_dir: str, name: str, header: str, rows) -> str:
    lines = [header]
    for row in rows:
        lines.append(",".join(f"{v!r}" if isinstance(v, str) else repr(float(v))
                              for v in row))
    path = os.path.join(out_dir, name)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def _config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("assert_results")
    d.pop("output_dir")
    for k, v in list(d.items()):
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def config_hash(cfg: RunConfig) -> str:
    """Short deterministic digest of the run parameters, used to name
    experiment data files (cache-friendly)."""
    blob = json.dumps(_config_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:8]


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _cmd_solve(cfg: RunConfig, out: str):
    domain = make_domain(cfg.r1, cfg.r2, cfg.lambda0, cfg.eps)
    mesh = build_mesh(domain, cfg.n_base, cfg.grading_ratio, cfg.levels, cfg.bands)
    u = solve_laplace(mesh, cfg.a, cfg.b, tol_rel=cfg.tol)
    _write_csv(out, "field.csv", "x,y,value",
               [(x, y, v) for (x, y), v in zip(mesh.nodes, u.values)])
    for idx in (1, 4):
        s, vals, _ = nodal_facet_trace(u, inner_facet(idx))
        _write_csv(out, f"trace_gamma{idx}.csv", "s,value", zip(s, vals))
    dump_svg(mesh, os.path.join(out, "mesh.svg"))
    dump_text(mesh, os.path.join(out, "mesh.txt"))
    umax = float(u.values.max())
    results = {
        "num_nodes": mesh.num_nodes,
        "num_triangles": mesh.num_triangles,
        "u_min": float(u.values.min()),
        "u_max": umax,
        "l2_norm": l2_norm(u),
    }
    checks = [("positivity", results["u_min"] >= -1e-8 * max(umax, 1e-300))]
    return results, checks


def _cmd_dual(cfg: RunConfig, out: str):
    domain = make_domain(cfg.r1, cfg.r2, cfg.lambda0, cfg.eps)
    mesh = build_mesh(domain, cfg.n_base, cfg.grading_ratio, cfg.levels, cfg.bands)
    dual = build_dual_solution(domain, mesh, tol=cfg.tol)
    ls = level_set(dual)
    rows = []
    for k, comp in enumerate(ls.components):
        rows.extend((k, x, y) for x, y in comp.points)
    _write_csv(out, "levelset.csv", "component,x,y", rows)
    outline_with_polylines_svg(domain, [c.points for c in ls.components],
                               os.path.join(out, "levelset.svg"))
    integrals = {f"gamma{i}": facet_integral_of_dual(dual, i) for i in (1, 2, 3, 4)}
    results = {
        "kappa": dual.kappa,
        "cutoff_radius": dual.cutoff_radius,
        "l2_norm": dual.l2_norm_composite(),
        "facet_integrals": integrals,
        "classification": ls.classification,
        "num_components": len(ls.components),
        "c_dual_for_data": extract_coefficient_dual(dual, cfg.a, cfg.b),
    }
    checks = [
        ("classification_A3", ls.classification == "A3"),
        ("four_components", len(ls.components) == 4),
        ("normalized", abs(results["l2_norm"] - 1.0) <= 1e-8),
        ("sign_structure", integrals["gamma1"] < 0 < integrals["gamma4"]),
    ]
    return results, checks


def _cmd_berg(cfg: RunConfig, out: str):
    domain = make_domain(cfg.r1, cfg.r2, cfg.lambda0, cfg.eps)
    mesh = build_mesh(domain, cfg.n_base, cfg.grading_ratio, cfg.levels, cfg.bands)
    u = solve_laplace(mesh, cfg.a, cfg.b, tol_rel=cfg.tol)
    report = check_berg(u, a=cfg.a, b=cfg.b)
    for idx in (1, 4):
        s, coord, q, keep = report.facet_profiles[idx]
        _write_csv(out, f"berg_gamma{idx}.csv", "s,coordinate,monotonicity,kept",
                   [(si, ci, qi, float(ki)) for si, ci, qi, ki in zip(s, coord, q, keep)])
        profile_svg(s, q, os.path.join(out, f"berg_gamma{idx}.svg"))
    results = {
        "holds": report.holds,
        "weak_holds": report.weak_berg_holds,
        "margin": report.margin,
        "excluded_radius": report.excluded_radius,
        "num_violations": len(report.violations),
        "violations": [
            {"facet": v.facet_index, "arclength": v.arclength,
             "position": v.position, "value": v.value}
            for v in report.violations[:200]
        ],
    }
    return results, []


def _cmd_critical_b(cfg: RunConfig, out: str):
    res = critical_b(cfg.r1, cfg.r2, cfg.lambda0, cfg.a, cfg.mesh_params())
    _write_csv(out, f"critical_b_history-{config_hash(cfg)}.csv",
               "level,b_star_dual,b_star_fit", res.history)
    results = {
        "b_star_dual": res.b_star_dual,
        "b_star_fit": res.b_star_fit,
        "relative_gap": res.relative_gap,
        "alpha1": res.alpha1,
        "beta1": res.beta1,
        "mesh_levels": res.mesh_levels,
    }
    checks = [("cross_method_2pct", res.relative_gap <= 0.02)]
    return results, checks


def _cmd_perturb(cfg: RunConfig, out: str):
    fractions = cfg.eps_grid or (0.02, 0.04, 0.06, 0.08, 0.10)
    grid = np.asarray(fractions, dtype=float) * cfg.r1
    ps = perturbation_study(cfg.r1, cfg.r2, cfg.lambda0, cfg.a, eps_grid=grid,
                            mesh_params=cfg.mesh_params())
    _write_csv(out, f"perturbation-{config_hash(cfg)}.csv",
               "eps,c_dual,c_fit,berg_failed",
               [(e, c, cf, float(bf)) for e, c, cf, bf in
                zip(ps.eps_grid, ps.c_of_eps, ps.c_fit_of_eps, ps.berg_failed)])
    ratios = ps.c_of_eps[-3:] / ps.eps_grid[-3:]
    stab = float(ratios.max() - ratios.min()) / abs(float(ratios.mean()))
    results = {
        "eps_grid": list(map(float, ps.eps_grid)),
        "c_of_eps": list(map(float, ps.c_of_eps)),
        "c_fit_of_eps": list(map(float, ps.c_fit_of_eps)),
        "berg_failed": [bool(x) for x in ps.berg_failed],
        "violated_facets": [list(f) for f in ps.violated_facets],
        "slope_estimate": ps.slope_estimate,
        "independent_limit": ps.independent_limit,
        "corrected_limit": ps.corrected_limit,
        "pairing_rate": ps.pairing_rate,
        "agreement": ps.agreement,
        "agreement_corrected": ps.agreement_corrected,
        "stabilization": stab,
    }
    checks = [
        ("slope_stabilizes_25pct", stab <= 0.25),
        ("pairing_negative", ps.pairing_rate < 0),
        ("corrected_limit_15pct", ps.agreement_corrected <= 0.15),
    ]
    return results, checks


def _cmd_sweep(cfg: RunConfig, out: str):
    rows = aspect_ratio_sweep(cfg.ratios, cfg.lambda0, cfg.mesh_params())
    _write_csv(out, f"sweep-{config_hash(cfg)}.csv",
               "ratio,b_star_dual,b_star_fit,relative_gap",
               [(r.ratio, r.b_star_dual, r.b_star_fit, r.relative_gap) for r in rows])
    if len(rows) >= 2:
        profile_svg([r.ratio for r in rows], [r.b_star_dual for r in rows],
                    os.path.join(out, f"sweep-{config_hash(cfg)}.svg"))
    results = {"rows": [{"ratio": r.ratio, "b_star_dual": r.b_star_dual,
                         "b_star_fit": r.b_star_fit, "relative_gap": r.relative_gap}
                        for r in rows]}
    checks = []
    for r in rows:
        if r.ratio == 1.0:
            checks.append(("square_ratio_within_1pct", abs(r.b_star_dual - 1.0) <= 0.01))
    return results, checks


def _cmd_converge(cfg: RunConfig, out: str):
    res = convergence_study(cfg.case, cfg.levels, cfg.mesh_params())
    _write_csv(out, f"convergence-{config_hash(cfg)}.csv", "h,metric",
               zip(res.h_values, res.metrics))
    results = {
        "case": res.case,
        "h_values": list(map(float, res.h_values)),
        "metrics": list(map(float, res.metrics)),
        "estimated_order": res.estimated_order,
        "monotone_decreasing": res.monotone_decreasing,
        "final_ratio": res.final_ratio,
    }
    checks = []
    if res.case == "manufactured-smooth":
        checks.append(("energy_order", 0.9 <= res.estimated_order <= 1.2))
    elif res.case == "symmetric-regular":
        checks.append(("coefficient_decreasing", bool(res.monotone_decreasing)))
    else:
        checks.append(("coefficient_stabilizes", 0.95 <= res.final_ratio <= 1.05))
    return results, checks


def _cmd_continuity(cfg: RunConfig, out: str):
    grid = tuple(sorted(cfg.eps_grid or (0.08, 0.04, 0.02, 0.01), reverse=True))
    res = dual_continuity_test(cfg.r1, cfg.r2, cfg.lambda0, eps_grid=grid,
                               compact_margin=cfg.compact_margin,
                               mesh_params=cfg.mesh_params())
    _write_csv(out, f"continuity-{config_hash(cfg)}.csv", "eps,sup_deviation",
               zip(res.eps_grid, res.deviations))
    results = {
        "eps_grid": list(map(float, res.eps_grid)),
        "deviations": list(map(float, res.deviations)),
        "compact_margin": res.compact_margin,
        "n_samples": res.n_samples,
        "floor": res.floor,
        "monotone_up_to_floor": res.monotone_up_to_floor(),
    }
    checks = [("monotone_up_to_floor", res.monotone_up_to_floor())]
    return results, checks


_RUNNERS = {
    "solve": _cmd_solve,
    "dual": _cmd_dual,
    "berg": _cmd_berg,
    "critical-b": _cmd_critical_b,
    "perturb": _cmd_perturb,
    "sweep": _cmd_sweep,
    "converge": _cmd_converge,
    "continuity": _cmd_continuity,
}


def run(cfg: RunConfig) -> int:
    """Execute a command, write artifacts, return the exit code."""
    out = os.environ.get("BERG_LAB_OUT", cfg.output_dir)
    os.makedirs(out, exist_ok=True)
    try:
        results, checks = _RUNNERS[cfg.command](cfg, out)
    except (SolverError, SingularError) as exc:
        print(f"berglab: solver failure: {exc}", file=sys.stderr)
        return 1
    except (GeometryError, MeshError, ValueError) as exc:
        print(f"berglab: invalid configuration: {exc}", file=sys.stderr)
        return 2
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command,
        "config_hash": config_hash(cfg),
        "config": _config_dict(cfg),
        "results": results,
        "checks": {name: bool(ok) for name, ok in checks},
    }
    path = write_report(out, payload)
    print(f"berglab: wrote {path}")
    if cfg.assert_results and not all(ok for _, ok in checks):
        failed = [name for name, ok in checks if not ok]
        print(f"berglab: assertion failure: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except (ConfigError, GeometryError) as exc:
        print(f"berglab: invalid configuration: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())

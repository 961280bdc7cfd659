"""Command-line experiment runner.

Every subcommand is turned into an experiment config (validated against
`config.CONFIG_SCHEMA`), executed, and reported as JSON on stdout and, with
--out DIR, as DIR/<operation>.json plus an optional DIR/<operation>.csv
time series.  Exit codes: 0 ok, 1 failed suite, 2 config error, 3 runtime
error (stderr carries {"error": name, "message": text}).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    MANIFOLD_PRESETS,
    build_direction,
    build_function,
    build_manifold,
    build_point,
    build_potential,
    config_hash,
    validate,
)
from .errors import ConfigError, SteinError

OUTPUT_ORDER = ("operation", "version", "seed", "config_hash", "config", "result")


# -- operations ---------------------------------------------------------------------

def _common(cfg):
    M = build_manifold(cfg.get("manifold"))
    pot = build_potential(cfg.get("potential"), M)
    p = cfg.get("params", {})
    return M, pot, p


def _steps(cfg, default=1000):
    return int(cfg.get("steps_per_unit", default))


def op_verify_geometry(cfg, workers):
    from .curvature import curvature_at, symmetry_residuals
    from .manifolds import ManifoldPoint
    from .suites import geometry_residuals

    M, pot, p = _common(cfg)
    rng = np.random.default_rng(cfg["seed"])
    # chart geodesics are integrated numerically, so they get a smaller default
    n = int(cfg.get("n_samples", 20 if M.kind == "chart_diffusion" else 1000))
    out = geometry_residuals(M, n, rng, p.get("max_step"))
    pts = M.random_point(rng, size=int(p.get("curvature_points", 5)))
    sym = 0.0
    ric_err = None
    for x in pts:
        b = curvature_at(ManifoldPoint(M, x), pot)
        sym = max(sym, max(symmetry_residuals(b.R).values()))
        if M.kind in ("sphere", "hyperbolic3", "circle", "euclidean") and pot.name == "zero":
            target = (M.dim - 1) * M.kappa * np.eye(M.dim)
            e = float(np.max(np.abs(b.ric - target)))
            ric_err = e if ric_err is None else max(ric_err, e)
    out["riemann_symmetry"] = sym
    if ric_err is not None:
        out["ricci_closed_form"] = ric_err
    out["manifold"] = M.describe() if hasattr(M, "describe") else M.kind
    return out, None


def op_simulate(cfg, workers):
    from .paths import simulate_path, write_path_dump

    M, pot, p = _common(cfg)
    t = float(p.get("t", 1.0))
    steps = int(p.get("steps", max(1, math.ceil(t * _steps(cfg)))))
    n = int(cfg.get("n_samples", 100))
    x0 = build_point(p.get("x"), M)
    path = simulate_path(x0, pot, t, steps, cfg["seed"], manifold=M, n_paths=n)
    if p.get("dump"):
        write_path_dump(path, p["dump"])
    d = M.dist(np.broadcast_to(x0, path.points.shape), path.points)  # [paths, steps + 1]
    mean = d.mean(0)
    se = d.std(0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    end = path.points[:, -1]
    res = {
        "t": t,
        "steps": steps,
        "n_paths": n,
        "x0": x0,
        "endpoint_mean": end.mean(0),
        "endpoint_std_error": end.std(0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(M.ambient_dim),
        "distance_from_start": {"value": float(mean[-1]), "std_error": float(se[-1])},
    }
    stride = max(1, steps // 200)
    rows = [(float(path.grid[i]), float(mean[i]), float(se[i])) for i in range(0, steps + 1, stride)]
    if rows[-1][0] != float(path.grid[-1]):
        rows.append((float(path.grid[-1]), float(mean[-1]), float(se[-1])))
    return res, rows


def op_estimate(cfg, workers):
    from .semigroup import bismut_gradient, bismut_hessian, bismut_third, estimate_Ptf

    M, pot, p = _common(cfg)
    kind = cfg["operation"].split("-", 1)[1]
    f = build_function(p.get("f"), M)
    x = build_point(p.get("x"), M)
    t = float(p.get("t", 1.0))
    n = int(cfg.get("n_samples", 10000))
    kw = dict(manifold=M, steps_per_unit=_steps(cfg), workers=workers)
    dirs = [build_direction(p.get(k), M.dim, i) for i, k in enumerate("uvw")]
    seed = cfg["seed"]
    if kind == "ptf":
        est = estimate_Ptf(x, f, pot, t, n, seed, **kw)
    elif kind == "grad":
        est = bismut_gradient(x, f, pot, t, dirs[0], n, seed, **kw)
    elif kind == "hess":
        est = bismut_hessian(x, f, pot, t, dirs[0], dirs[1], n, seed, **kw)
    else:
        est = bismut_third(x, f, pot, t, *dirs, n, seed, variant=p.get("variant", "c1"), **kw)
    res = {"quantity": kind, "x": x, "t": t, "function": f.name, "estimate": est.to_dict()}
    if kind != "ptf":
        res["directions"] = dirs[: {"grad": 1, "hess": 2, "third": 3}[kind]]
    return res, [(t, float(np.ravel(est.value)[0]), float(np.ravel(est.std_error)[0]))]


def op_solve_stein(cfg, workers):
    from .semigroup import solve_stein

    M, pot, p = _common(cfg)
    h = build_function(p.get("h"), M)
    x = build_point(p.get("x"), M)
    out = solve_stein(x, h, pot, K=p.get("K"), T_max=float(p.get("T_max", 20.0)),
                      n_samples=int(cfg.get("n_samples", 4000)), seed=cfg["seed"], manifold=M)
    out = dict(out)
    out["x"] = x
    return out, None


def op_decay_profile(cfg, workers):
    from .semigroup import decay_profile

    M, pot, p = _common(cfg)
    f = build_function(p.get("f"), M)
    x = build_point(p.get("x"), M)
    order = int(p.get("order", 1))
    t_grid = p.get("t_grid", [0.5, 1, 2, 3, 4, 6] if order == 1 else list(np.geomspace(1e-3, 1e-1, 5)))
    d = decay_profile(f, pot, x, order, t_grid, int(cfg.get("n_samples", 200)), cfg["seed"], manifold=M,
                      n_configs=int(p.get("n_configs", 32)), variant=p.get("variant", "c1"),
                      large_t=float(p.get("large_t", 1.0)), small_t=float(p.get("small_t", 0.1)),
                      steps_per_unit=_steps(cfg), workers=workers)
    rows = [(float(t), float(v), float(s)) for t, v, s in zip(d.t_grid, d.sup_estimates, d.std_errors)]
    return d.to_dict(), rows


STEIN_PRESETS = ("circle-metropolis", "sphere-geodesic-step", "euclidean-gaussian-perturbation")


def op_stein_bound(cfg, workers):
    from .bound import (
        assemble_bound,
        circle_metropolis_sampler,
        collect_pairs,
        derive_constants,
        gaussian_perturbation_sampler,
        geodesic_step_sampler,
    )

    p = dict(cfg.get("params", {}))
    preset = p.get("preset", "circle-metropolis")
    default_manifold = {"circle-metropolis": "circle", "sphere-geodesic-step": "sphere2",
                        "euclidean-gaussian-perturbation": "euclidean1"}
    if preset not in default_manifold:
        raise ConfigError(f"unknown stein-bound preset {preset!r}; choose from {', '.join(STEIN_PRESETS)}")
    M = build_manifold(cfg.get("manifold", default_manifold[preset]))
    default_pot = {"name": "gaussian"} if preset.startswith("euclidean") else {"name": "zero"}
    pot = build_potential(cfg.get("potential", default_pot), M)
    lam = float(p.get("lambda", 1e-2))
    if not lam > 0:
        raise ConfigError("lambda must be positive")
    if preset == "circle-metropolis":
        if M.kind != "circle":
            raise ConfigError("circle-metropolis needs the circle")
        sampler = circle_metropolis_sampler(M, lam)
    elif preset == "sphere-geodesic-step":
        sampler = geodesic_step_sampler(M, pot, lam)
    else:
        sampler = gaussian_perturbation_sampler(M, pot, lam)
    batch = collect_pairs(sampler, int(p.get("n_base", cfg.get("n_samples", 10000))), int(p.get("m_cond", 32)),
                          cfg["seed"])
    consts = derive_constants(pot, M, route=p.get("route", "auto"))
    rep = assemble_bound(batch, pot, consts, metric_kind=p.get("metric_kind", "wasserstein"))
    out = rep.to_dict()
    out["preset"] = preset
    return out, None


def op_spectral(cfg, workers):
    from .spectral import heat_kernel, l2_decay_check, spectral_gap

    M, pot, p = _common(cfg)
    what = cfg["operation"].split("-", 1)[1]
    if what == "gap":
        return spectral_gap(M, p.get("method", "closed_form"), seed=cfg["seed"]).to_dict(), None
    if what == "kernel":
        t = float(p.get("t", 1.0))
        x = build_point(p.get("x"), M)
        y = build_point(p.get("y"), M)
        return {"t": t, "x": x, "y": y, "density": float(heat_kernel(M, t, x, y))}, None
    f = build_function(p.get("f"), M)
    r = l2_decay_check(f, M, p.get("t_grid", [0.5, 1, 2, 4]), int(cfg.get("n_samples", 2000)), cfg["seed"],
                       steps_per_unit=_steps(cfg, 200), workers=workers)
    rows = [(float(t), float(v), float(s)) for t, v, s in zip(r.t, r.values, r.std_error)]
    return r.to_dict(), rows


def op_suite(cfg, workers):
    from .suites import run_suite

    p = cfg.get("params", {})
    name = p.get("name")
    results = run_suite(name, seed=cfg["seed"], scale=float(p.get("scale", 1.0)), workers=workers)
    return {"suite": name, "passed": all(r["passed"] for r in results), "criteria": results}, None


OPERATIONS = {
    "verify-geometry": op_verify_geometry,
    "simulate": op_simulate,
    "estimate-ptf": op_estimate,
    "estimate-grad": op_estimate,
    "estimate-hess": op_estimate,
    "estimate-third": op_estimate,
    "solve-stein": op_solve_stein,
    "decay-profile": op_decay_profile,
    "stein-bound": op_stein_bound,
    "spectral-gap": op_spectral,
    "spectral-decay": op_spectral,
    "spectral-kernel": op_spectral,
    "suite": op_suite,
}


def run(config: dict, workers: int = 1):
    """Execute a validated config; returns (output document, csv rows or None)."""
    from .suites import jsonable

    result, rows = OPERATIONS[config["operation"]](config, workers)
    doc = {
        "operation": config["operation"],
        "version": __version__,
        "seed": config["seed"],
        "config_hash": config_hash(config),
        "config": config,
        "result": jsonable(result),
    }
    return doc, rows


# -- argument parsing -------------------------------------------------------------------

def _json_arg(s):
    try:
        return json.loads(s)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"not valid JSON: {e}") from None


def _floats(s):
    try:
        return [float(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # keep stderr a single JSON object
        usage = self.format_usage().strip()
        print(json.dumps({"error": "ConfigError", "message": message, "usage": usage}), file=sys.stderr)
        raise SystemExit(2)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", type=Path, help="JSON experiment config; flags override its fields")
    g.add_argument("--seed", type=int, help="RNG seed (falls back to the config, then $STEIN_SEED)")
    g.add_argument("--out", type=Path, help="directory for <operation>.json and .csv")
    g.add_argument("--workers", type=int, help="worker threads (default: available CPUs)")
    g.add_argument("--strict", action="store_true", help="sequential reduction; outputs byte-reproducible")
    g.add_argument("--manifold", help=f"preset ({', '.join(sorted(MANIFOLD_PRESETS))}) or JSON object")
    g.add_argument("--potential", help="preset name (zero, gaussian, log_heat_kernel, height) or JSON object")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--steps-per-unit", type=int)
    g.add_argument("--params", type=_json_arg, help="extra operation parameters as a JSON object")

    ap = _Parser(prog="riemstein", description="Monte Carlo Stein-method experiments on Riemannian manifolds")
    ap.add_argument("--version", action="version", version=f"riemstein {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("verify-geometry", parents=[common], help="exp/log, transport and curvature residuals")

    s = sub.add_parser("simulate", parents=[common], help="simulate diffusion paths")
    s.add_argument("--t", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--dump", help="write the paths to a binary dump file")

    s = sub.add_parser("estimate", parents=[common], help="P_t f and its Bismut derivative estimates")
    s.add_argument("quantity", choices=["ptf", "grad", "hess", "third"])
    s.add_argument("--t", type=float)
    s.add_argument("--x", type=_floats, help="start point, comma-separated ambient coordinates")
    s.add_argument("--variant", choices=["c1", "c2"])

    s = sub.add_parser("solve-stein", parents=[common], help="solution of the Stein equation at a point")
    s.add_argument("--x", type=_floats)
    s.add_argument("--T-max", dest="T_max", type=float)

    s = sub.add_parser("decay-profile", parents=[common], help="derivative decay across t")
    s.add_argument("--order", type=int, choices=[1, 2, 3])
    s.add_argument("--t-grid", type=_floats)
    s.add_argument("--variant", choices=["c1", "c2"])

    s = sub.add_parser("stein-bound", parents=[common], help="end-to-end Stein bound from pair samples")
    s.add_argument("--preset", choices=STEIN_PRESETS)
    s.add_argument("--lambda", dest="lambda_", type=float)
    s.add_argument("--n-base", type=int)
    s.add_argument("--m-cond", type=int)
    s.add_argument("--metric-kind", choices=["wasserstein", "c2_class"])

    s = sub.add_parser("spectral", parents=[common], help="spectral gap, L2 decay or heat kernel")
    s.add_argument("quantity", choices=["gap", "decay", "kernel"])
    s.add_argument("--t", type=float)
    s.add_argument("--t-grid", type=_floats)
    s.add_argument("--method", choices=["closed_form", "rayleigh"])

    s = sub.add_parser("suite", parents=[common], help="run an acceptance battery")
    s.add_argument("name", choices=["geometry", "martingales", "derivatives", "decay", "compact", "bounds"])
    s.add_argument("--scale", type=float, help="sample-size multiplier (1 = stated sizes)")
    return ap


_PARAM_FLAGS = {
    "t": "t", "steps": "steps", "dump": "dump", "x": "x", "variant": "variant", "T_max": "T_max",
    "order": "order", "t_grid": "t_grid", "preset": "preset", "lambda_": "lambda", "n_base": "n_base",
    "m_cond": "m_cond", "metric_kind": "metric_kind", "method": "method", "scale": "scale", "name": "name",
}


def _spec_arg(value):
    if value is None:
        return None
    value = value.strip()
    if value.startswith("{"):
        return _json_arg(value)
    return value


def config_from_args(args) -> dict:
    cfg = {}
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    op = args.command
    if op == "estimate":
        op = f"estimate-{args.quantity}"
    elif op == "spectral":
        op = f"spectral-{args.quantity}"
    if "operation" in cfg and cfg["operation"] != op:
        raise ConfigError(f"config operation {cfg['operation']!r} does not match subcommand {op!r}")
    cfg["operation"] = op
    man = _spec_arg(args.manifold)
    if man is not None:
        cfg["manifold"] = man
    pot = _spec_arg(args.potential)
    if pot is not None:
        cfg["potential"] = {"name": pot} if isinstance(pot, str) else pot
    if args.n_samples is not None:
        cfg["n_samples"] = args.n_samples
    if args.steps_per_unit is not None:
        cfg["steps_per_unit"] = args.steps_per_unit
    params = dict(cfg.get("params", {}))
    if args.params is not None:
        if not isinstance(args.params, dict):
            raise ConfigError("--params must be a JSON object")
        params.update(args.params)
    for attr, key in _PARAM_FLAGS.items():
        v = getattr(args, attr, None)
        if v is not None:
            params[key] = v
    if params:
        cfg["params"] = params
    if args.seed is not None:
        cfg["seed"] = args.seed
    elif "seed" not in cfg and os.environ.get("STEIN_SEED"):
        try:
            cfg["seed"] = int(os.environ["STEIN_SEED"])
        except ValueError:
            raise ConfigError("STEIN_SEED must be an integer") from None
    if args.out is not None:
        cfg["output"] = str(args.out)
    return validate(cfg)


def _write_csv(path: Path, rows):
    with open(path, "w") as fh:
        fh.write("t,value,std_error\n")
        for t, v, s in rows:
            fh.write(f"{t!r},{v!r},{s!r}\n")


def _fail(name, message, code):
    print(json.dumps({"error": name, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        return _fail("ConfigError", str(e), 2)
    workers = 1 if args.strict else (args.workers or os.cpu_count() or 1)
    try:
        doc, rows = run(cfg, workers)
    except ConfigError as e:
        return _fail("ConfigError", str(e), 2)
    except SteinError as e:
        return _fail(e.name, str(e), 3)
    except (ValueError, ArithmeticError, KeyError, TypeError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e), 3)
    text = json.dumps(doc, sort_keys=True, indent=1, allow_nan=True) + "\n"
    sys.stdout.write(text)
    if "output" in cfg:
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg['operation']}.json").write_text(text)
        if rows:
            _write_csv(out / f"{cfg['operation']}.csv", rows)
        if cfg["operation"] == "suite":
            from .suites import summary_csv

            (out / "suite_summary.csv").write_text(summary_csv(doc["result"]["criteria"]))
    if cfg["operation"] == "suite" and not doc["result"]["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

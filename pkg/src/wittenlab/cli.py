"""Batch front-end: parse an experiment config, dispatch one command, and
write a machine-readable report plus plot-ready CSV tables.

Commands: describe, solve, cov, npoint, decay, weighted, taylor, check.
Exit codes: 0 success, 1 config error, 2 solver non-convergence,
3 invariant failure. Reports are byte-reproducible given the same config
and seeds, except for the single timestamp field.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from .errors import (ConfigError, ConvergenceError, DefinitenessError,
                     WittenLabError)

COMMANDS = ("describe", "solve", "cov", "npoint", "decay", "weighted",
            "taylor", "check")
SCHEMA_VERSION = 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="wittenlab",
        description="Witten-Laplacian laboratory for lattice Kac models")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=False,
                        help="experiment config (JSON); check falls back to "
                             "a built-in gaussian default")
    parser.add_argument("--out", default="wittenlab-out",
                        help="output directory for report.json and CSVs")
    parser.add_argument("--seed", type=int, default=None,
                        help="override solver and MCMC seeds")
    parser.add_argument("--threads", type=int, default=None,
                        help="thread cap for the numeric backends")
    args = parser.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg["solver"]["seed"] = args.seed
            cfg["oracle"]["mcmc"]["seed"] = args.seed
        ctx = build_context(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        results, tables = run_command(args.command, cfg, ctx)
    except (ConvergenceError, DefinitenessError) as exc:
        print(f"solver failure in {args.command}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(args.out, exist_ok=True)
    write_report(args.out, args.command, cfg, results)
    for name, header, rows in tables:
        write_csv(os.path.join(args.out, name), header, rows)

    if args.command == "check":
        failed = [c for c in results["checks"] if not c["passed"]]
        for c in results["checks"]:
            status = "ok" if c["passed"] else "FAIL"
            print(f"[{status}] {c['name']}: {c['detail']}")
        if failed:
            print(f"{len(failed)} invariant(s) failed", file=sys.stderr)
            return 3
    print(f"{args.command}: report written to {args.out}/report.json")
    return 0


# ------------------------------------------------------------- config I/O

def default_config() -> dict:
    """The built-in gaussian two-site experiment."""
    return {
        "schema_version": SCHEMA_VERSION,
        "lattice": {"dimension": 1, "shape": [2]},
        "potential": {"kind": "gaussian"},
        "observables": {
            "g": {"kind": "coordinate", "sites": [[0]]},
            "h": {"kind": "coordinate", "sites": [[1]]},
        },
        "grid": None,
        "solver": {"tol": 1e-8, "max_iter": None, "precond": "diagonal",
                   "seed": 7},
        "oracle": {"mcmc": {"chain_length": 60000, "burn_in": 4000,
                            "proposal_std": None, "seed": 2024,
                            "thinning": 4, "chains": 16}},
        "params": {},
    }


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    base = default_config()
    for key in ("lattice", "potential"):
        if key not in cfg:
            raise ConfigError(f"missing required section '{key}'")
    for key, val in base.items():
        cfg.setdefault(key, val)
    for key, val in base["solver"].items():
        cfg["solver"].setdefault(key, val)
    cfg["oracle"].setdefault("mcmc", base["oracle"]["mcmc"])
    for key, val in base["oracle"]["mcmc"].items():
        cfg["oracle"]["mcmc"].setdefault(key, val)
    if cfg.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version "
                          f"{cfg.get('schema_version')}")
    return cfg


def build_context(cfg: dict):
    """Validate the config and materialize lattice/potential/grid/observables."""
    from . import errors
    from .grid import build_grid, default_grid
    from .lattice import build_lattice
    from .potential import (bump_observable, coordinate_observable,
                            gaussian_potential, kac_potential,
                            linear_observable, square_observable)
    from .witten import SolverConfig

    lat_cfg = cfg["lattice"]
    try:
        lattice = build_lattice(int(lat_cfg.get("dimension", 1)),
                                lat_cfg.get("shape", []))
    except (errors.InvalidGeometryError, TypeError, KeyError) as exc:
        raise ConfigError(f"lattice: {exc}")

    pot_cfg = cfg["potential"]
    kind = pot_cfg.get("kind")
    if kind == "gaussian":
        model = gaussian_potential(lattice)
    elif kind == "kac":
        if "nu" not in pot_cfg:
            raise ConfigError("potential.nu: required for the kac kind")
        try:
            model = kac_potential(lattice, float(pot_cfg["nu"]))
        except errors.InvalidParameterError as exc:
            raise ConfigError(f"potential.nu: {exc}")
    else:
        raise ConfigError(f"potential.kind: unknown kind {kind!r}")

    grid_cfg = cfg.get("grid") or {}
    try:
        if grid_cfg:
            grid = build_grid(lattice, float(grid_cfg["half_width"]),
                              int(grid_cfg["points_per_site"]))
        else:
            grid = default_grid(lattice)
    except (errors.InvalidGridError, errors.ResourceLimitError, KeyError) as exc:
        raise ConfigError(f"grid: {exc}")

    observables = {}
    for name, o in (cfg.get("observables") or {}).items():
        okind = o.get("kind")
        try:
            sites = [tuple(s) for s in o.get("sites", [])]
            if okind == "coordinate":
                observables[name] = coordinate_observable(lattice, sites[0])
            elif okind == "square":
                observables[name] = square_observable(lattice, sites[0])
            elif okind == "linear":
                coeffs = dict(zip(sites, o.get("coefficients", [])))
                observables[name] = linear_observable(lattice, coeffs)
            elif okind == "bump":
                observables[name] = bump_observable(
                    lattice, sites, o.get("bump_center", [0.0] * len(sites)),
                    float(o.get("bump_width", 1.0)))
            else:
                raise ConfigError(f"observables.{name}.kind: unknown "
                                  f"kind {okind!r}")
        except ConfigError:
            raise
        except (errors.WittenLabError, IndexError, TypeError, ValueError) as exc:
            raise ConfigError(f"observables.{name}: {exc}")

    sol = cfg["solver"]
    try:
        solver = SolverConfig(rel_tolerance=float(sol["tol"]),
                              max_iterations=sol["max_iter"],
                              preconditioner=sol["precond"],
                              seed=int(sol["seed"]))
    except (errors.InvalidParameterError, ValueError, KeyError) as exc:
        raise ConfigError(f"solver: {exc}")

    m = cfg["oracle"]["mcmc"]
    from .oracle import McmcConfig
    try:
        mcmc = McmcConfig(chain_length=int(m["chain_length"]),
                          burn_in=int(m["burn_in"]),
                          proposal_std=(None if m["proposal_std"] is None
                                        else float(m["proposal_std"])),
                          seed=int(m["seed"]), thinning=int(m["thinning"]),
                          chains=int(m["chains"]))
    except (errors.InvalidParameterError, ValueError, KeyError) as exc:
        raise ConfigError(f"oracle.mcmc: {exc}")

    return {"lattice": lattice, "model": model, "grid": grid,
            "observables": observables, "solver": solver, "mcmc": mcmc}


def _need_observable(cfg, ctx, key, param):
    name = cfg.get("params", {}).get(param)
    if name is None:
        raise ConfigError(f"params.{param}: required for this command")
    if name not in ctx["observables"]:
        raise ConfigError(f"params.{param}: unknown observable {name!r}")
    return ctx["observables"][name]


# ---------------------------------------------------------------- commands

def run_command(command: str, cfg: dict, ctx: dict):
    import numpy as np

    params = cfg.get("params", {})
    model, grid, solver = ctx["model"], ctx["grid"], ctx["solver"]
    tables = []

    if command == "describe":
        from .potential import default_convexity_margin
        lat = ctx["lattice"]
        results = {
            "lattice": {"dimension": lat.dimension, "shape": list(lat.shape),
                        "n_sites": lat.n_sites,
                        "n_bonds": len(lat.adjacency)},
            "potential": cfg["potential"],
            "grid": {"half_width": grid.half_width,
                     "points_per_site": grid.points_per_site,
                     "spacing": grid.spacing,
                     "total_points": grid.total_points},
            "convexity_margin_sampled": default_convexity_margin(model),
            "observables": sorted(ctx["observables"])}
        return results, tables

    if command == "solve":
        from .correlation import gibbs_mean
        from .grid import save_scalar_field, scalar_field_to_csv
        from .witten import solve_zero_form
        g = _need_observable(cfg, ctx, "observables", "g")
        f, rep = solve_zero_form(model, g, solver, grid)
        mean = gibbs_mean(model, g, grid)
        results = {"solve_report": rep.to_dict(),
                   "gibbs_mean_g": mean.to_dict(),
                   "mask_fraction": float(np.mean(np.isfinite(f.values)))}
        out = cfg.get("params", {}).get("field_path")
        if out:
            save_scalar_field(f, out)
            results["field_path"] = out
            if grid.n_sites <= 2:
                scalar_field_to_csv(f, out + ".csv")
        return results, tables

    if command == "cov":
        from .correlation import covariance_hs, truncated_correlation
        g = _need_observable(cfg, ctx, "observables", "g")
        h = _need_observable(cfg, ctx, "observables", "h")
        hs = covariance_hs(model, g, h, solver, grid)
        quad = truncated_correlation(model, [g, h], grid)
        results = {"hs": hs.to_dict(), "quadrature": quad.to_dict(),
                   "gap": abs(hs.value - quad.value)}
        tables.append(("cov.csv", ["method", "value", "error_estimate"],
                       [["hs_formula", hs.value, hs.error_estimate],
                        ["quadrature", quad.value, quad.error_estimate]]))
        return results, tables

    if command == "npoint":
        from .correlation import threepoint_hs, truncated_correlation
        names = params.get("observables")
        if not names:
            raise ConfigError("params.observables: list of observable names "
                              "required")
        try:
            gs = [ctx["observables"][n] for n in names]
        except KeyError as exc:
            raise ConfigError(f"params.observables: unknown name {exc}")
        method = params.get("method", "quadrature")
        if method == "hs":
            if len(gs) != 3:
                raise ConfigError("params.method=hs needs exactly three "
                                  "observables")
            rep = threepoint_hs(model, *gs, cfg=solver, grid=grid)
            quad = truncated_correlation(model, gs, grid)
            results = {"hs": rep.to_dict(), "quadrature": quad.to_dict(),
                       "gap": abs(rep.value - quad.value)}
        else:
            rep = truncated_correlation(model, gs, grid, method=method,
                                        mcmc_cfg=ctx["mcmc"])
            results = {"value": rep.to_dict()}
        return results, tables

    if command == "decay":
        results, rows = _decay_study(cfg, ctx)
        tables.append(("decay.csv", ["distance", "abs_cov", "stderr"], rows))
        return results, tables

    if command == "weighted":
        from .correlation import weighted_gradient_report, weighted_higher_report
        g = _need_observable(cfg, ctx, "observables", "g")
        kappa = float(params.get("kappa", 0.2))
        orders = params.get("orders", [1])
        reports = []
        for k in orders:
            if k == 1:
                reports.append(weighted_gradient_report(model, g, kappa,
                                                        solver, grid))
            else:
                reports.append(weighted_higher_report(model, g, int(k), kappa,
                                                      solver, grid))
        results = {"reports": [r.to_dict() for r in reports]}
        tables.append(("weighted.csv", ["order_k", "kappa", "sup_value"],
                       [[r.order_k, r.kappa, r.sup_value] for r in reports]))
        return results, tables

    if command == "taylor":
        from .pressure import make_perturbed_system, taylor_report
        g = _need_observable(cfg, ctx, "observables", "g")
        n_max = int(params.get("n_max", 4))
        t = float(params.get("t", 0.0))
        sys_ = make_perturbed_system(model, g, t, grid)
        tr = taylor_report(sys_, n_max, solver,
                           fd_step=float(params.get("fd_step", 1e-2)))
        rows = []
        for n in range(1, n_max + 1):
            op = tr.theta_derivatives[n - 1]
            fd = tr.oracle_derivatives[n - 1] if n <= len(tr.oracle_derivatives) \
                else float("nan")
            rows.append([n, op, fd, abs(op - fd)])
        results = {"taylor": tr.to_dict(),
                   "sign_convention": _w_sign_record(cfg, ctx)}
        tables.append(("taylor.csv", ["n", "operator", "fd", "gap"], rows))
        return results, tables

    if command == "check":
        return run_checks(cfg, ctx), tables

    raise ConfigError(f"unknown command {command!r}")


def _w_sign_record(cfg, ctx):
    """Which right-hand-side sign of the w-equation the FD oracle matches."""
    import numpy as np
    from .oracle import fd_v_derivative
    from .pressure import make_perturbed_system, param_derivative_w
    g = cfg.get("params", {}).get("g")
    if g is None or ctx["observables"].get(g) is None:
        return None
    sys_ = make_perturbed_system(ctx["model"], ctx["observables"][g], 0.0,
                                 ctx["grid"])
    fd = fd_v_derivative(sys_, 1e-2, ctx["solver"]).stack()
    errs = {}
    for sign in (+1.0, -1.0):
        w, _ = param_derivative_w(sys_, ctx["solver"], sign=sign)
        errs[sign] = float(np.linalg.norm(fd - w.stack()))
    if abs(errs[+1.0] - errs[-1.0]) <= 0.1 * max(errs[+1.0], errs[-1.0], 1e-300):
        matched = "indeterminate (w degenerate for this observable)"
    elif errs[+1.0] < errs[-1.0]:
        matched = "+grad_g.grad_v"
    else:
        matched = "-grad_g.grad_v"
    return {"matched_rhs_sign": matched,
            "err_plus": errs[+1.0], "err_minus": errs[-1.0]}


def _decay_study(cfg, ctx):
    from .correlation import decay_fit
    from .lattice import graph_distance
    from .oracle import mcmc_covariances
    from .potential import coordinate_observable

    lat = ctx["lattice"]
    params = cfg.get("params", {})
    fixed = tuple(params.get("fixed_site", lat.sites[0]))
    max_d = int(params.get("max_distance", lat.n_sites - 1))
    others = sorted((s for s in lat.sites
                     if 0 < graph_distance(lat, fixed, s) <= max_d),
                    key=lambda s: graph_distance(lat, fixed, s))
    base = coordinate_observable(lat, fixed)
    ests = mcmc_covariances(ctx["model"],
                            [(base, coordinate_observable(lat, s))
                             for s in others], ctx["mcmc"])
    rows = []
    points = []
    for s, est in zip(others, ests):
        d = graph_distance(lat, fixed, s)
        rows.append([d, abs(est.mean), est.standard_error])
        points.append((d, abs(est.mean), est.standard_error))
    fit = decay_fit(points)
    return {"fit": fit.to_dict(),
            "covariances": [{"distance": r[0], "abs_cov": r[1], "stderr": r[2]}
                            for r in rows]}, rows


# ------------------------------------------------------------------ checks

def run_checks(cfg, ctx) -> dict:
    """The built-in invariant battery; every entry is fast and closed-form
    verifiable or a two-route cross-check."""
    import numpy as np
    from .correlation import covariance_hs, gibbs_mean, truncated_correlation
    from .grid import (build_grid, coords, fd_gradient, fd_divergence,
                       ground_density, inner_product, quad_weights,
                       sample_scalar, ScalarField, one_form_from_stack)
    from .lattice import build_lattice, exponential_weight, SiteSubset
    from .potential import (coordinate_observable, default_convexity_margin,
                            gaussian_potential, square_observable)
    from .pressure import make_perturbed_system, theta_derivative
    from .witten import apply_w0, solve_w1

    checks = []

    def record(name, passed, detail):
        checks.append({"name": name, "passed": bool(passed),
                       "detail": detail})

    model, grid, solver = ctx["model"], ctx["grid"], ctx["solver"]
    lat = ctx["lattice"]

    # metric axioms on the configured lattice (exhaustive when small)
    from .lattice import graph_distance
    sites = lat.sites[:16]
    ok = all(graph_distance(lat, a, a) == 0 for a in sites)
    ok &= all(graph_distance(lat, a, b) == graph_distance(lat, b, a)
              for a in sites for b in sites)
    ok &= all(graph_distance(lat, a, c) <= graph_distance(lat, a, b)
              + graph_distance(lat, b, c)
              for a in sites for b in sites for c in sites)
    record("lattice.metric_axioms", ok, f"{len(sites)} sites exhaustive")

    # weight ratio bound
    S = SiteSubset(lat, (lat.sites[0],))
    try:
        exponential_weight(lat, 0.3, S)
        record("lattice.weight_ratio", True, "kappa=0.3 passes the adjacent"
               " ratio bound")
    except WittenLabError as exc:
        record("lattice.weight_ratio", False, str(exc))

    # analytic vs FD derivatives of the configured potential
    rng = np.random.default_rng(solver.seed)
    pts = rng.uniform(-2, 2, size=(5, lat.n_sites))
    step = 1e-5
    worst = 0.0
    for p in pts:
        ga = model.grad(p)
        for i in range(lat.n_sites):
            e = np.zeros(lat.n_sites)
            e[i] = step
            fd = (model.phi(p + e) - model.phi(p - e)) / (2 * step)
            worst = max(worst, abs(fd - ga[i]) / max(1.0, abs(ga[i])))
    record("potential.grad_fd", worst < 1e-6, f"max rel dev {worst:.2e}")

    H = model.hess(pts)
    sym = float(np.abs(H - np.swapaxes(H, -1, -2)).max())
    record("potential.hess_symmetric", sym < 1e-12, f"max asym {sym:.2e}")

    # ground density and quadrature on a 1-site grid
    lat1 = build_lattice(1, [1])
    g1 = build_grid(lat1, 6.0, 65)
    gd1 = ground_density(g1, gaussian_potential(lat1))
    dev = abs(gd1.norm_sq - np.sqrt(2 * np.pi))
    record("grid.gaussian_norm", dev < 1e-4, f"|norm_sq - sqrt(2pi)| = {dev:.2e}")

    odd = sample_scalar(g1, lambda x: x[:, 0] * np.exp(-x[:, 0] ** 2))
    ones = sample_scalar(g1, lambda x: np.ones(len(x)))
    dev = abs(inner_product(odd, ones))
    record("grid.odd_quadrature", dev < 1e-12, f"odd integral {dev:.1e}")

    # discrete duality on interior-supported fields
    rng = np.random.default_rng(0)
    m1 = g1.points_per_site
    u = np.zeros(m1)
    u[3:-3] = rng.standard_normal(m1 - 6)
    V = np.zeros((1, m1))
    V[0, 3:-3] = rng.standard_normal(m1 - 6)
    uf = ScalarField(g1, u)
    Vf = one_form_from_stack(g1, V)
    lhs = inner_product(fd_gradient(uf), Vf)
    rhs = -inner_product(uf, fd_divergence(Vf))
    record("grid.duality", abs(lhs - rhs) < 1e-12, f"defect {abs(lhs-rhs):.1e}")

    # W0 annihilates the ground density (discretization-limited)
    gd = ground_density(grid, model)
    out = apply_w0(model, gd.field)
    resid = float(np.linalg.norm(out.values) / np.linalg.norm(gd.field.values))
    h2 = grid.spacing ** 2
    record("witten.ground_annihilated", resid < h2,
           f"relative residual {resid:.2e} (< h^2 = {h2:.2e})")

    # symmetry of W1 on random interior fields
    from .witten import interior_mask, _w1_raw
    inner = interior_mask(grid).astype(float)
    op = _w1_raw(model, grid)
    a = rng.standard_normal((grid.n_sites, grid.total_points)) * inner
    b = rng.standard_normal((grid.n_sites, grid.total_points)) * inner
    d1 = float(np.vdot(op(a), b))
    d2 = float(np.vdot(a, op(b)))
    dev = abs(d1 - d2) / max(1.0, abs(d1))
    record("witten.w1_symmetric", dev < 1e-10, f"relative dev {dev:.1e}")

    # margin positive and covariance sanity
    margin = default_convexity_margin(model)
    record("potential.margin_positive", margin > 0, f"margin {margin:.4f}")

    gx = coordinate_observable(lat, lat.sites[0])
    hs = covariance_hs(model, gx, gx, solver, grid)
    quad = truncated_correlation(model, [gx, gx], grid)
    gap = abs(hs.value - quad.value)
    tol = max(1e-3, 0.01 * abs(quad.value))
    record("correlation.hs_vs_quadrature", gap <= tol,
           f"gap {gap:.2e} (tol {tol:.1e})")

    var = hs.value
    record("correlation.variance_nonneg", var >= -1e-8, f"var {var:.4f}")

    # Brascamp-Lieb bound
    x = coords(grid)
    w = quad_weights(grid)
    rho = gd.field.values ** 2
    grad2 = float(np.sum(w * np.sum(gx.grad(x).T ** 2, axis=0) * rho)) \
        / gd.norm_sq
    slack = 1e-3 + h2 ** 2
    record("correlation.brascamp_lieb",
           var <= grad2 / margin + slack,
           f"var {var:.4f} <= {grad2 / margin:.4f} + {slack:.1e}")

    # theta recursion bookkeeping on the configured model
    sys_ = make_perturbed_system(model, gx, 0.0, grid)
    th2 = theta_derivative(sys_, 2, solver)
    gap = abs(th2 - var)
    record("pressure.theta2_equals_cov", gap <= 1e-3 * max(1.0, abs(var)),
           f"|theta2 - cov| = {gap:.2e}")

    # reproducibility of a solve (bitwise)
    r1, _ = solve_w1(model, one_form_from_stack(
        grid, np.ascontiguousarray(gx.grad(x).T) * gd.field.values), solver)
    r2, _ = solve_w1(model, one_form_from_stack(
        grid, np.ascontiguousarray(gx.grad(x).T) * gd.field.values), solver)
    same = bool(np.array_equal(r1.stack(), r2.stack()))
    record("solver.bit_reproducible", same, "two identical solves agree bitwise")

    return {"checks": checks,
            "n_passed": sum(c["passed"] for c in checks),
            "n_total": len(checks)}


# ------------------------------------------------------------------ output

def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_report(out_dir: str, command: str, cfg: dict, results: dict) -> None:
    from . import __version__
    report = {
        "software_version": __version__,
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "seeds": {"solver": cfg["solver"]["seed"],
                  "mcmc": cfg["oracle"]["mcmc"]["seed"]},
        "backend": _backend_name(),
        "results": results,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _backend_name() -> str:
    from . import kernels
    return kernels.backend()


def write_csv(path: str, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(c) if isinstance(c, float) else str(c)
                              for c in row) + "\n")


if __name__ == "__main__":
    sys.exit(main())

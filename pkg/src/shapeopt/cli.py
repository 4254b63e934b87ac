"""Command line driver.

    shapeopt solve | eig | deriv-check | perturb | optimize | verify-optimum | plot

Every command reads an optional JSON configuration (``--config``), applies
flag overrides and writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 tolerance/assertion failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import copy
import glob
import os
import sys
import time

if os.environ.get("SHAPEOPT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["SHAPEOPT_THREADS"])

import numpy as np

from . import __version__, io, kernels, pde
from .errors import ShapeOptError
from .geometry import InclusionPair, area, make_domain, rectangle, regular_polygon, support_vector
from .meshing import triangulate

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_CONFIG = {
    "domain": {"type": "disk", "n": 256, "radius": 1.0},
    "source": {"kind": "constant", "c": 1.0},
    "h": 0.03,
    "problem": {
        "variant": "penalized_eigen",
        "mu": 10.5,
        "m0": None,
        "n_angles": 256,
        "D1": {"type": "square", "side": 0.5},
        "D2": {"type": "grid_disk", "radius": 1.0},
        "init": None,
    },
    "optimizer": {"max_iter": 200, "tol": 1e-3},
    "optimality": {},
    "deriv_check": {"steps": [0.02, 0.01, 0.005], "rtol1": 0.02, "rtol2": 0.03},
    "perturb": {
        "sigma": 1.0,
        "profile": {"type": "density", "n": 401, "density": "1 + x"},
        "nodes": [0.25, 0.5, 0.75],
        "deltas": [0.1, 0.05, 0.025],
    },
    "plot": False,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg = _merge(cfg, io.read_json(args.config))
        except ValueError as e:
            raise UsageError(f"cannot parse {args.config}: {e}") from e
    p = cfg["problem"]
    if args.h is not None:
        cfg["h"] = args.h
    if args.angles is not None:
        p["n_angles"] = args.angles
    if args.mu is not None:
        p["mu"] = args.mu
    if args.m0 is not None:
        p["m0"] = args.m0
    if args.variant is not None:
        p["variant"] = args.variant
    if args.tol is not None:
        cfg["optimizer"]["tol"] = args.tol
    if getattr(args, "max_iter", None) is not None:
        cfg["optimizer"]["max_iter"] = args.max_iter
    if args.plot:
        cfg["plot"] = True
    if not cfg["h"] > 0:
        raise UsageError("h must be positive")
    if not cfg["optimizer"]["tol"] > 0:
        raise UsageError("tol must be positive")
    return cfg


def build_domain(d, n_angles=256):
    """Domain from a config entry (square, rectangle, disk, grid_disk, polygon, file)."""
    if d is None:
        return None
    t = d.get("type")
    c = np.asarray(d.get("center", (0.0, 0.0)), dtype=float)
    if t == "square":
        s = 0.5 * float(d.get("side", 1.0))
        return rectangle(c[0] - s, c[1] - s, c[0] + s, c[1] + s)
    if t == "rectangle":
        return rectangle(*map(float, d["bounds"]))
    if t == "disk":
        return regular_polygon(int(d.get("n", 256)), float(d.get("radius", 1.0)), c)
    if t == "grid_disk":
        from .optimizer import grid_polygon

        return grid_polygon(int(d.get("n", n_angles)), float(d.get("radius", 1.0)))
    if t == "polygon":
        return make_domain(np.asarray(d["vertices"], dtype=float))
    if t == "file":
        path = d["path"]
        if not os.path.isfile(path):
            raise UsageError(f"domain file not found: {path}")
        return io.domain_from_dict(io.read_json(path))
    raise UsageError(f"unknown domain type {t!r}")


def problem_spec(cfg):
    from .optimizer import ProblemSpec

    p = cfg["problem"]
    N = int(p.get("n_angles", 256))
    pair = InclusionPair(build_domain(p.get("D1"), N), build_domain(p.get("D2"), N))
    spec = ProblemSpec(
        p["variant"],
        pair,
        float(p.get("mu") or 0.0),
        None if p.get("m0") is None else float(p["m0"]),
        pde.SourceSpec.from_dict(cfg["source"]),
        N,
        float(cfg["h"]),
        float(p.get("offset", 0.0)),
    )
    return spec


def write_manifest(out, command, cfg, t0, extra=None):
    man = {
        "command": command,
        "config": cfg,
        "config_hash": io.config_hash(cfg),
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "wall_clock_seconds": time.perf_counter() - t0,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        man.update(extra)
    return io.write_json(os.path.join(out, "manifest.json"), man)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _field_dump(mesh, U):
    return {
        "nodes": mesh.nodes,
        "triangles": mesh.triangles,
        "values": U.nodal_values,
        "boundary_chain": mesh.boundary_chain,
        "boundary_flux": U.boundary_flux,
    }


def cmd_solve(cfg, out, args):
    dom = build_domain(cfg["domain"])
    mesh = triangulate(dom, cfg["h"])
    f = pde.SourceSpec.from_dict(cfg["source"])
    U = pde.solve_poisson(mesh, f)
    report = {
        "energy": U.info["energy"],
        "area": area(dom),
        "max_value": U.max_value,
        "n_nodes": mesh.n_nodes,
        "n_triangles": mesh.n_triangles,
        "h": cfg["h"],
    }
    io.write_json(os.path.join(out, "field.json"), _field_dump(mesh, U))
    io.write_json(os.path.join(out, "report.json"), report)
    print(f"E_f = {report['energy']:.10g}  (nodes {mesh.n_nodes})")
    return EXIT_OK, report


def cmd_eig(cfg, out, args):
    dom = build_domain(cfg["domain"])
    mesh = triangulate(dom, cfg["h"])
    lam, U = pde.solve_eigen(mesh)
    report = {"lambda_1": lam, "area": area(dom), "n_nodes": mesh.n_nodes, "h": cfg["h"], "info": U.info}
    io.write_json(os.path.join(out, "field.json"), _field_dump(mesh, U))
    io.write_json(os.path.join(out, "report.json"), report)
    print(f"lambda_1 = {lam:.10g}  (nodes {mesh.n_nodes})")
    return EXIT_OK, {"lambda_1": lam}


def cmd_deriv_check(cfg, out, args):
    from . import shape_calculus as sc

    dom = build_domain(cfg["domain"])
    f = pde.SourceSpec.from_dict(cfg["source"])
    dc = cfg["deriv_check"]
    steps = tuple(dc["steps"])
    st = sc.ShapeState(dom, cfg["h"], f)
    fields = {"x": sc.AffineField.identity(), "const": sc.AffineField.constant((0.3, -0.2))}
    rows = []
    ok = True
    bpts = st.mesh.nodes[st.mesh.boundary_chain]
    for vname, V in fields.items():
        vmax = float(np.hypot(*V(bpts).T).max())
        analytic = {
            ("Vol", 1): sc.vol_d1(st.mesh, V),
            ("Vol", 2): sc.vol_d2(st.mesh, V),
            ("E_f", 1): sc.ef_d1(dom, f, V, state=st),
            ("E_f", 2): sc.ef_d2(dom, f, V, state=st).analytic_value,
            ("lambda_1", 1): sc.lam_d1(dom, V, state=st),
            ("lambda_1", 2): sc.lam_d2(dom, V, state=st).analytic_value,
        }
        if args.wrong_formula:
            # negative control: a deliberately wrong first derivative of E_f
            analytic[("E_f", 1)] *= 1.5
        for (name, order), a in analytic.items():
            rep = sc.fd_validate(name, order, dom, V, steps=steps, f=f, mesh=st.mesh)
            ref = rep.richardson_estimate
            if name == "Vol":
                tol = 1e-9 * max(1.0, abs(ref))
            else:
                rtol = dc["rtol1"] if order == 1 else dc["rtol2"]
                # absolute floor on the natural scale |F| |V|^order of the derivative,
                # needed where the exact value is zero (rigid translations)
                base = {"E_f": abs(st.poisson.info["energy"]), "lambda_1": st.eigen[0]}[name]
                floor = rtol * base * vmax**order
                tol = max(rtol * abs(ref), floor)
            passed = abs(a - ref) <= tol
            ok &= passed
            rows.append(
                {
                    "field": vname,
                    "functional": name,
                    "order": order,
                    "analytic": a,
                    "richardson": ref,
                    "fd_values": rep.fd_values,
                    "fd_steps": rep.fd_steps,
                    "order_estimate": rep.convergence_order,
                    "tolerance": tol,
                    "passed": bool(passed),
                    "exact": bool(name == "Vol" and abs(a - ref) <= 1e-9 * max(1.0, abs(ref))),
                }
            )
            print(f"{vname:6s} {name:9s} d{order}: analytic {a:+.6e}  fd {ref:+.6e}  {'ok' if passed else 'FAIL'}")
    io.write_json(os.path.join(out, "derivative_reports.json"), rows)
    return (EXIT_OK if ok else EXIT_FAIL), {"passed": bool(ok)}


def _profile_from_config(pc, sigma):
    from .perturbations import ConvexProfile

    t = pc.get("type", "density")
    if t == "vertices":
        return ConvexProfile.from_vertices(pc["x"], pc["u"])
    if t == "density":
        grid = np.linspace(0.0, sigma, int(pc.get("n", 401)))
        expr = pc.get("density", "1")
        dens = eval(expr, {"__builtins__": {}}, {"x": grid, "np": np}) * np.ones_like(grid)  # noqa: S307
        return ConvexProfile.from_density(sigma, grid, dens)
    raise UsageError(f"unknown profile type {t!r}")


def cmd_perturb(cfg, out, args):
    from .perturbations import HatSpec, convexity_hat, delta_sweep, hat, max_t_convex

    pc = cfg["perturb"]
    sigma = float(pc["sigma"])
    u = _profile_from_config(pc["profile"], sigma)
    nodes = tuple(map(float, pc["nodes"]))
    rows = delta_sweep(u, nodes, pc["deltas"])
    d = [r["h1_distance"] for r in rows]
    monotone = all(b < a for a, b in zip(d, d[1:]))
    positive = all(r["max_t_convex"] > 0 for r in rows)
    io.write_json(os.path.join(out, "delta_sweep.json"), {"rows": rows, "monotone": monotone, "max_t_positive": positive})
    io.write_csv(os.path.join(out, "delta_sweep.csv"), ["delta", "h1_distance", "max_t_convex"], [[r["delta"], r["h1_distance"], r["max_t_convex"]] for r in rows])
    last = convexity_hat(u, nodes, pc["deltas"][-1])
    io.write_text(os.path.join(out, "phi.csv"), last.profile.to_csv())
    io.write_text(os.path.join(out, "hat.csv"), hat(HatSpec(sigma, *nodes)).to_csv())
    for r in rows:
        print(f"delta {r['delta']:.4g}  H1 distance {r['h1_distance']:.6g}  max_t {r['max_t_convex']:.4g}")
    if cfg.get("plot"):
        xs = np.linspace(0.0, sigma, 801)
        io.write_text(
            os.path.join(out, "phi.svg"),
            io.curve_svg(xs, [last.profile(xs), hat(HatSpec(sigma, *nodes))(xs)], ["phi", "hat"], xlabel="x"),
        )
    del max_t_convex
    return (EXIT_OK if monotone and positive else EXIT_FAIL), {"monotone": monotone}


def _optimality_config(cfg):
    from .optimality import OptimalityConfig

    return OptimalityConfig(**cfg.get("optimality", {}))


def cmd_optimize(cfg, out, args):
    from .optimality import verify_optimum
    from .optimizer import OptOptions, load_snapshot, optimize

    spec = problem_spec(cfg)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    oc = cfg["optimizer"]
    opts = OptOptions(
        max_iter=int(oc.get("max_iter", 200)),
        tol=float(oc.get("tol", 1e-3)),
        snapshot_dir=os.path.join(out, "snapshots"),
        verbose=bool(oc.get("verbose", False)),
    )
    for k in ("min_metric_length", "stall_window", "stall_rtol", "initial_step", "max_step"):
        if k in oc:
            setattr(opts, k, oc[k])
    init = None
    if cfg["problem"].get("init"):
        init = support_vector(build_domain(cfg["problem"]["init"]), spec.n_angles, spec.offset)
    resume = None
    if args.resume:
        if not os.path.isfile(args.resume):
            raise UsageError(f"snapshot not found: {args.resume}")
        resume = load_snapshot(args.resume)
    res = optimize(spec, init=init, opts=opts, resume=resume)
    mode = "eigen" if spec.is_eigen else "energy"
    rep = verify_optimum(
        res.domain,
        mode,
        spec.pair,
        mu=None if spec.is_constrained else spec.mu,
        f=spec.f,
        h=spec.h,
        constrained=spec.is_constrained,
        config=_optimality_config(cfg),
    )
    res.optimality = rep
    io.write_text(os.path.join(out, "result.json"), res.to_json() + "\n")
    io.write_text(os.path.join(out, "optimality.json"), rep.to_json() + "\n")
    io.write_json(os.path.join(out, "polygonality.json"), res.polygonality)
    _write_flux_csv(out, res)
    pr = res.polygonality
    print(f"{spec.variant}: J = {res.value:.10g} after {res.iterations} iterations ({res.reason})")
    print(f"free-boundary segments: {pr['segment_count']} (free edges {pr['free_edge_count']}, polygon edges {pr['edge_count']})")
    print(rep.summary_table())
    if cfg.get("plot"):
        _plot_dir(out)
    return EXIT_OK, {"value": res.value, "iterations": res.iterations, "reason": res.reason, "wall_time": res.wall_time}


def _write_flux_csv(out, res):
    from .geometry import arclength_of_points

    ev = getattr(res, "_evaluation", None)
    if ev is None:
        return
    mesh = ev.mesh
    s = arclength_of_points(ev.dom, mesh.nodes[mesh.boundary_chain])
    order = np.argsort(s)
    io.write_csv(os.path.join(out, "flux.csv"), ["s", "flux"], np.stack([s[order], ev.state.boundary_flux[order]], axis=1))


def _load_result(path):
    from .optimizer import ProblemSpec

    if os.path.isdir(path):
        path = os.path.join(path, "result.json")
    if not os.path.isfile(path):
        raise UsageError(f"result file not found: {path}")
    d = io.read_json(path)
    if "vertices" not in d or d.get("spec") is None:
        raise UsageError(f"{path} is not an optimization result")
    return make_domain(np.asarray(d["vertices"], dtype=float)), ProblemSpec.from_dict(d["spec"]), d


def cmd_verify(cfg, out, args):
    from .optimality import verify_optimum

    if not args.input:
        raise UsageError("verify-optimum needs --input RESULT")
    dom, spec, _ = _load_result(args.input)
    mode = "eigen" if spec.is_eigen else "energy"
    rep = verify_optimum(
        dom,
        mode,
        spec.pair,
        mu=None if spec.is_constrained else spec.mu,
        f=spec.f,
        h=spec.h,
        constrained=spec.is_constrained,
        config=_optimality_config(cfg),
    )
    io.write_text(os.path.join(out, "optimality.json"), rep.to_json() + "\n")
    print(rep.summary_table())
    return (EXIT_OK if rep.flags["chain_ok"] else EXIT_FAIL), {"chain_ok": rep.flags["chain_ok"]}


def _plot_dir(d, dest=None):
    dest = d if dest is None else dest
    written = []
    res_path = os.path.join(d, "result.json")
    if os.path.isfile(res_path):
        dom, spec, _ = _load_result(res_path)
        written.append(io.write_text(os.path.join(dest, "shape.svg"), io.shape_svg(dom, spec.pair, title=spec.variant)))
    for csv in sorted(glob.glob(os.path.join(d, "*.csv"))):
        header, data = io.read_csv(csv)
        if data.shape[1] < 2 or data.shape[0] < 2:
            continue
        svg = io.curve_svg(data[:, 0], [data[:, k] for k in range(1, data.shape[1])], header[1:], xlabel=header[0])
        name = os.path.splitext(os.path.basename(csv))[0] + ".svg"
        written.append(io.write_text(os.path.join(dest, name), svg))
    return written


def cmd_plot(cfg, out, args):
    src = args.input or out
    if not os.path.isdir(src) or not os.listdir(src):
        raise UsageError(f"nothing to plot in {src}")
    written = _plot_dir(src, out)
    if not written:
        raise UsageError(f"no result.json or CSV files in {src}")
    for w in written:
        print(w)
    return EXIT_OK, {"files": written}


COMMANDS = {
    "solve": cmd_solve,
    "eig": cmd_eig,
    "deriv-check": cmd_deriv_check,
    "perturb": cmd_perturb,
    "optimize": cmd_optimize,
    "verify-optimum": cmd_verify,
    "plot": cmd_plot,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="shapeopt", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--out", default="shapeopt_out", help="output directory")
    ap.add_argument("--h", type=float, help="mesh size")
    ap.add_argument("--angles", type=int, help="number of support angles")
    ap.add_argument("--mu", type=float, help="area penalty")
    ap.add_argument("--m0", type=float, help="prescribed area (constrained variants)")
    ap.add_argument("--variant", help="problem variant")
    ap.add_argument("--tol", type=float, help="optimizer stationarity tolerance")
    ap.add_argument("--max-iter", type=int, dest="max_iter", help="optimizer iteration cap")
    ap.add_argument("--plot", action="store_true", help="also write SVG plots")
    ap.add_argument("--input", help="result file or directory (verify-optimum, plot)")
    ap.add_argument("--resume", help="snapshot JSON to resume an optimization from")
    ap.add_argument("--wrong-formula", action="store_true", help=argparse.SUPPRESS)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    t0 = time.perf_counter()
    try:
        cfg = load_config(args)
        os.makedirs(args.out, exist_ok=True)
        code, summary = COMMANDS[args.command](cfg, args.out, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeOptError, AssertionError) as e:
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL
    write_manifest(args.out, args.command, cfg, t0, {"exit_code": code, "summary": summary})
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line interface: ``snapiga {simulate,optimize,analyze,export-stl}``.

Exit codes: 0 success, 2 usage or configuration error, 3 solver failure,
4 optimization finished without reaching its tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import AnalysisError, EnergyCurve, collapse_order, stability_report
from .design import optimize_catalog, optimize_design, simulate_curve
from .fileio import (ConfigError, CurveFormatError, ExportError, design_from_config, export_stl,
                     load_config, read_curve, write_curve, write_manifest)
from .geometry import GeometryError
from .solver import SolverError, StepRejected

__all__ = ["main", "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_NOT_CONVERGED"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_NOT_CONVERGED = 0, 2, 3, 4

log = logging.getLogger("snapiga")


def _parser():
    p = argparse.ArgumentParser(prog="snapiga", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", type=Path, required=config_required, help="JSON run configuration")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: config 'output' or .)")
        sp.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread limit")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomized utilities")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("simulate", help="sweep a design and report its stable states"))
    common(sub.add_parser("optimize", help="fit a design to a target curve or extrema"))
    sp = sub.add_parser("analyze", help="stability report of a curve CSV")
    common(sp, config_required=False)
    sp.add_argument("--curve", type=Path, required=True)
    sp = sub.add_parser("export-stl", help="write the extruded structure as STL")
    common(sp)
    sp.add_argument("--resolution", type=int, default=16, help="boundary segments per patch edge")
    sp.add_argument("--ascii", action="store_true", help="ASCII instead of binary STL")
    return p


def _outdir(args, cfg):
    out = args.out or (Path(cfg.output) if cfg is not None and cfg.output else Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _simulate(args, cfg, out, timings):
    design = design_from_config(cfg)
    t = time.perf_counter()
    curve, model, res = simulate_curve(design, cfg.samples(design), cfg.solver.resolution, cfg.solver.degree,
                                       cfg.solver_options(), cfg.solver.increments_per_h3, nu=cfg.material.nu)
    timings["sweep"] = time.perf_counter() - t
    write_curve(curve, out / "curve.csv")
    rep = stability_report(curve)
    order, degenerate = collapse_order(res.states, model.ps, model.dm, design)
    rep.collapse_order, rep.degenerate_order = order, degenerate
    report = rep.as_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK, dict(n_dofs=model.n_dofs, sweep=res.summary(), n_stable=rep.n_stable)


def _write_trace(trace, names, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "grad_norm", "alpha", "wall_time_s"] + names
                   + [f"active_{n}" for n in names])
        for k in range(len(trace)):
            w.writerow([k, repr(trace.loss[k]), repr(trace.grad_norm[k]), repr(trace.alpha[k]),
                        repr(trace.wall_time[k])] + [repr(float(v)) for v in trace.theta[k]]
                       + [int(a) for a in trace.active[k]])


def _design_block(design):
    rows = design.row_params()
    ident = design.mode == "identical"

    def vals(i):
        v = [float(r[i]) for r in rows]
        return v[0] if ident and i < 3 else v
    block = dict(mode=design.mode, n_rows=design.n_rows, L=design.L, t=design.t,
                 h1=vals(0), h2=vals(1), h3=vals(2), tb=vals(3))
    return dict(design=block, material=dict(E=design.E))


def _optimize(args, cfg, out, timings):
    base = args.config.parent if args.config else None
    target = cfg.build_target(base)
    opts = cfg.optimizer_options()
    t = time.perf_counter()
    if cfg.material.catalog:
        best, results = optimize_catalog(design_from_config(cfg, E=cfg.material.catalog[0]), target,
                                         cfg.material.catalog, opts)
        catalog = [dict(E=r.design.E, loss=r.loss, converged=r.converged) for r in results]
    else:
        best, catalog = optimize_design(design_from_config(cfg), target, opts), None
    timings["optimize"] = time.perf_counter() - t
    _write_trace(best.trace, best.design.names(), out / "trace.csv")
    (out / "design.json").write_text(json.dumps(_design_block(best.design), indent=2) + "\n")
    write_curve(best.curve, out / "curve.csv")
    summary = dict(converged=best.converged, reason=best.reason, loss=best.loss,
                   iterations=best.iterations, attempts=best.attempts, design=dict(zip(best.design.names(),
                                                                   best.design.to_vector().tolist())),
                   E=best.design.E, catalog=catalog)
    try:
        summary["report"] = stability_report(best.curve).as_dict()
    except AnalysisError:
        pass
    print(json.dumps(dict(loss=best.loss, converged=best.converged, reason=best.reason,
                          iterations=summary["iterations"])))
    return (EXIT_OK if best.converged else EXIT_NOT_CONVERGED), summary


def _analyze(args, cfg, out, timings):
    curve = read_curve(args.curve)
    rep = stability_report(curve)
    report = rep.as_dict()
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK, dict(n_stable=rep.n_stable, curve=str(args.curve))


def _export(args, cfg, out, timings):
    design = design_from_config(cfg)
    t = time.perf_counter()
    stats = export_stl(design, args.resolution, out / "structure.stl", ascii=args.ascii)
    timings["export"] = time.perf_counter() - t
    print(json.dumps(stats))
    return EXIT_OK, stats


COMMANDS = {"simulate": _simulate, "optimize": _optimize, "analyze": _analyze, "export-stl": _export}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    timings, cfg, out = {}, None, None
    try:
        if args.config is not None:
            cfg = load_config(args.config)
        out = _outdir(args, cfg)
        with threadpool_limits(limits=args.threads):
            code, summary = COMMANDS[args.command](args, cfg, out, timings)
        status = "ok" if code == EXIT_OK else "not_converged"
    except (ConfigError, CurveFormatError, GeometryError, AnalysisError, ExportError) as exc:
        code, status, summary = EXIT_CONFIG, "config_error", dict(error=f"{type(exc).__name__}: {exc}")
    except (SolverError, StepRejected) as exc:
        code, status, summary = EXIT_SOLVER, "solver_error", dict(error=f"{type(exc).__name__}: {exc}")
    if out is None and args.out is not None:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
    if code in (EXIT_CONFIG, EXIT_SOLVER):
        print(f"error: {summary['error']}", file=sys.stderr)
    timings["total"] = time.perf_counter() - t0
    if out is not None:
        write_manifest(out / "manifest.json", args.command, argv, cfg.echo() if cfg else None, timings,
                       summary, status=status, threads=args.threads, seed=args.seed)
    return code


if __name__ == "__main__":
    sys.exit(main())

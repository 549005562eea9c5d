"""Command-line driver: ``ddpmlmc {calibrate,optimize,estimate,compare}``.

Exit codes: 0 success, 2 configuration or input error, 3 infeasible
tolerance(s), 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

from . import fem
from .calibration import (CalibrationDataError, CalibrationReport, calibrate_device,
                          write_error_csv, write_timing_csv)
from .config import ConfigError, load_config, normalize_eps, parse_variants
from .estimators import EstimationError, McPlan, MlmcPlan, PlanError, mlmc_estimate
from .mesh import build_device_mesh
from .optimizer import (ConvergenceError, InfeasibleError, optimize_mc, per_sample_cost,
                        select_levels, write_curve_csv)
from .stochastic import DeviceSampler, LevelSolveError

log = logging.getLogger("ddpmlmc")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 2, 3, 4

SUMMARY_COLUMNS = ("epsilon", "variant", "status", "L", "h0", "ratios", "samples", "work",
                   "objective", "reason")


class JoinError(ValueError):
    pass


# canonical serialisation: re-reading and re-writing gives identical bytes

def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path, columns=None):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or (columns is not None and tuple(header) != tuple(columns)):
            raise JoinError(f"{path}: unexpected header {header}")
        return [dict(zip(header, row)) for row in rd]


def read_summary(path):
    rows = read_csv(path, SUMMARY_COLUMNS)
    for r in rows:
        r["epsilon"] = float(r["epsilon"])
        r["work"] = float(r["work"]) if r["work"] else math.inf
    return rows


# helpers

def _sampler(cfg, seed, collect_timings=False):
    s = cfg.sampler
    return DeviceSampler(cfg.geometry, cfg.params, seed=seed, depth=s.depth, r_dop=s.r_dop,
                         qoi=s.qoi, qoi_contact=s.qoi_contact, tol=s.tol,
                         collect_timings=collect_timings)


def _out_dir(args, cfg):
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    return out


def _seed(args, cfg):
    return cfg.seed if args.seed is None else args.seed


def _load_report(path):
    if not os.path.exists(path):
        raise ConfigError(f"calibration report not found: {path}")
    try:
        return CalibrationReport.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed calibration report {path}: {exc}") from exc


def calibrated_h_max(report):
    """Largest mesh size the error fits saw, or None if the report lacks it."""
    tops = [d["x_range"][1] for k, d in report.diagnostics.items()
            if k in ("discretization", "level_variance") and isinstance(d, dict)
            and "x_range" in d]
    return max(tops) if tops else None


# subcommands

def cmd_calibrate(args):
    cfg = load_config(args.config)
    c = cfg.calibration
    seed = _seed(args, cfg)
    if args.dry_run:
        m = build_device_mesh(cfg.geometry, max(c.hs))
        print(f"config ok: level-0 mesh h={max(c.hs)} with {m.n_vertices} vertices, "
              f"{m.n_triangles} triangles; seed {seed}")
        return EXIT_OK
    out = _out_dir(args, cfg)
    sampler = _sampler(cfg, seed)
    hs = sorted(c.hs, reverse=True)
    table_path = os.path.join(out, "qoi_table.csv")
    with open(table_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(
            ["seed"] + [f"h={h!r}" for h in hs + [c.h_ref]])

    def on_row(s, values):
        # appended per seed so a later failure keeps what was computed
        with open(table_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([s] + [repr(v) for v in values])

    report = calibrate_device(sampler, hs, c.h_ref, c.seeds, c.variance_levels,
                              c.timing_samples, log=log.info, on_row=on_row)
    report.diagnostics["seed"] = seed
    report.save(os.path.join(out, "report.json"))
    write_error_csv(report, os.path.join(out, "errors.csv"))
    write_timing_csv(report, os.path.join(out, "timings.csv"))
    e = report.error_model
    print(f"alpha={e.alpha:.4g} C1={e.C1:.4g} beta={e.beta:.4g} C0={e.C0:.4g} C00={e.C00:.4g}")
    return EXIT_OK


def _summary_row(res, eps, variant):
    plan = res.plan
    if isinstance(plan, McPlan):
        return {"epsilon": eps, "variant": variant, "status": "ok", "L": 0, "h0": plan.h,
                "ratios": None, "samples": [plan.M], "work": res.work,
                "objective": res.objective, "reason": None}
    ratios = plan.ratios if plan.geometric else list(plan.ratios)
    return {"epsilon": eps, "variant": variant, "status": "ok", "L": plan.L, "h0": plan.h0,
            "ratios": ratios, "samples": list(plan.samples), "work": res.work,
            "objective": res.objective, "reason": None}


def cmd_optimize(args):
    cfg = load_config(args.config)
    out = args.out or cfg.out
    report = _load_report(args.report or os.path.join(out, "report.json"))
    if args.eps:
        eps_list = normalize_eps(args.eps.split(","))
        cfg_units = args.eps_units or cfg.eps_units
    else:
        eps_list, cfg_units = cfg.eps, cfg.eps_units
    if cfg_units == "c00":
        eps_list = tuple(e * report.error_model.C00 for e in eps_list)
    variants = parse_variants(args.variant) if args.variant else cfg.variants
    L_max = cfg.optimizer.L_max if args.lmax is None else args.lmax
    if L_max < 0:
        raise ConfigError("--lmax must be non-negative")
    o = cfg.optimizer
    h_max = o.h_max
    top = calibrated_h_max(report)
    if top is not None and top < h_max:
        # the fitted constants say nothing about meshes coarser than the data
        log.warning("h_max %g capped at the largest calibrated mesh size %g", h_max, top)
        h_max = top
    if args.dry_run:
        print(f"config ok: tolerances {[f'{e:.4g}' for e in eps_list]}, variants "
              f"{list(variants)}, L_max {L_max}, h_max {h_max:g}")
        return EXIT_OK
    os.makedirs(os.path.join(out, "plans"), exist_ok=True)
    rows, curves = [], []
    for i, eps in enumerate(eps_list):
        for v in variants:
            try:
                if v == "mc":
                    res = optimize_mc(report.cost_model, report.error_model, eps, o.xi,
                                      h_max, o.starts)
                else:
                    res, curve = select_levels(report.cost_model, report.error_model, eps, v,
                                               L_max, o.xi, h_max, o.starts)
                    curves.append((eps, v, curve))
            except InfeasibleError as exc:
                log.warning("eps=%g %s: %s", eps, v, exc)
                rows.append({"epsilon": eps, "variant": v, "status": "infeasible",
                             "reason": str(exc).replace("\n", " ")})
                continue
            except ConvergenceError as exc:
                rows.append({"epsilon": eps, "variant": v, "status": "failed",
                             "reason": str(exc).replace("\n", " ")})
                continue
            write_json(res.to_dict(), os.path.join(out, "plans", f"{v}_eps{i}.json"))
            rows.append(_summary_row(res, eps, v))
    write_csv(os.path.join(out, "summary.csv"), SUMMARY_COLUMNS, rows)
    cpath = os.path.join(out, "levels.csv")
    with open(cpath, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(
            ["epsilon", "variant", "L", "objective", "work", "status"])
    for eps, v, curve in curves:
        tmp = cpath + ".part"
        write_curve_csv(curve, tmp, eps, v)
        with open(tmp) as src, open(cpath, "a") as dst:
            dst.writelines(src.read().splitlines(True)[1:])
        os.remove(tmp)
    for r in rows:
        if r["status"] == "ok":
            print(f"eps={r['epsilon']:.4g} {r['variant']:>4}: L={r['L']} work={r['work']:.4g}")
        else:
            print(f"eps={r['epsilon']:.4g} {r['variant']:>4}: {r['status']}")
    if rows and all(r["status"] == "infeasible" for r in rows):
        return EXIT_INFEASIBLE
    if any(r["status"] == "failed" for r in rows):
        return EXIT_SOLVER
    return EXIT_OK


def _plan_from_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"plan file not found: {path}")
    with open(path) as fh:
        d = json.load(fh)
    p = d.get("plan", d)
    try:
        if "M" in p:
            return d.get("variant", "mc"), MlmcPlan(0, float(p["h"]), 1.0, (int(p["M"]),))
        return d.get("variant", "geo"), MlmcPlan.from_dict(p)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed plan {path}: {exc}") from exc


def cmd_estimate(args):
    cfg = load_config(args.config)
    if not args.plan:
        raise ConfigError("estimate needs --plan")
    variant, plan = _plan_from_file(args.plan)
    report = _load_report(args.report) if args.report else None
    seed = _seed(args, cfg)
    threads = args.threads or cfg.threads or os.cpu_count()
    if args.dry_run:
        print(f"plan ok: {variant} L={plan.L} h={plan.mesh_sizes} M={list(plan.samples)}")
        return EXIT_OK
    out = _out_dir(args, cfg)
    sampler = _sampler(cfg, seed)
    res = mlmc_estimate(sampler, plan, threads=threads, retry=True)
    hs = plan.mesh_sizes
    levels = []
    for s in res.levels:
        row = {"level": s.level, "h": s.h, "M": s.M, "mean": s.mean, "sigma": s.sigma,
               "wall_clock": s.wall_clock}
        if report is not None:
            c = per_sample_cost(report.cost_model, s.h)
            if s.level:
                c += per_sample_cost(report.cost_model, hs[s.level - 1])
            row["predicted_seconds"] = s.M * c
        levels.append(row)
    stat = math.fsum(s.sigma / math.sqrt(s.M) for s in res.levels)
    doc = {"variant": variant, "seed": seed, "threads": threads, "plan": plan.to_dict(),
           "mean": res.mean, "levels": levels, "statistical_error": stat}
    if report is not None:
        e = report.error_model
        doc["bias_bound"] = e.C1 * hs[-1] ** e.alpha
    write_json(doc, os.path.join(out, "estimate.json"))
    write_csv(os.path.join(out, "estimate_levels.csv"),
              ("level", "h", "M", "mean", "sigma", "wall_clock", "predicted_seconds"), levels)
    print(f"mean={res.mean!r} statistical error~{stat:.3g}")
    return EXIT_OK


COMPARE_COLUMNS = ("epsilon", "work_mc", "work_geo", "work_free", "ratio_mc_geo",
                   "ratio_mc_free")


def compare_summaries(summaries):
    """Join summaries on epsilon.

    Returns rows with the MC and MLMC work per tolerance and the ratios
    MC/MLMC, plus ``rel_<variant>_<k>`` = work in summary 0 over work in
    summary ``k`` wherever both report the same variant.
    """
    if len(summaries) < 2:
        raise JoinError("compare needs at least two summaries")
    grids = [sorted({r["epsilon"] for r in s}) for s in summaries]
    for k, g in enumerate(grids[1:], 1):
        if g != grids[0]:
            raise JoinError(f"summary {k} has a different tolerance grid: {g} vs {grids[0]}")
    works = [{(r["epsilon"], r["variant"]): r["work"] for r in s if r["status"] == "ok"}
             for s in summaries]
    extra = [f"rel_{v}_{k}" for k in range(1, len(summaries)) for v in ("mc", "geo", "free")]
    rows = []
    for eps in sorted(grids[0], reverse=True):
        merged = {}
        for w in works:
            for v in ("mc", "geo", "free"):
                if (eps, v) in w and v not in merged:
                    merged[v] = w[(eps, v)]
        row = {"epsilon": eps}
        for v in ("mc", "geo", "free"):
            row[f"work_{v}"] = merged.get(v)
        for v in ("geo", "free"):
            if "mc" in merged and v in merged:
                row[f"ratio_mc_{v}"] = merged["mc"] / merged[v]
        for k in range(1, len(summaries)):
            for v in ("mc", "geo", "free"):
                a, b = works[0].get((eps, v)), works[k].get((eps, v))
                if a is not None and b is not None:
                    row[f"rel_{v}_{k}"] = a / b
        rows.append(row)
    return rows, COMPARE_COLUMNS + tuple(extra)


def cmd_compare(args):
    if len(args.summaries) < 2:
        raise JoinError("compare needs at least two summary files")
    for p in args.summaries:
        if not os.path.exists(p):
            raise ConfigError(f"summary not found: {p}")
    rows, cols = compare_summaries([read_summary(p) for p in args.summaries])
    if args.dry_run:
        print(f"join ok: {len(rows)} tolerances")
        return EXIT_OK
    path = args.out or "comparison.csv"
    if os.path.isdir(path):
        path = os.path.join(path, "comparison.csv")
    write_csv(path, cols, rows)
    for r in rows:
        print("eps={:.4g} ".format(r["epsilon"]) + " ".join(
            f"{c}={r[c]:.3g}" for c in ("ratio_mc_geo", "ratio_mc_free") if r.get(c)))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ddpmlmc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config (default: packaged)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--dry-run", action="store_true")

    sp = sub.add_parser("calibrate", help="fit error and cost models on the device")
    common(sp)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("optimize", help="optimal MC and MLMC plans from a report")
    common(sp)
    sp.add_argument("--report", help="calibration report (default: <out>/report.json)")
    sp.add_argument("--eps", help="comma-separated tolerances")
    sp.add_argument("--eps-units", choices=("absolute", "c00"))
    sp.add_argument("--variant", choices=("mc", "geo", "free", "all"))
    sp.add_argument("--lmax", type=int)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("estimate", help="run a plan on the device")
    common(sp)
    sp.add_argument("--plan", help="plan JSON written by optimize")
    sp.add_argument("--report", help="calibration report for cost predictions")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("compare", help="join optimize summaries")
    sp.add_argument("summaries", nargs="+")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--dry-run", action="store_true")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, JoinError, CalibrationDataError, PlanError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (fem.SolverError, fem.IterationError, LevelSolveError, EstimationError,
            ConvergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())

"""Experiment driver.

Subcommands:

* ``simulate``   run the sweep and write SimStats rows as CSV
* ``verify``     run a verification suite and print PASS/FAIL lines
* ``rank-table`` export the rank table of the configured job model
* ``bounds``     evaluate the loss terms, no simulation

Progress goes to stderr; data goes to files and stdout.  Exit codes:
0 success, 2 configuration error, 3 non-convergent run, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from multiprocessing import get_context

import numpy as np

from . import bounds as bounds_mod
from . import palm
from .bounds import InsufficientSamples
from .config import ConfigError, config_hash, load_experiment, with_updates
from .jobs import build_rank_table, export_rank_table_csv
from .sim import NonConvergence, run

SUMMARY_COLUMNS = (
    "config_hash", "name", "label", "k", "policy", "job_model", "rho", "seed",
    "replication", "arrivals", "total_time", "mean_n", "mean_n_ci", "mean_w",
    "mean_w_ci", "mean_j_setup", "mean_j_setup_ci", "lambda_hat",
)

PER_R_COLUMNS = (
    "config_hash", "replication", "r", "mean_w_r", "mean_w_r_ci", "mean_j_r",
    "rho_r_emp", "lambda_rcy", "rho_rcy", "rcy_sq_rate", "palm_rcy_swr",
    "palm_rcy_sares", "idle_wr", "setup_wr",
)


def log(msg):
    print(msg, file=sys.stderr, flush=True)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _run_one(args):
    cfg_kwargs, rep = args
    from .config import make_sim_config

    cfg = make_sim_config(cfg_kwargs)
    return rep, run(cfg)


def run_replications(spec_name, cfg, replications, workers):
    """Run ``replications`` seeds of one configuration, possibly in parallel."""
    from .config import _config_kwargs

    tasks = []
    for rep in range(replications):
        kw = _config_kwargs(cfg)
        kw["seed"] = cfg.seed + rep
        tasks.append((kw, rep))
    if workers > 1 and len(tasks) > 1:
        ctx = get_context("spawn")
        with ctx.Pool(min(workers, len(tasks))) as pool:
            results = pool.map(_run_one, tasks)
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda x: x[0])
    return [st for _, st in results]


def summary_row(cfg, stats, name, replication):
    return {
        "config_hash": config_hash(cfg),
        "name": name,
        "label": cfg.label,
        "k": cfg.k,
        "policy": cfg.policy,
        "job_model": cfg.job_model.kind,
        "rho": cfg.rho,
        "seed": cfg.seed,
        "replication": replication,
        "arrivals": stats.arrivals,
        "total_time": stats.total_time,
        "mean_n": stats.mean_n,
        "mean_n_ci": stats.mean_n_ci,
        "mean_w": stats.mean_w,
        "mean_w_ci": stats.mean_w_ci,
        "mean_j_setup": stats.mean_j_setup,
        "mean_j_setup_ci": stats.mean_j_setup_ci,
        "lambda_hat": stats.lambda_hat,
    }


def merged_row(cfg, stats_list, name):
    """Pooled row across replications with a spread-based CI."""
    from scipy.stats import t as tdist

    row = summary_row(cfg, stats_list[0], name, "merged")
    for field, ci_field in (
        ("mean_n", "mean_n_ci"),
        ("mean_w", "mean_w_ci"),
        ("mean_j_setup", "mean_j_setup_ci"),
    ):
        vals = np.array([getattr(st, field) for st in stats_list])
        row[field] = float(vals.mean())
        if len(vals) >= 2:
            row[ci_field] = float(
                tdist.ppf(0.975, len(vals) - 1) * vals.std(ddof=1) / math.sqrt(len(vals))
            )
        else:
            row[ci_field] = getattr(stats_list[0], ci_field)
    row["arrivals"] = sum(st.arrivals for st in stats_list)
    row["total_time"] = sum(st.total_time for st in stats_list)
    row["lambda_hat"] = float(np.mean([st.lambda_hat for st in stats_list]))
    row["seed"] = cfg.seed
    return row


def write_csv(path, columns, rows):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def per_r_rows(cfg, stats, replication):
    rows = []
    h = config_hash(cfg)
    ci = np.atleast_1d(stats.mean_w_r_ci)
    for i, r in enumerate(stats.r_grid):
        rows.append({
            "config_hash": h,
            "replication": replication,
            "r": float(r),
            "mean_w_r": float(stats.mean_w_r[i]),
            "mean_w_r_ci": float(ci[i]),
            "mean_j_r": float(stats.mean_j_r[i]),
            "rho_r_emp": float(stats.rho_r_emp[i]),
            "lambda_rcy": float(stats.lambda_rcy[i]),
            "rho_rcy": float(stats.rho_rcy[i]),
            "rcy_sq_rate": float(stats.rcy_sq_rate[i]),
            "palm_rcy_swr": float(stats.palm_rcy_swr[i]),
            "palm_rcy_sares": float(stats.palm_rcy_sares[i]),
            "idle_wr": float(stats.idle_wr[i]),
            "setup_wr": float(stats.setup_wr[i]),
        })
    return rows


def cmd_simulate(spec, out_dir, workers):
    os.makedirs(out_dir, exist_ok=True)
    summary = []
    per_r = []
    for desc, cfg in spec.points():
        tag = " ".join(f"{k}={v}" for k, v in desc.items()) or "base"
        log(f"simulate [{spec.name}] {tag} ({spec.replications} reps)")
        stats_list = run_replications(spec.name, cfg, spec.replications, workers)
        for rep, st in enumerate(stats_list):
            rep_cfg = with_updates(cfg, seed=cfg.seed + rep)
            summary.append(summary_row(rep_cfg, st, spec.name, rep))
            per_r.extend(per_r_rows(rep_cfg, st, rep))
        summary.append(merged_row(cfg, stats_list, spec.name))
    write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summary)
    if per_r:
        write_csv(os.path.join(out_dir, "per_r.csv"), PER_R_COLUMNS, per_r)
    log(f"wrote {out_dir}/summary.csv ({len(summary)} rows)")
    return 0


def _verdict_exit(lines, all_passed):
    for line in lines:
        print(line)
    return 0 if all_passed else 4


def cmd_verify(spec, out_dir, workers):
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    ok = True

    points = spec.points()
    suite = [s for s in spec.suite if s != "simulate"]
    if not suite:
        raise ConfigError("verify needs at least one non-simulate suite entry")

    # verification suites use one long replication per distinct configuration
    stats_cache = {}

    def stats_for(cfg):
        key = config_hash(cfg)
        if key not in stats_cache:
            log(f"verify [{spec.name}] running {cfg.policy} k={cfg.k} rho={cfg.rho:.3f}")
            stats_cache[key] = run(cfg)
        return stats_cache[key]

    for desc, cfg in points:
        tag = " ".join(f"{k}={v}" for k, v in desc.items()) or "base"

        if "wine" in suite:
            st = stats_for(cfg)
            rep = palm.wine_check(st)
            passed = rep.rel_gap <= 0.01
            ok &= passed
            lines.append(f"[{tag}] {rep.summary()} {'PASS' if passed else 'FAIL'}")

        if "decomposition" in suite:
            st = stats_for(cfg)
            if len(st.r_grid) == 0:
                raise ConfigError("decomposition suite needs an r_grid")
            rep = palm.decomposition_check(st)
            ok &= rep.passed
            lines.append(f"[{tag}] {rep.summary()}")
            h = config_hash(cfg)
            rep.to_csv(os.path.join(out_dir, f"decomposition_{h}.csv"))
            ct = palm.cost_terms(st)
            ct.to_csv(os.path.join(out_dir, f"cost_terms_{h}.csv"))
            lines.append(f"[{tag}] {ct.summary()}")

        if "gap" in suite:
            st = stats_for(cfg)
            base_cfg = spec.baseline_for(cfg)
            base = stats_for(base_cfg)
            verdict = bounds_mod.check_gap_multiserver(st, base)
            ok &= verdict.passed
            lines.append(f"[{tag}] {verdict.line()}")

        if "single-server-optimality" in suite:
            by_policy = {}
            for pol in ("gittins", "fcfs", "lcfs-pr", "random"):
                by_policy[pol] = stats_for(with_updates(cfg, policy=pol))
            for v in bounds_mod.check_single_server_optimality(by_policy):
                ok &= v.passed
                lines.append(f"[{tag}] {v.line()}")

        if "setup-bound" in suite:
            st = stats_for(cfg)
            if cfg.setup.upper_support() == 0.0:
                lines.append(f"[{tag}] setup-bound: SKIP (no setup times)")
            else:
                for v in bounds_mod.check_setup_number_bound(st):
                    ok &= v.passed
                    lines.append(f"[{tag}] {v.line()}")

    if "heavy-traffic" in suite:
        if "rho" not in spec.sweep:
            raise ConfigError("heavy-traffic suite needs a [sweep] rho list")
        pairs = []
        S = spec.base["job_model"].size_dist
        cs2, ca2 = S.cv2(), spec.base["arrival"].cv2()
        for desc, cfg in points:
            base_cfg = spec.baseline_for(cfg)
            pairs.append((desc.get("rho", cfg.rho), stats_for(cfg), stats_for(base_cfg)))
        rows = bounds_mod.heavy_traffic_ratio(pairs, cs2, ca2)
        limit = rows[0]["limit"]
        for row in rows:
            lines.append(
                f"[rho={row['rho']}] ratio {row['ratio']:.4f} +- {row['ratio_ci']:.4f} "
                f"(limit {limit:.4f})"
            )
        final = rows[-1]
        passed = abs(final["ratio"] - limit) <= max(0.1 * limit, 3.0 * final["ratio_ci"])
        ok &= passed
        lines.append(f"heavy-traffic: final ratio {'PASS' if passed else 'FAIL'}")

    return _verdict_exit(lines, ok)


def cmd_rank_table(spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _, cfg = spec.points()[0]
    rank_fn = build_rank_table(cfg.job_model, cfg.rank_grid_size)
    path = os.path.join(out_dir, "rank_table.csv")
    export_rank_table_csv(rank_fn, path)
    log(f"wrote {path}")
    return 0


def cmd_bounds(spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for desc, cfg in spec.points():
        rep = bounds_mod.loss_terms(cfg)
        tag = " ".join(f"{k}={v}" for k, v in desc.items()) or "base"
        print(f"[{tag}] {rep.summary()}")
        rows.append({
            "config_hash": config_hash(cfg),
            "k": cfg.k,
            "rho": cfg.rho,
            "loss_servers": rep.loss_servers,
            "loss_arrivals": rep.loss_arrivals,
            "loss_setup": rep.loss_setup,
            "total": rep.total(),
            "a_min": rep.a_min,
            "a_max": rep.a_max,
            "setup_excess": rep.setup_excess,
        })
    write_csv(
        os.path.join(out_dir, "bounds.csv"),
        ("config_hash", "k", "rho", "loss_servers", "loss_arrivals", "loss_setup",
         "total", "a_min", "a_max", "setup_excess"),
        rows,
    )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ggkq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "verify", "rank-table", "bounds"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML experiment file")
        sp.add_argument("--seed", type=int, default=None, help="override base seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument(
            "--workers", type=int,
            default=int(os.environ.get("GGKQ_WORKERS", "1")),
            help="replication worker pool size (env GGKQ_WORKERS)",
        )
        sp.add_argument("--suite", default=None, help="comma-separated suite override")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = load_experiment(args.config)
        if args.seed is not None:
            spec.base["seed"] = args.seed
        if args.suite:
            spec.suite = [s.strip() for s in args.suite.split(",") if s.strip()]
            from .config import SUITES

            for s in spec.suite:
                if s not in SUITES:
                    raise ConfigError(f"unknown suite entry {s!r}")
        out_dir = args.out or spec.output_dir
        if args.command == "simulate":
            return cmd_simulate(spec, out_dir, args.workers)
        if args.command == "verify":
            return cmd_verify(spec, out_dir, args.workers)
        if args.command == "rank-table":
            return cmd_rank_table(spec, out_dir)
        if args.command == "bounds":
            return cmd_bounds(spec, out_dir)
        raise AssertionError(args.command)
    except ConfigError as exc:
        log(f"config error: {exc}")
        return 2
    except InsufficientSamples as exc:
        log(f"config error: {exc}")
        return 2
    except NonConvergence as exc:
        log(f"non-convergent run: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())

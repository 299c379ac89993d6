"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy simulations are shared through module-scoped fixtures and run on a
small process pool.  Tolerances are pinned here and nowhere else:

 1  single-job wine integral = 1 (1e-12 known sizes, 1e-3 unknown)
 2  pathwise wine = N at sampled epochs (1e-6, known sizes)
 3  M/M/1 mean_n = 1 within 3 CI for every policy, CI <= 2% at 1e6 arrivals
 4  M/G/1 FCFS matches the Pollaczek-Khinchine value within 3 CI
 5  work decomposition residual = 0 within 3 CI at every grid r, 6 configs
 6  known-size r-work moments match closed forms within 3 CI, 16 r values
 7  Gittins minimizes mean_n among non-idling policies in M/G/1 with setup
 8  observed multiserver gap <= loss-term bound + 3 CI on the 6-config grid
 9  conditional E[N | setup age] respects its linear bound in every bin
10  single-server SRPT heavy-traffic ratio: level and trend at high load
11  Gittins M/G/2 over single-server SRPT: trend and level at high load
12  byte-identical CSV under a fixed seed
"""

import os
import subprocess
import sys
from multiprocessing import get_context

import numpy as np
import pytest

from ggkq import bounds, palm
from ggkq.config import config_hash
from ggkq.dists import (
    Bimodal,
    Deterministic,
    Erlang,
    Exponential,
    Uniform,
    hyperexp_balanced,
)
from ggkq.jobs import KNOWN, UNKNOWN, JobModel, build_rank_table
from ggkq.sim import SimConfig, run

RHO = 0.7  # shared load for the decomposition/gap grid

_CACHE = {}


def run_pool(configs):
    """Run configurations on a 2-process pool with in-session caching."""
    missing = []
    for cfg in configs:
        h = config_hash(cfg)
        if h not in _CACHE and all(config_hash(c) != h for c, _ in missing):
            missing.append((cfg, h))
    if missing:
        if len(missing) > 1 and os.environ.get("GGKQ_ACCEPT_SERIAL") != "1":
            ctx = get_context("spawn")
            with ctx.Pool(2) as pool:
                stats = pool.map(run, [c for c, _ in missing])
        else:
            stats = [run(c) for c, _ in missing]
        for (cfg, h), st in zip(missing, stats):
            _CACHE[h] = st
    return [_CACHE[config_hash(cfg)] for cfg in configs]


def report(num, passed, detail):
    line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


def cfg_for(name, k, arrival, size, model, setup=None, policy="gittins",
            arrivals=1_000_000, seed=0, r_grid=(), n_inspect=4000, batch_count=32):
    return SimConfig(
        k=k, arrival=arrival, job_model=JobModel(model, size), setup=setup,
        policy=policy, horizon=arrivals * arrival.mean(), seed=seed,
        r_grid=tuple(float(r) for r in r_grid), batch_count=batch_count,
        n_inspect=n_inspect, label=name,
    )


# ---- criteria 1 and 2: the number-work identity ----------------------------


def test_criterion_1_single_job_wine():
    cases = [
        (KNOWN, Exponential(1.0), 1e-12),
        (UNKNOWN, Exponential(1.0), 1e-3),
        (UNKNOWN, Bimodal(1.0, 0.9, 10.0), 1e-3),
        (UNKNOWN, Uniform(0.0, 1.0), 1e-3),
    ]
    rng = np.random.Generator(np.random.PCG64(2024))
    worst = 0.0
    for kind, dist, tol in cases:
        rf = build_rank_table(JobModel(kind, dist))
        top = min(dist.upper_support(), dist.quantile(1.0 - 1e-6))
        checked = 0
        while checked < 100:
            x = float(rng.random() * 0.98 * top)
            if float(dist.tail(x)) <= 1e-9:
                continue
            err = abs(rf.single_job_wine(x) - 1.0)
            worst = max(worst, err / tol)
            assert err <= tol, (kind, dist, x, err)
            checked += 1
    report(1, True, f"400 states, worst error {worst:.3f} of tolerance")


def test_criterion_2_pathwise_wine_known_mg1():
    cfg = cfg_for("wine-mg1", 1, Exponential(0.7), hyperexp_balanced(1.0, 4.0),
                  KNOWN, arrivals=30_000, seed=11, n_inspect=1500)
    st, = run_pool([cfg])
    rep = palm.wine_check(st)
    passed = rep.n_epochs >= 1000 and rep.pathwise_max_abs <= 1e-6
    report(2, passed, f"{rep.n_epochs} epochs, max |integral - N| = {rep.pathwise_max_abs:.2e}")
    assert rep.n_epochs >= 1000
    assert rep.pathwise_max_abs <= 1e-6


# ---- criteria 3 and 4: classical oracles ------------------------------------


@pytest.fixture(scope="module")
def mm1_policy_stats():
    cfgs = [
        cfg_for(f"mm1-{pol}", 1, Exponential(0.5), Exponential(1.0), UNKNOWN,
                policy=pol, arrivals=1_000_000, seed=100 + i)
        for i, pol in enumerate(("gittins", "fcfs", "lcfs-pr", "random"))
    ]
    return dict(zip(("gittins", "fcfs", "lcfs-pr", "random"), run_pool(cfgs)))


def test_criterion_3_mm1_oracle(mm1_policy_stats):
    lines = []
    ok = True
    for pol, st in mm1_policy_stats.items():
        within = abs(st.mean_n - 1.0) <= 3.0 * st.mean_n_ci
        tight = st.mean_n_ci <= 0.02
        ok &= within and tight
        lines.append(f"{pol}: {st.mean_n:.4f}+-{st.mean_n_ci:.4f}")
    report(3, ok, "; ".join(lines))
    for pol, st in mm1_policy_stats.items():
        assert abs(st.mean_n - 1.0) <= 3.0 * st.mean_n_ci, (pol, st.mean_n, st.mean_n_ci)
        assert st.mean_n_ci <= 0.02, (pol, st.mean_n_ci)


def test_criterion_4_pollaczek_khinchine():
    S = hyperexp_balanced(1.0, 4.0)
    cfg = cfg_for("pk", 1, Exponential(0.7), S, KNOWN, policy="fcfs",
                  arrivals=1_000_000, seed=21)
    st, = run_pool([cfg])
    lam = 0.7
    theory = 0.7 + lam**2 * S.second_moment() / (2.0 * (1.0 - 0.7))
    passed = abs(st.mean_n - theory) <= 3.0 * st.mean_n_ci
    report(4, passed, f"sim {st.mean_n:.4f}+-{st.mean_n_ci:.4f} vs P-K {theory:.4f}")
    assert passed


# ---- criteria 5 and 8: decomposition grid and gap bound ----------------------

# six-config grid at rho = 0.7; known sizes throughout so the gap baseline
# (single-server shortest-remaining-work) shares the information model
def _grid_configs():
    h2 = hyperexp_balanced(1.0, 4.0)
    return [
        ("m/m/1", cfg_for(
            "g-mm1", 1, Exponential(RHO), Exponential(1.0), KNOWN,
            arrivals=1_000_000, seed=51, r_grid=np.geomspace(0.1, 6.0, 12))),
        ("m/g/2", cfg_for(
            "g-mg2", 2, Exponential(RHO), h2, KNOWN,
            arrivals=1_000_000, seed=52, r_grid=np.geomspace(0.1, 25.0, 12))),
        ("d/m/1", cfg_for(
            "g-dm1", 1, Deterministic(1.0 / RHO), Exponential(1.0), KNOWN,
            arrivals=1_000_000, seed=53, r_grid=np.geomspace(0.1, 6.0, 12))),
        ("u/e/2", cfg_for(
            "g-ue2", 2, Uniform(0.0, 2.0 / RHO), Erlang(2, 2.0), KNOWN,
            arrivals=1_000_000, seed=54, r_grid=np.geomspace(0.08, 4.0, 12))),
        ("m/g/1+setup", cfg_for(
            "g-mg1s", 1, Exponential(RHO / 1.9), Bimodal(1.0, 0.9, 10.0), KNOWN,
            setup=Deterministic(1.0),
            arrivals=800_000, seed=55, r_grid=np.geomspace(0.15, 9.5, 12))),
        ("g/g/2+setup", cfg_for(
            "g-gg2s", 2, Erlang(2, 2.0 * RHO), h2, KNOWN,
            setup=Uniform(0.0, 1.0),
            arrivals=1_000_000, seed=56, r_grid=np.geomspace(0.08, 25.0, 12))),
    ]


@pytest.fixture(scope="module")
def grid_stats():
    named = _grid_configs()
    stats = run_pool([cfg for _, cfg in named])
    return [(name, cfg, st) for (name, cfg), st in zip(named, stats)]


def test_criterion_5_work_decomposition(grid_stats):
    ok = True
    details = []
    failures = []
    for name, cfg, st in grid_stats:
        rep = palm.decomposition_check(st)
        ok &= rep.passed
        details.append(f"{name}: max {rep.max_sigma():.2f} ci")
        if not rep.passed:
            failures.append((name, [r for r in rep.rows
                                    if abs(r["residual"]) > 3 * r["residual_ci"]]))
    report(5, ok, "; ".join(details))
    assert ok, failures


@pytest.fixture(scope="module")
def grid_baselines(grid_stats):
    cfgs = []
    for name, cfg, _ in grid_stats:
        cfgs.append(cfg_for(
            f"b-{name}", 1, cfg.arrival, cfg.job_model.size_dist, KNOWN,
            arrivals=1_000_000, seed=cfg.seed + 900))
    return run_pool(cfgs)


def test_criterion_8_gap_bound(grid_stats, grid_baselines):
    ok = True
    details = []
    for (name, cfg, st), base in zip(grid_stats, grid_baselines):
        verdict = bounds.check_gap_multiserver(st, base)
        ok &= verdict.passed
        details.append(
            f"{name}: gap {verdict.observed:+.3f} <= {verdict.bound:.3f}"
            f"{'' if verdict.passed else ' VIOLATED'}"
        )
    report(8, ok, "; ".join(details))
    assert ok, details


# ---- criterion 6: known-size r-work moments ----------------------------------


def test_criterion_6_srpt_r_work_moments():
    r_grid = np.geomspace(0.15, 6.0, 16)
    cfg = cfg_for("srpt-moments", 1, Exponential(0.7), Exponential(1.0), KNOWN,
                  arrivals=1_000_000, seed=61, r_grid=r_grid)
    st, = run_pool([cfg])
    rows = palm.srpt_moment_check(st)
    ok = True
    worst = 0.0
    for row in rows:
        d1 = abs(row["rho_r_sim"] - row["rho_r_exact"]) / max(row["rho_r_ci"], 1e-12)
        d2 = abs(row["rcy_excess_sim"] - row["rcy_excess_exact"]) / max(row["rcy_excess_ci"], 1e-12)
        worst = max(worst, d1, d2)
        ok &= d1 <= 3.0 and d2 <= 3.0
    report(6, ok, f"16 r values, worst deviation {worst:.2f} ci")
    assert ok, rows


# ---- criterion 7: single-server optimality with setup -------------------------


def test_criterion_7_single_server_optimality():
    S = hyperexp_balanced(1.0, 4.0)
    ok = True
    details = []
    for rho in (0.5, 0.8):
        cfgs = {
            pol: cfg_for(f"opt-{rho}-{pol}", 1, Exponential(rho), S, UNKNOWN,
                         setup=Deterministic(0.5), policy=pol,
                         arrivals=400_000, seed=71 + int(10 * rho))
            for pol in ("gittins", "fcfs", "lcfs-pr", "random")
        }
        stats = dict(zip(cfgs, run_pool(list(cfgs.values()))))
        verdicts = bounds.check_single_server_optimality(stats)
        ok &= all(v.passed for v in verdicts)
        g = stats["gittins"].mean_n
        others = ", ".join(f"{p}={stats[p].mean_n:.3f}" for p in cfgs if p != "gittins")
        details.append(f"rho={rho}: gittins={g:.3f} vs {others}")
    report(7, ok, "; ".join(details))
    assert ok, details


# ---- criterion 9: number-in-system during setup --------------------------------


def test_criterion_9_setup_number_bound():
    configs = [
        cfg_for("setup-a", 1, Exponential(0.5), Exponential(1.0), KNOWN,
                setup=Deterministic(1.0), arrivals=1_000_000, seed=81,
                n_inspect=12_000),
        cfg_for("setup-b", 2, Uniform(0.0, 2.0), Exponential(2.0), KNOWN,
                setup=Uniform(0.0, 1.0), arrivals=1_000_000, seed=82,
                n_inspect=12_000),
    ]
    ok = True
    details = []
    for cfg, st in zip(configs, run_pool(configs)):
        verdicts = bounds.check_setup_number_bound(st)
        bad = [v for v in verdicts if not v.passed]
        ok &= not bad and len(verdicts) >= 15
        details.append(f"{cfg.label}: {len(verdicts)} bins, {len(bad)} violations")
    report(9, ok, "; ".join(details))
    assert ok, details


# ---- criteria 10 and 11: heavy-traffic behavior --------------------------------


@pytest.fixture(scope="module")
def srpt_ratio_rows():
    pairs = []
    for rho, n_arr, seed in ((0.8, 1_000_000, 91), (0.9, 1_000_000, 92), (0.95, 2_000_000, 93)):
        num = cfg_for("ht-d", 1, Deterministic(1.0 / rho), Exponential(1.0), KNOWN,
                      arrivals=n_arr, seed=seed)
        den = cfg_for("ht-m", 1, Exponential(rho), Exponential(1.0), KNOWN,
                      arrivals=n_arr, seed=seed + 400)
        a, b = run_pool([num, den])
        pairs.append((rho, a, b))
    return bounds.heavy_traffic_ratio(pairs, cs2=1.0, ca2=0.0)


def test_criterion_10_trend_toward_limit(srpt_ratio_rows):
    rows = srpt_ratio_rows
    ratios = [r["ratio"] for r in rows]
    limit = rows[0]["limit"]
    monotone = all(a > b for a, b in zip(ratios, ratios[1:]))
    approaching = abs(ratios[-1] - limit) < abs(ratios[0] - limit) and ratios[-1] > limit
    detail = " -> ".join(f"{r:.4f}" for r in ratios) + f" (limit {limit})"
    report(10, monotone and approaching, "trend " + detail)
    assert monotone and approaching, detail


def test_criterion_10_level_at_rho95(srpt_ratio_rows):
    # the limiting ratio is 0.5; at rho = 0.95 the finite-load value is
    # required to sit within 10% of it
    row = srpt_ratio_rows[-1]
    passed = abs(row["ratio"] - 0.5) <= 0.05
    report(10, passed,
           f"level: ratio at rho=0.95 is {row['ratio']:.4f}+-{row['ratio_ci']:.4f} "
           f"vs 0.5 +- 0.05 band")
    assert passed, row


@pytest.fixture(scope="module")
def gittins_ratio_runs():
    S = hyperexp_balanced(1.0, 4.0)
    out = []
    for rho, n_arr, seed in ((0.8, 400_000, 95), (0.9, 500_000, 96), (0.95, 700_000, 97)):
        num = cfg_for("g2-num", 2, Exponential(rho), S, UNKNOWN,
                      arrivals=n_arr, seed=seed)
        den_srpt = cfg_for("g2-den-srpt", 1, Exponential(rho), S, KNOWN,
                           arrivals=1_000_000, seed=seed + 400)
        den_same = cfg_for("g2-den-same", 1, Exponential(rho), S, UNKNOWN,
                           arrivals=n_arr, seed=seed + 800)
        a, b, c = run_pool([num, den_srpt, den_same])
        out.append((rho, a, b, c))
    return out


def test_criterion_11_gittins_over_srpt(gittins_ratio_runs):
    rows = bounds.heavy_traffic_ratio(
        [(rho, a, b) for rho, a, b, _ in gittins_ratio_runs], cs2=4.0, ca2=1.0
    )
    ratios = [r["ratio"] for r in rows]
    decreasing = all(a > b for a, b in zip(ratios, ratios[1:]))
    level = ratios[-1] < 1.5
    detail = " -> ".join(f"{r:.4f}" for r in ratios)
    report(11, decreasing and level, f"ratios {detail} (need decreasing, < 1.5 at 0.95)")
    assert decreasing and level, detail


def test_criterion_11_within_model_proxy(gittins_ratio_runs):
    # supplementary check: normalizing by the single-server system with the
    # same information model isolates the multiserver penalty, which is the
    # quantity that shrinks at high load
    rows = bounds.heavy_traffic_ratio(
        [(rho, a, c) for rho, a, _, c in gittins_ratio_runs], cs2=4.0, ca2=1.0
    )
    ratios = [r["ratio"] for r in rows]
    level = ratios[-1] < 1.5
    trend = ratios[-1] <= ratios[0] + 0.05
    detail = " -> ".join(f"{r:.4f}" for r in ratios)
    report(11, level and trend, f"(within-model) ratios {detail}")
    assert level and trend, detail


# ---- criterion 12: determinism --------------------------------------------------


def test_criterion_12_byte_identical_csv(tmp_path):
    toml = """
name = "det"
seed = 31415
replications = 2
suite = ["simulate"]

[sim]
k = 2
policy = "gittins"
job_model = "known"
arrivals = 3000
batch_count = 20
n_inspect = 100
r_grid = [0.5, 1.0, 2.0]

[sim.arrival]
family = "exponential"
rate = 0.6

[sim.size]
family = "exponential"
rate = 1.0

[sim.setup]
family = "deterministic"
value = 0.5
"""
    path = tmp_path / "det.toml"
    path.write_text(toml)
    outs = []
    for sub in ("a", "b"):
        res = subprocess.run(
            [sys.executable, "-m", "ggkq.cli", "simulate", "--config", str(path),
             "--out", str(tmp_path / sub)],
            capture_output=True, text=True,
        )
        assert res.returncode == 0, res.stderr
        outs.append((tmp_path / sub / "summary.csv").read_bytes()
                    + (tmp_path / sub / "per_r.csv").read_bytes())
    passed = outs[0] == outs[1]
    report(12, passed, f"{len(outs[0])} CSV bytes identical across reruns")
    assert passed

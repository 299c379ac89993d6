"""Closed-form suboptimality loss terms and theorem-level verdicts.

The three loss terms bound how far the Gittins policy's mean number-in-
system in a G/G/k queue with setup can sit above the optimal single-server
value:

    loss_servers  = C (k - 1) log(1 / (1 - rho)),   C = 9 / (8 log 1.5) + 1
    loss_arrivals = lam (A_max - A_min)
    loss_setup    = 1{P(U > 0) > 0} (2 (k - 1) + lam (A_max + k E[U_e]))

where [A_min, A_max] bounds the conditional mean residual interarrival
time.  The verdict helpers compare simulated estimates against these
bounds, against each other (single-server optimality), and against the
known heavy-traffic ratio for SRPT.
"""

from __future__ import annotations

import math

import numpy as np

C_CONST = 9.0 / (8.0 * math.log(1.5)) + 1.0


class InsufficientSamples(Exception):
    """Too few observation epochs to run a conditional check."""


class BoundsReport:
    def __init__(self, loss_servers, loss_arrivals, loss_setup, a_min, a_max,
                 setup_excess, lam, rho, k):
        self.loss_servers = loss_servers
        self.loss_arrivals = loss_arrivals
        self.loss_setup = loss_setup
        self.a_min = a_min
        self.a_max = a_max
        self.setup_excess = setup_excess
        self.lam = lam
        self.rho = rho
        self.k = k
        self.c_const = C_CONST

    def total(self):
        return self.loss_servers + self.loss_arrivals + self.loss_setup

    def summary(self):
        return (
            f"loss terms: servers {self.loss_servers:.4f} + arrivals "
            f"{self.loss_arrivals:.4f} + setup {self.loss_setup:.4f} "
            f"= {self.total():.4f}"
        )


def loss_terms(config):
    """Evaluate the three loss terms for a simulation configuration."""
    lam = config.lam
    rho = config.rho
    k = config.k
    rb = config.arrival.residual_bounds()
    u = config.setup
    setup_excess = u.excess_mean()
    has_setup = u.upper_support() > 0.0
    loss_servers = C_CONST * (k - 1) * math.log(1.0 / (1.0 - rho))
    loss_arrivals = lam * (rb.a_max - rb.a_min)
    loss_setup = 0.0
    if has_setup:
        loss_setup = 2.0 * (k - 1) + lam * (rb.a_max + k * setup_excess)
    return BoundsReport(
        loss_servers, loss_arrivals, loss_setup, rb.a_min, rb.a_max,
        setup_excess, lam, rho, k,
    )


class Verdict:
    def __init__(self, name, passed, observed, bound, ci, detail=""):
        self.name = name
        self.passed = passed
        self.observed = observed
        self.bound = bound
        self.ci = ci
        self.detail = detail

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        txt = (
            f"{self.name}: {flag} observed {self.observed:.4f} vs bound "
            f"{self.bound:.4f} (ci {self.ci:.4f})"
        )
        if self.detail:
            txt += f" [{self.detail}]"
        return txt


def check_gap_multiserver(gtn_stats, baseline_stats, report=None):
    """Suboptimality gap against the single-server known-size baseline.

    PASS when mean_n(gittins, G/G/k/setup) - mean_n(srpt, G/G/1) stays
    below the sum of the loss terms, within three combined CI half-widths.
    """
    if report is None:
        report = loss_terms(gtn_stats.config)
    gap = gtn_stats.mean_n - baseline_stats.mean_n
    ci = math.hypot(gtn_stats.mean_n_ci, baseline_stats.mean_n_ci)
    bound = report.total()
    return Verdict(
        "gap_bound", gap <= bound + 3.0 * ci, gap, bound, ci,
        detail=report.summary(),
    )


def check_single_server_optimality(stats_by_policy):
    """Gittins minimizes mean number-in-system among the tested policies."""
    if "gittins" not in stats_by_policy:
        raise ValueError("needs a gittins run to compare against")
    g = stats_by_policy["gittins"]
    verdicts = []
    for name, st in stats_by_policy.items():
        if name == "gittins":
            continue
        ci = math.hypot(g.mean_n_ci, st.mean_n_ci)
        verdicts.append(Verdict(
            f"gittins<= {name}", g.mean_n <= st.mean_n + 3.0 * ci,
            g.mean_n, st.mean_n, ci,
        ))
    return verdicts


def heavy_traffic_ratio(pairs, cs2, ca2):
    """Per-load ratio of mean numbers-in-system with the analytic limit.

    ``pairs`` is a list of (rho, numerator stats, denominator stats); the
    limiting ratio is (cs2 + ca2) / (cs2 + 1).
    """
    limit = 1.0 if math.isinf(cs2) else (cs2 + ca2) / (cs2 + 1.0)
    rows = []
    for rho, num, den in pairs:
        ratio = num.mean_n / den.mean_n
        rel = math.sqrt(
            (num.mean_n_ci / num.mean_n) ** 2 + (den.mean_n_ci / den.mean_n) ** 2
        )
        rows.append({
            "rho": rho,
            "ratio": ratio,
            "ratio_ci": ratio * rel,
            "limit": limit,
        })
    return rows


def check_setup_number_bound(stats, n_bins=20, min_samples=100):
    """Conditional mean number-in-system during setup against its bound.

    Bins the (setup wall age, N) inspection samples into equal-probability
    age bins and requires mean N <= lam a + lam A_max + k - 1 (+3 ci) at
    the bin mean age a.
    """
    samples = stats.setup_samples
    if len(samples) < min_samples:
        raise InsufficientSamples(
            f"only {len(samples)} setup-age samples (need {min_samples})"
        )
    cf = stats.config
    lam = cf.lam
    a_max = cf.arrival.residual_bounds().a_max
    ages, ns = samples[:, 0], samples[:, 1]
    edges = np.quantile(ages, np.linspace(0.0, 1.0, n_bins + 1))
    verdicts = []
    for i in range(n_bins):
        lo, hi = edges[i], edges[i + 1]
        mask = (ages >= lo) & (ages <= hi if i == n_bins - 1 else ages < hi)
        if mask.sum() < 2:
            continue
        mean_age = float(ages[mask].mean())
        mean_n = float(ns[mask].mean())
        ci = 2.0 * float(ns[mask].std(ddof=1)) / math.sqrt(mask.sum())
        bound = lam * mean_age + lam * a_max + cf.k - 1
        verdicts.append(Verdict(
            f"setup_bin_a={mean_age:.3f}", mean_n <= bound + 3.0 * ci,
            mean_n, bound, ci, detail=f"n={int(mask.sum())}",
        ))
    return verdicts

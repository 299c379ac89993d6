"""Identity checks on simulation output.

Three families of checks:

* the number-work identity: mean number-in-system equals the integral of
  mean r-work against 1/r^2, both in time average and pathwise at sampled
  epochs;
* the work decomposition law: per r, mean r-work equals a fixed term built
  from fresh r-work moments and the interarrival excess, plus recycling,
  idleness/setup, and residual-interarrival corrections, all estimated from
  event and time averages;
* the four cost terms (residual interarrival, recycling, idleness, setup),
  each an integral of a per-r quantity against 1/(r^2 (1 - rho_r)), which
  reassemble the mean number-in-system.

All confidence intervals come from batch means carried by SimStats.
"""

from __future__ import annotations

import math

import numpy as np

from .sim import batch_ci


class WineReport:
    def __init__(self, direct, direct_ci, via_integral, via_ci, pathwise_max_abs,
                 pathwise_max_rel, n_epochs):
        self.direct = direct
        self.direct_ci = direct_ci
        self.via_integral = via_integral
        self.via_ci = via_ci
        self.pathwise_max_abs = pathwise_max_abs
        self.pathwise_max_rel = pathwise_max_rel
        self.n_epochs = n_epochs

    @property
    def rel_gap(self):
        return abs(self.via_integral - self.direct) / max(self.direct, 1e-12)

    def summary(self):
        return (
            f"WINE: direct {self.direct:.4f} vs integral {self.via_integral:.4f} "
            f"(rel gap {self.rel_gap:.2e}, pathwise max {self.pathwise_max_abs:.2e} "
            f"over {self.n_epochs} epochs)"
        )


def wine_check(stats, rank_fn=None):
    """Mean number-in-system, directly and through the r-work integral."""
    snaps = stats.snapshots
    if len(snaps):
        diff = np.abs(snaps[:, 1] - snaps[:, 0])
        rel = diff / np.maximum(snaps[:, 0], 1.0)
        pmax, rmax = float(diff.max()), float(rel.max())
    else:
        pmax = rmax = math.nan
    return WineReport(
        stats.mean_n, stats.mean_n_ci,
        stats.wine_time_avg, stats.wine_time_avg_ci,
        pmax, rmax, len(snaps),
    )


def _model_quantities(stats):
    cf = stats.config
    rank_fn = stats.meta["rank_fn"]
    lam = cf.lam
    r = stats.r_grid
    m = np.array([rank_fn.initial_r_work_moments(rr)[0] for rr in r])
    m2 = np.array([rank_fn.initial_r_work_moments(rr)[1] for rr in r])
    rho_r = lam * m
    ae = cf.arrival.excess_mean()
    return lam, m, m2, rho_r, ae


class DecompositionReport:
    """Per-r ledger of the work decomposition law with residual CIs."""

    COLUMNS = (
        "r", "lhs", "rhs_fixed", "rhs_rcy", "rhs_acc_w", "rhs_acc_ares",
        "residual", "residual_ci",
    )

    def __init__(self, rows):
        self.rows = rows

    @property
    def passed(self):
        return all(abs(row["residual"]) <= 3.0 * row["residual_ci"] for row in self.rows)

    def max_sigma(self):
        return max(
            abs(row["residual"]) / max(row["residual_ci"], 1e-300) for row in self.rows
        )

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(row[c]) for c in self.COLUMNS) + "\n")

    def summary(self):
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"decomposition: {flag} over {len(self.rows)} r values "
            f"(max |residual|/ci = {self.max_sigma():.2f})"
        )


def decomposition_check(stats):
    """The work decomposition law as a falsifiable per-r test.

    lhs  E[W_r]
    rhs  (rho_r (E[(S_r)_e] - E[S_r] + E[A_e]) + rho_rcy E[(S_rcy)_e])
         / (1 - rho_r)  +  E_acc[W_r]  -  rho_r E_acc[A_res]

    The fixed term is evaluated analytically (the product
    rho_r E[(S_r)_e] equals lam E[S_r^2] / 2, which avoids the 0/0 at
    small r); recycling and Palm-type terms come from event records.
    """
    lam, m, m2, rho_r, ae = _model_quantities(stats)
    b = stats.batches
    durs = b["dur"]
    one_m = 1.0 - rho_r

    fixed = (lam * m2 / 2.0 + rho_r * (ae - m)) / one_m
    lhs_b = b["int_wr"] / durs[:, None]
    rcy_b = (b["rcy_q"] / durs[:, None] / 2.0) / one_m
    accw_b = ((b["int_wr"] - b["int_jw"]) / durs[:, None] + b["rcy_mw"] / durs[:, None]) / one_m
    ares_b = rho_r * (
        ((b["int_ares"][:, None] - b["int_jares"]) / durs[:, None]
         + b["rcy_ma"] / durs[:, None]) / one_m
    )
    resid_b = lhs_b - fixed[None, :] - rcy_b - accw_b + ares_b

    resid = resid_b.mean(axis=0)
    ci = np.atleast_1d(batch_ci(resid_b))
    rows = []
    for i, r in enumerate(stats.r_grid):
        rows.append({
            "r": float(r),
            "lhs": float(lhs_b[:, i].mean()),
            "rhs_fixed": float(fixed[i]),
            "rhs_rcy": float(rcy_b[:, i].mean()),
            "rhs_acc_w": float(accw_b[:, i].mean()),
            "rhs_acc_ares": float(ares_b[:, i].mean()),
            "residual": float(resid[i]),
            "residual_ci": float(ci[i]),
        })
    return DecompositionReport(rows)


def e_acc_constant_check(stats):
    """E_acc applied to the constant 1; should be 1 within CI at every r."""
    lam, m, m2, rho_r, _ = _model_quantities(stats)
    b = stats.batches
    durs = b["dur"]
    vals_b = (1.0 - b["int_jr"] / durs[:, None] + b["rcy_m"] / durs[:, None]) / (1.0 - rho_r)
    return vals_b.mean(axis=0), np.atleast_1d(batch_ci(vals_b))


class CostTerms:
    def __init__(self, m_res, m_rcy, m_idle, m_setup, cis, fixed_term, tail_flagged):
        self.m_res = m_res
        self.m_rcy = m_rcy
        self.m_idle = m_idle
        self.m_setup = m_setup
        self.cis = cis  # dict name -> ci
        self.fixed_term = fixed_term
        self.tail_flagged = tail_flagged

    def total(self):
        return self.m_res + self.m_rcy + self.m_idle + self.m_setup

    def to_csv(self, path):
        names = ("m_res", "m_rcy", "m_idle", "m_setup", "fixed_term")
        with open(path, "w") as fh:
            fh.write("term,value,ci\n")
            for n in names:
                fh.write(f"{n},{getattr(self, n)!r},{self.cis.get(n, 0.0)!r}\n")

    def summary(self):
        return (
            f"cost terms: res {self.m_res:+.4f} rcy {self.m_rcy:+.4f} "
            f"idle {self.m_idle:+.4f} setup {self.m_setup:+.4f} "
            f"fixed {self.fixed_term:+.4f}"
        )


def _quad_over_r(r, f):
    """Integral of f(r)/r^2 over (0, inf) given samples on the grid.

    Trapezoid on the grid; below the first point the integrand density is
    extrapolated flat, above the last point f is taken constant.
    """
    r = np.asarray(r, dtype=float)
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        dens = f / r**2
        core = np.trapezoid(dens, r)
        return core + dens[0] * r[0] + f[-1] / r[-1]
    dens = f / r[None, :] ** 2
    core = np.trapezoid(dens, r, axis=1)
    return core + dens[:, 0] * r[0] + f[:, -1] / r[-1]


def cost_terms(stats):
    """Residual-interarrival, recycling, idleness, and setup costs.

    Each is an r-integral of a per-r statistic against 1/(r^2 (1 - rho_r)),
    estimated per batch for the CI.  The ``fixed_term`` field carries the
    policy-invariant part of the decomposition integrated the same way, so
    that fixed_term + m_res + m_rcy + m_idle + m_setup reassembles E[N].
    """
    lam, m, m2, rho_r, ae = _model_quantities(stats)
    r = stats.r_grid
    if len(r) == 0:
        raise ValueError("cost terms need a simulation run with an r grid")
    b = stats.batches
    durs = b["dur"]
    one_m = 1.0 - rho_r

    # beyond the grid the integrands are constant once the fresh r-work
    # mean has saturated at the full mean size; flag grids that stop short
    rank_fn = stats.meta["rank_fn"]
    mean_s = stats.config.job_model.size_dist.mean()
    tail_flagged = m[-1] < (1.0 - 1e-3) * mean_s

    idle_b = (b["int_wr"] - b["int_jw"] - b["int_jsetupw"]) / durs[:, None] / one_m
    rcy_b = b["rcy_mw"] / durs[:, None] / one_m
    setup_b = b["int_jsetupw"] / durs[:, None] / one_m
    eacc_ares_b = (
        (b["int_ares"][:, None] - b["int_jares"]) / durs[:, None]
        + b["rcy_ma"] / durs[:, None]
    ) / one_m
    res_b = -rho_r * eacc_ares_b

    per_batch = {
        "m_res": _quad_over_r(r, res_b),
        "m_rcy": _quad_over_r(r, rcy_b),
        "m_idle": _quad_over_r(r, idle_b),
        "m_setup": _quad_over_r(r, setup_b),
    }
    cis = {name: float(batch_ci(vals)) for name, vals in per_batch.items()}
    vals = {name: float(v.mean()) for name, v in per_batch.items()}

    # policy-invariant part: dense analytic grid for the fresh-work piece,
    # the simulation grid for the recycling-excess piece
    r_top = max(rank_fn.rank_bounds()[1], r[-1])
    dense = np.geomspace(1e-3 * mean_s, r_top, 2048)
    md = np.array([rank_fn.initial_r_work_moments(rr)[0] for rr in dense])
    m2d = np.array([rank_fn.initial_r_work_moments(rr)[1] for rr in dense])
    rho_d = lam * md
    fixed_dense = (lam * m2d / 2.0 + rho_d * (ae - md)) / (1.0 - rho_d)
    fixed_int = float(_quad_over_r(dense, fixed_dense))
    rcyq_b = (b["rcy_q"] / durs[:, None] / 2.0) / one_m
    fixed_int += float(_quad_over_r(r, rcyq_b).mean())

    return CostTerms(
        vals["m_res"], vals["m_rcy"], vals["m_idle"], vals["m_setup"],
        cis, fixed_int, tail_flagged,
    )


def reconstruct_mean_n(stats):
    """Mean number-in-system reassembled from the decomposition integrals.

    Returns (direct estimate, reconstructed value, combined ci).
    """
    ct = cost_terms(stats)
    recon = ct.fixed_term + ct.total()
    ci = math.sqrt(sum(c**2 for c in ct.cis.values()))
    return stats.wine_time_avg, recon, ci + stats.wine_time_avg_ci


def srpt_closed_form_moments(size_dist, r, lam):
    """Known-size r-work moments: fresh mean, fresh excess load, recycled excess load.

    E[S_r] = E[S 1(S <= r)]
    rho_r E[(S_r)_e] = (lam / 2) E[S^2 1(S <= r)]
    rho_rcy E[(S_rcy)_e] = (lam / 2) r^2 P{S > r}
    """
    e_sr = size_dist.trunc_mean(r)
    fresh_excess_load = 0.5 * lam * size_dist.trunc_m2(r)
    recycled_excess_load = 0.5 * lam * r * r * float(size_dist.tail(r))
    return {
        "e_sr": e_sr,
        "rho_r": lam * e_sr,
        "fresh_excess_load": fresh_excess_load,
        "recycled_excess_load": recycled_excess_load,
    }


def srpt_moment_check(stats):
    """Simulated per-r loads against the known-size closed forms.

    Returns rows of (r, rho_r sim, rho_r exact, rho_r ci,
    recycled excess sim, exact, ci); used with Gittins under known sizes.
    """
    cf = stats.config
    if cf.job_model.kind != "known":
        raise ValueError("closed-form r-work moments apply to the known-size model")
    lam = cf.lam
    b = stats.batches
    durs = b["dur"]
    rows = []
    rho_b = b["arr_m"] / durs[:, None]
    rexc_b = b["rcy_q"] / durs[:, None] / 2.0
    rho_ci = np.atleast_1d(batch_ci(rho_b))
    rexc_ci = np.atleast_1d(batch_ci(rexc_b))
    for i, r in enumerate(stats.r_grid):
        cf_vals = srpt_closed_form_moments(cf.job_model.size_dist, float(r), lam)
        rows.append({
            "r": float(r),
            "rho_r_sim": float(rho_b[:, i].mean()),
            "rho_r_exact": cf_vals["rho_r"],
            "rho_r_ci": float(rho_ci[i]),
            "rcy_excess_sim": float(rexc_b[:, i].mean()),
            "rcy_excess_exact": cf_vals["recycled_excess_load"],
            "rcy_excess_ci": float(rexc_ci[i]),
        })
    return rows

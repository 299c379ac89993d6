"""Event-driven simulation of the G/G/k queue with server setup times.

Conventions:

* k servers, each of speed 1/k, so a job of size S occupies a server for
  wall time kS and the total service capacity is 1.
* Setup work U likewise takes wall time kU.  A server is idle, setting up,
  or busy; transitions follow the non-idling rules: setting-up -> busy on
  setup completion, busy -> idle when there are fewer jobs than busy
  servers, idle -> setting-up when jobs outnumber busy-or-setting servers.
  Setups are never canceled.
* Policies are preempt-resume.  The scheduler sees job states (remaining
  work under known sizes, attained service under unknown sizes), never the
  pre-sampled hidden size.

Besides time averages of N and total work, the simulator tracks, for each
rank value r in ``r_grid``, the conditional-expected r-work of the system
and the event records needed by the work decomposition identity: rank
crossings of served jobs (recyclings), their conditional r-work moments,
and the products of r-work with server-state indicators and with the
residual interarrival time.
"""

from __future__ import annotations

import heapq
import math
from bisect import bisect_right

import numpy as np

from .jobs import KNOWN, UNKNOWN, build_rank_table

IDLE, SETUP, BUSY = 0, 1, 2
_MODE_CHARS = {IDLE: "i", SETUP: "s", BUSY: "b"}

# event kinds; the order value fixes processing at simultaneous epochs:
# departures, then arrivals, then setup completions, then rank crossings
EV_BATCH = (-2, "batch")
EV_INSPECT = (-1, "inspect")
EV_DEPART = (0, "depart")
EV_ARRIVE = (1, "arrive")
EV_SETUP = (2, "setup_done")
EV_CROSS = (3, "cross")
EV_END = (9, "end")

POLICIES = ("gittins", "fcfs", "lcfs-pr", "random")


class NonConvergence(Exception):
    """Work process shows sustained growth; the run is not usable."""


class SimConfig:
    def __init__(
        self,
        k,
        arrival,
        job_model,
        setup=None,
        policy="gittins",
        horizon=100_000.0,
        warmup_fraction=0.2,
        seed=0,
        r_grid=(),
        batch_count=32,
        n_inspect=4000,
        rank_grid_size=4096,
        trace_path=None,
        label="",
    ):
        from .dists import Deterministic

        self.k = int(k)
        self.arrival = arrival
        self.job_model = job_model
        self.setup = setup if setup is not None else Deterministic(0.0)
        self.policy = policy
        self.horizon = float(horizon)
        self.warmup_fraction = float(warmup_fraction)
        self.seed = int(seed)
        self.r_grid = tuple(float(r) for r in r_grid)
        self.batch_count = int(batch_count)
        self.n_inspect = int(n_inspect)
        self.rank_grid_size = int(rank_grid_size)
        self.trace_path = trace_path
        self.label = label
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.batch_count < 20:
            raise ValueError("batch_count must be >= 20 for batch-means CIs")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.rho >= 1.0:
            raise ValueError(f"unstable configuration: rho = {self.rho:.4f} >= 1")
        if list(self.r_grid) != sorted(set(self.r_grid)) or any(
            r <= 0.0 for r in self.r_grid
        ):
            raise ValueError("r_grid must be strictly increasing and positive")
        # interarrival conditional residual must be uniformly bounded
        self.arrival.residual_bounds()

    @property
    def lam(self):
        return 1.0 / self.arrival.mean()

    @property
    def rho(self):
        return self.lam * self.job_model.size_dist.mean()

    def describe(self):
        return {
            "k": self.k,
            "arrival": self.arrival.params(),
            "size": self.job_model.size_dist.params(),
            "job_model": self.job_model.kind,
            "setup": self.setup.params(),
            "policy": self.policy,
            "horizon": self.horizon,
            "warmup_fraction": self.warmup_fraction,
            "seed": self.seed,
            "r_grid": list(self.r_grid),
            "batch_count": self.batch_count,
        }


class _Job:
    __slots__ = ("jid", "arrival", "size", "age", "prio", "waiting", "wseq", "rel")

    def __init__(self, jid, arrival, size, prio):
        self.jid = jid
        self.arrival = arrival
        self.size = size
        self.age = 0.0
        self.prio = prio
        self.waiting = True
        self.wseq = 0
        self.rel = None  # per-r relevance bools while in service


class ServerFarm:
    """Server modes plus the one-at-a-time setup transition rules."""

    def __init__(self, k):
        self.k = k
        self.modes = [IDLE] * k
        self.jobs = [None] * k
        self.setup_started = [0.0] * k
        self.tokens = [0] * k

    @property
    def n_busy(self):
        return sum(1 for m in self.modes if m == BUSY)

    @property
    def n_setup(self):
        return sum(1 for m in self.modes if m == SETUP)

    def step_transitions(self, n_jobs, t, draw_setup, on_setup_scheduled=None):
        """Apply the busy->idle and idle->setting-up rules until stable.

        ``draw_setup`` samples one setup work amount; a zero draw makes the
        server busy immediately.  Setting-up -> busy happens on setup
        completion events, not here.
        """
        while True:
            n_busy = self.n_busy
            if n_jobs < n_busy:
                for si in range(self.k):
                    if self.modes[si] == BUSY and self.jobs[si] is None:
                        self.modes[si] = IDLE
                        self.tokens[si] += 1
                        break
                else:
                    raise AssertionError("busy->idle rule fired with no free server")
                continue
            if n_busy + self.n_setup < n_jobs:
                idle = [si for si in range(self.k) if self.modes[si] == IDLE]
                if idle:
                    si = idle[0]
                    u = draw_setup()
                    if u <= 0.0:
                        self.modes[si] = BUSY
                    else:
                        self.modes[si] = SETUP
                        self.setup_started[si] = t
                        self.tokens[si] += 1
                        if on_setup_scheduled is not None:
                            on_setup_scheduled(si, u, t)
                    continue
            break


def step_setup_transitions(farm, n_jobs, t=0.0, draw_setup=lambda: 0.0, on_setup_scheduled=None):
    farm.step_transitions(n_jobs, t, draw_setup, on_setup_scheduled)
    return farm


def select_service(policy, candidates, n_slots):
    """The jobs a policy serves given candidate (key, jid) pairs and slots.

    Pure helper mirroring the engine's assignment rule: the ``n_slots``
    least keys win, ties broken by the key tuples themselves (which embed
    arrival time and job id).
    """
    ranked = sorted(candidates)
    return [jid for _, jid in ranked[:n_slots]]


class _RTables:
    """Per-r lookup tables used by the statistics bookkeeping."""

    def __init__(self, model, rank_fn, r_grid):
        self.known = model.kind == KNOWN
        self.r = np.asarray(r_grid, dtype=float)
        self.R = len(self.r)
        self.rank_fn = rank_fn
        if self.R == 0:
            return
        # fresh-arrival moments per r (analytic)
        self.fresh_m = np.array([rank_fn.initial_r_work_moments(r)[0] for r in self.r])
        self.fresh_m2 = np.array([rank_fn.initial_r_work_moments(r)[1] for r in self.r])
        if self.known:
            return

        d = model.size_dist
        ages, ranks = rank_fn.table()
        cross = [rank_fn.crossings_for(r) for r in self.r]
        self.cross_ages_per_r = [np.array([c[0] for c in cl]) for cl in cross]
        self.starts_rel = np.array([ranks[0] < r for r in self.r])

        # merged crossing stream sorted by age
        merged = []
        for ri, cl in enumerate(cross):
            for age, dirn, m_after, q_after in cl:
                merged.append((age, ri, dirn, m_after, q_after))
        merged.sort()
        self.cx_age = np.array([m[0] for m in merged])
        self.cx_ri = np.array([m[1] for m in merged], dtype=int)
        self.cx_dir = np.array([m[2] for m in merged], dtype=int)
        self.cx_m = np.array([m[3] for m in merged])
        self.cx_q = np.array([m[4] for m in merged])

        # common knot grid: rank ages plus crossing ages with left twins
        knots = set(ages.tolist())
        for age in self.cx_age:
            knots.add(age * (1.0 - 1e-12))
            knots.add(float(age))
        self.K = np.array(sorted(knots))
        nk = len(self.K)
        tails = np.asarray(d.tail(self.K), dtype=float)
        itts = np.array([d.tail_integral(a) for a in self.K])

        # m_r at each knot (value just right of the knot), per r
        self.mg = np.zeros((self.R, nk))
        for ri in range(self.R):
            ca = self.cross_ages_per_r[ri]
            parity = np.searchsorted(ca, self.K, side="right")
            rel = self.starts_rel[ri] ^ (parity % 2 == 1)
            if not rel.any():
                continue
            # expected service to the next up-crossing (or to completion)
            ups = ca[::2] if self.starts_rel[ri] else ca[1::2]
            if len(ups):
                dn_idx = np.searchsorted(ups, self.K, side="right")
                y_up = np.where(dn_idx < len(ups), ups[np.minimum(dn_idx, len(ups) - 1)], np.inf)
            else:
                y_up = np.full(nk, np.inf)
            itt_up = np.where(
                np.isinf(y_up), 0.0,
                np.interp(np.minimum(y_up, self.K[-1]), self.K, itts),
            )
            safe_t = np.where(tails > 0.0, tails, 1.0)
            vals = (itts - itt_up) / safe_t
            self.mg[ri] = np.where(rel & (tails > 0.0), np.maximum(vals, 0.0), 0.0)

        widths = np.diff(self.K)
        seg_area = 0.5 * (self.mg[:, :-1] + self.mg[:, 1:]) * widths
        self.Mg = np.concatenate(
            [np.zeros((self.R, 1)), np.cumsum(seg_area, axis=1)], axis=1
        )
        self._K_list = self.K.tolist()
        self._mg_rows = self.mg.tolist()
        self._Mg_rows = self.Mg.tolist()
        self._cross_lists = [c.tolist() for c in self.cross_ages_per_r]

        # wine integral tabulated on a coarse strided knot set
        stride = max(1, nk // 512)
        widx = sorted(set(range(0, nk, stride)) | {nk - 1}
                      | set(int(i) for i in np.searchsorted(self.K, self.cx_age)))
        widx = [i for i in widx if i < nk]
        self.wine_x = self.K[widx]
        self.wine_y = np.array([rank_fn.single_job_wine(float(x)) for x in self.wine_x])
        wdiff = np.diff(self.wine_x)
        warea = 0.5 * (self.wine_y[:-1] + self.wine_y[1:]) * wdiff
        self.wine_M = np.concatenate([[0.0], np.cumsum(warea)])
        self._wx = self.wine_x.tolist()
        self._wy = self.wine_y.tolist()
        self._wM = self.wine_M.tolist()

    # ---- known-size closed forms take the remaining work as coordinate ----

    def mvec(self, c):
        if self.known:
            return np.where(c < self.r, c, 0.0)
        i = self._seg(c)
        th = self._theta(c, i)
        return self.mg[:, i] + th * (self.mg[:, i + 1] - self.mg[:, i])

    def Mvec(self, c):
        if self.known:
            m = np.minimum(c, self.r)
            return 0.5 * m * m
        i = self._seg(c)
        x0 = self.K[i]
        th = self._theta(c, i)
        m_here = self.mg[:, i] + th * (self.mg[:, i + 1] - self.mg[:, i])
        return self.Mg[:, i] + 0.5 * (self.mg[:, i] + m_here) * (c - x0)

    def m_scalar(self, ri, c):
        if self.known:
            return c if c < self.r[ri] else 0.0
        i = self._seg(c)
        row = self._mg_rows[ri]
        th = self._theta(c, i)
        return row[i] + th * (row[i + 1] - row[i])

    def M_scalar(self, ri, c):
        if self.known:
            m = min(c, self.r[ri])
            return 0.5 * m * m
        i = self._seg(c)
        x0 = self._K_list[i]
        row = self._mg_rows[ri]
        th = self._theta(c, i)
        m_here = row[i] + th * (row[i + 1] - row[i])
        return self._Mg_rows[ri][i] + 0.5 * (row[i] + m_here) * (c - x0)

    def rel_vec(self, c):
        if self.known:
            return c < self.r
        out = np.empty(self.R, dtype=bool)
        for ri in range(self.R):
            par = bisect_right(self._cross_lists[ri], c)
            out[ri] = bool(self.starts_rel[ri]) ^ (par % 2 == 1)
        return out

    def _wseg(self, x):
        wx = self._wx
        if x <= wx[0]:
            return 0
        if x >= wx[-1]:
            return len(wx) - 2
        return bisect_right(wx, x) - 1

    def wine1(self, c):
        if self.known:
            return 1.0
        wx = self._wx
        x = min(max(c, wx[0]), wx[-1])
        i = self._wseg(x)
        w = wx[i + 1] - wx[i]
        th = (x - wx[i]) / w if w > 0.0 else 0.0
        wy = self._wy
        return wy[i] + th * (wy[i + 1] - wy[i])

    def Mwine(self, c):
        if self.known:
            return c
        wx = self._wx
        x = min(max(c, wx[0]), wx[-1])
        i = self._wseg(x)
        x0 = wx[i]
        wy = self._wy
        y0, y1 = wy[i], wy[i + 1]
        th = (x - x0) / (wx[i + 1] - x0) if wx[i + 1] > x0 else 0.0
        y_here = y0 + th * (y1 - y0)
        return self._wM[i] + 0.5 * (y0 + y_here) * (x - x0) + max(c - wx[-1], 0.0)

    def _seg(self, c):
        ks = self._K_list
        if c <= ks[0]:
            return 0
        if c >= ks[-1]:
            return len(ks) - 2
        return bisect_right(ks, c) - 1

    def _theta(self, c, i):
        ks = self._K_list
        w = ks[i + 1] - ks[i]
        if w <= 0.0:
            return 0.0
        th = (c - ks[i]) / w
        return 0.0 if th < 0.0 else (1.0 if th > 1.0 else th)


class _Acc:
    """Accumulators for one batch."""

    SCALARS = (
        "dur", "int_n", "int_w", "int_jsetup", "int_ares", "int_setup_age",
        "int_nset", "int_wine", "n_arrivals", "n_completions",
    )
    VECTORS = (
        "int_wr", "int_jw", "int_jsetupw", "int_jr", "int_jares", "arr_m",
        "rcy_n", "rcy_m", "rcy_q", "rcy_mw", "rcy_ma",
    )

    def __init__(self, R):
        for name in self.SCALARS:
            setattr(self, name, 0.0)
        for name in self.VECTORS:
            setattr(self, name, np.zeros(R))

    def snapshot(self):
        out = {name: getattr(self, name) for name in self.SCALARS}
        out.update({name: getattr(self, name).copy() for name in self.VECTORS})
        return out


class SimStats:
    """Time-averaged and event-averaged statistics with batch-means CIs."""

    def __init__(self, config, r_grid, batches, snapshots, setup_samples, meta):
        self.config = config
        self.r_grid = np.asarray(r_grid, dtype=float)
        self.batches = batches  # dict name -> array (B,) or (B, R)
        self.snapshots = snapshots  # (n, 2): N and wine sum at epochs
        self.setup_samples = setup_samples  # (m, 2): setup wall age, N
        self.meta = meta
        self._finalize()

    def _finalize(self):
        b = self.batches
        self.total_time = float(b["dur"].sum())
        T = self.total_time
        self.arrivals = int(b["n_arrivals"].sum())
        self.completions = int(b["n_completions"].sum())
        self.lambda_hat = self.arrivals / T
        self.mean_n, self.mean_n_ci = self._ratio_ci("int_n")
        self.mean_w, self.mean_w_ci = self._ratio_ci("int_w")
        self.mean_j_setup, self.mean_j_setup_ci = self._ratio_ci("int_jsetup")
        self.mean_ares, self.mean_ares_ci = self._ratio_ci("int_ares")
        self.wine_time_avg, self.wine_time_avg_ci = self._ratio_ci("int_wine")
        self.mean_w_r, self.mean_w_r_ci = self._ratio_ci("int_wr")
        self.mean_j_r, self.mean_j_r_ci = self._ratio_ci("int_jr")
        self.idle_wr = (b["int_wr"] - b["int_jw"] - b["int_jsetupw"]).sum(0) / T
        self.setup_wr = b["int_jsetupw"].sum(0) / T
        self.nonrel_wr = (b["int_wr"] - b["int_jw"]).sum(0) / T
        self.nonrel_ares = (b["int_ares"][:, None] - b["int_jares"]).sum(0) / T
        self.rho_r_emp = b["arr_m"].sum(0) / T
        self.lambda_rcy = b["rcy_n"].sum(0) / T
        self.rho_rcy = b["rcy_m"].sum(0) / T
        self.rcy_sq_rate = b["rcy_q"].sum(0) / T
        self.palm_rcy_swr = b["rcy_mw"].sum(0) / T
        self.palm_rcy_sares = b["rcy_ma"].sum(0) / T
        nset_t = b["int_nset"].sum()
        self.setup_age_time_avg = (
            b["int_setup_age"].sum() / nset_t if nset_t > 0 else math.nan
        )

    def _ratio_ci(self, name):
        vals = self.batches[name]
        durs = self.batches["dur"]
        if vals.ndim == 1:
            per = vals / durs
            return float(vals.sum() / durs.sum()), float(batch_ci(per))
        per = vals / durs[:, None]
        return vals.sum(0) / durs.sum(), batch_ci(per)

    def batch_values(self, name):
        """Per-batch time-normalized values of a raw accumulator."""
        vals = self.batches[name]
        durs = self.batches["dur"]
        return vals / (durs if vals.ndim == 1 else durs[:, None])


def batch_ci(per_batch, level=0.975):
    """Batch-means confidence half-width (t-based)."""
    from scipy.stats import t as tdist

    per_batch = np.asarray(per_batch, dtype=float)
    B = per_batch.shape[0]
    if B < 2:
        return np.full(per_batch.shape[1:], math.inf) if per_batch.ndim > 1 else math.inf
    sd = per_batch.std(axis=0, ddof=1)
    return float(tdist.ppf(level, B - 1)) * sd / math.sqrt(B)


_RTABLE_CACHE = {}


def _rtables_for(model, rank_fn, r_grid, grid_size):
    import json

    key = (json.dumps(model.size_dist.params(), sort_keys=True),
           model.kind, tuple(r_grid), grid_size)
    hit = _RTABLE_CACHE.get(key)
    if hit is None:
        hit = _RTABLE_CACHE[key] = _RTables(model, rank_fn, r_grid)
    return hit


class _Engine:
    def __init__(self, config):
        self.cf = config
        self.k = config.k
        self.model = config.job_model
        self.rank_fn = build_rank_table(self.model, config.rank_grid_size)
        self.tables = _rtables_for(
            self.model, self.rank_fn, config.r_grid, config.rank_grid_size
        )
        ss = np.random.SeedSequence(entropy=config.seed)
        arr_ss, size_ss, setup_ss, pol_ss = ss.spawn(4)
        self.arr_rng = np.random.Generator(np.random.PCG64(arr_ss))
        self.size_rng = np.random.Generator(np.random.PCG64(size_ss))
        self.setup_rng = np.random.Generator(np.random.PCG64(setup_ss))
        self.pol_rng = np.random.Generator(np.random.PCG64(pol_ss))

        self.preemptive = config.policy in ("gittins", "lcfs-pr")
        self.dynamic_rank = config.policy == "gittins" and self.model.kind == UNKNOWN

        if self.model.kind == UNKNOWN:
            top = self.rank_fn.ages[-1]
            self._age_cap = float(top)
        else:
            self._age_cap = math.inf

    # ---- policy keys ------------------------------------------------------

    def _key(self, job):
        pol = self.cf.policy
        if pol == "gittins":
            return (self._rank_of(job), job.arrival, job.jid)
        if pol == "fcfs":
            return (job.arrival, 0.0, job.jid)
        if pol == "lcfs-pr":
            return (-job.arrival, 0.0, -job.jid)
        return (job.prio, 0.0, job.jid)

    def _rank_of(self, job):
        if self.model.kind == KNOWN:
            return job.size - job.age
        return self.rank_fn.rank(min(job.age, self._age_cap), clamp=True)

    def _coord(self, job):
        # bookkeeping coordinate: remaining work (known) or age (unknown)
        if self.model.kind == KNOWN:
            return job.size - job.age
        return job.age

    # ---- main loop --------------------------------------------------------

    def run(self):
        cf = self.cf
        k = self.k
        R = self.tables.R
        tab = self.tables
        trace = open(cf.trace_path, "w") if cf.trace_path else None
        if trace:
            trace.write("time,event,n,w," + ",".join(f"s{i}" for i in range(k)) + "\n")

        heap = []
        seq = 0

        def push(t, ev, a=0, b=0):
            nonlocal seq
            heapq.heappush(heap, (t, ev[0], seq, ev[1], a, b))
            seq += 1

        farm = ServerFarm(k)
        jobs = {}
        waiting = []  # heap of (key, wseq, jid)
        self._preempt_target = [None] * k

        t_warm = cf.warmup_fraction * cf.horizon
        B = cf.batch_count
        if t_warm > 0.0:
            push(t_warm, EV_BATCH, 1)
        for i in range(1, B):
            push(t_warm + (i / B) * (cf.horizon - t_warm), EV_BATCH, 0)
        insp_step = (cf.horizon - t_warm) / max(cf.n_inspect, 1)
        for i in range(cf.n_inspect):
            push(t_warm + (i + 0.5) * insp_step, EV_INSPECT)
        push(cf.horizon, EV_END)

        next_arr = cf.arrival.sample(self.arr_rng)
        push(next_arr, EV_ARRIVE)

        acc = _Acc(R)
        batches = []
        snapshots = []
        setup_samples = []
        collecting = cf.warmup_fraction == 0.0

        now = 0.0
        N = 0
        W = 0.0
        Q = np.zeros(R)
        Qwine = 0.0
        relcnt = np.zeros(R)
        jid_counter = 0
        r_arr = tab.r if R else None

        # -------- helpers bound to local state --------------------------

        def abs_diff(v0, v1, known):
            return v0 - v1 if known else v1 - v0

        def serving_pairs():
            return [
                (si, farm.jobs[si])
                for si in range(k)
                if farm.modes[si] == BUSY and farm.jobs[si] is not None
            ]

        def integrate(t1):
            nonlocal now, W, Qwine
            dt = t1 - now
            if dt < 0:
                raise AssertionError(f"time went backwards: {now} -> {t1}")
            pairs = serving_pairs()
            nserv = len(pairs)
            nset = farm.n_setup
            if dt == 0.0:
                return
            rec = collecting
            if rec:
                acc.dur += dt
                acc.int_n += N * dt
                acc.int_w += W * dt - 0.5 * nserv / k * dt * dt
                acc.int_jsetup += (nset / k) * dt
                acc.int_nset += nset * dt
                ares0 = next_arr - now
                i_ares = ares0 * dt - 0.5 * dt * dt
                acc.int_ares += i_ares
                for si in range(k):
                    if farm.modes[si] == SETUP:
                        acc.int_setup_age += (now - farm.setup_started[si]) * dt + 0.5 * dt * dt

            if R:
                iw = Q * dt
                if pairs:
                    for si, job in pairs:
                        c0 = self._coord(job)
                        c1 = c0 - dt / k if tab.known else c0 + dt / k
                        iw = iw + k * abs_diff(tab.Mvec(c0), tab.Mvec(c1), tab.known)
                if rec:
                    acc.int_wr += iw
                    acc.int_jw += (relcnt / k) * iw
                    acc.int_jsetupw += (nset / k) * iw
                    acc.int_jr += (relcnt / k) * dt
                    acc.int_jares += (relcnt / k) * i_ares

                # rank crossings of served jobs within the interval
                for si, job in pairs:
                    c0 = self._coord(job)
                    if tab.known:
                        rem0 = c0
                        rem1 = c0 - dt / k
                        lo = int(np.searchsorted(r_arr, rem1, side="right"))
                        hi = int(np.searchsorted(r_arr, rem0, side="left"))
                        events = [
                            (now + k * (rem0 - r_arr[ri]), ri, 1,
                             float(r_arr[ri]), float(r_arr[ri]) ** 2)
                            for ri in range(lo, hi)
                        ]
                    else:
                        a0, a1 = c0, c0 + dt / k
                        lo = int(np.searchsorted(tab.cx_age, a0, side="right"))
                        hi = int(np.searchsorted(tab.cx_age, a1, side="right"))
                        events = [
                            (now + k * (tab.cx_age[i] - a0), int(tab.cx_ri[i]),
                             int(tab.cx_dir[i]), float(tab.cx_m[i]), float(tab.cx_q[i]))
                            for i in range(lo, hi)
                        ]
                    for s_c, ri, dirn, m_c, q_c in sorted(events):
                        s_c = min(max(s_c, now), t1)
                        if rec:
                            rest = t1 - s_c
                            tail_w = Q[ri] * rest
                            for sj, other in pairs:
                                co = self._coord(other)
                                if tab.known:
                                    ce = co - dt / k
                                    cm = co - (s_c - now) / k
                                    tail_w += k * (tab.M_scalar(ri, cm) - tab.M_scalar(ri, ce))
                                else:
                                    ce = co + dt / k
                                    cm = co + (s_c - now) / k
                                    tail_w += k * (tab.M_scalar(ri, ce) - tab.M_scalar(ri, cm))
                            delta = dirn / k
                            acc.int_jw[ri] += delta * tail_w
                            acc.int_jr[ri] += delta * rest
                            acc.int_jares[ri] += delta * ((next_arr - s_c) * rest - 0.5 * rest * rest)
                            if dirn > 0:
                                w_before = Q[ri]
                                for sj, other in pairs:
                                    if other is job:
                                        continue
                                    co = self._coord(other)
                                    if tab.known:
                                        cm = co - (s_c - now) / k
                                    else:
                                        cm = co + (s_c - now) / k
                                    w_before += tab.m_scalar(ri, cm)
                                acc.rcy_n[ri] += 1.0
                                acc.rcy_m[ri] += m_c
                                acc.rcy_q[ri] += q_c
                                acc.rcy_mw[ri] += m_c * w_before
                                acc.rcy_ma[ri] += m_c * (next_arr - s_c)
                        relcnt[ri] += dirn
                        job.rel[ri] = dirn > 0

                if rec:
                    acc.int_wine += Qwine * dt
                    for si, job in pairs:
                        c0 = self._coord(job)
                        if tab.known:
                            acc.int_wine += dt  # wine integral of a job is exactly 1
                        else:
                            acc.int_wine += k * (tab.Mwine(c0 + dt / k) - tab.Mwine(c0))
            elif rec:
                # no r grid: wine sum still equals N for known sizes
                if tab.known:
                    acc.int_wine += N * dt

            # advance job ages and total work
            for si, job in pairs:
                job.age += dt / k
            W -= nserv * dt / k
            if W < 0.0:
                if W < -1e-6 * (N + 1.0):
                    raise AssertionError(f"negative work {W} at t={t1}")
                W = 0.0
            now = t1

        # waiting-queue helpers ------------------------------------------

        wseq_counter = 0

        def enqueue(job):
            nonlocal wseq_counter, Qwine, Q
            wseq_counter += 1
            job.waiting = True
            job.wseq = wseq_counter
            heapq.heappush(waiting, (self._key(job), wseq_counter, job.jid))
            if R:
                Q = Q + tab.mvec(self._coord(job))
                Qwine += tab.wine1(self._coord(job))
            elif self.model.kind == KNOWN:
                Qwine += 1.0

        def peek_waiting():
            while waiting:
                key, ws, jid = waiting[0]
                job = jobs.get(jid)
                if job is not None and job.waiting and job.wseq == ws:
                    return key, job
                heapq.heappop(waiting)
            return None, None

        def pop_waiting():
            key, job = peek_waiting()
            heapq.heappop(waiting)
            return job

        def dequeue_stats(job):
            nonlocal Q, Qwine
            job.waiting = False
            if R:
                Q = Q - tab.mvec(self._coord(job))
                Qwine -= tab.wine1(self._coord(job))
            elif self.model.kind == KNOWN:
                Qwine -= 1.0

        def start_service(si, job):
            nonlocal relcnt
            farm.jobs[si] = job
            if R:
                job.rel = tab.rel_vec(self._coord(job))
                relcnt = relcnt + job.rel
            schedule_server(si)

        def stop_service(si, requeue):
            nonlocal relcnt
            job = farm.jobs[si]
            farm.jobs[si] = None
            farm.tokens[si] += 1
            self._preempt_target[si] = None
            if R and job.rel is not None:
                relcnt = relcnt - job.rel
                job.rel = None
            if requeue:
                enqueue(job)
            return job

        def schedule_server(si):
            job = farm.jobs[si]
            farm.tokens[si] += 1
            tok = farm.tokens[si]
            push(now + k * (job.size - job.age), EV_DEPART, si, tok)
            self._preempt_target[si] = None
            if self.dynamic_rank:
                refresh_preempt(si)

        def refresh_preempt(si):
            job = farm.jobs[si]
            if job is None:
                return
            key, wjob = peek_waiting()
            if key is None:
                self._preempt_target[si] = None
                return
            if self._preempt_target[si] == key:
                return
            self._preempt_target[si] = key
            rank_w = key[0]
            strict = (job.arrival, job.jid) < (key[1], key[2])
            age = min(job.age, self._age_cap)
            cross = self.rank_fn.next_age_at_or_above(age, rank_w, strict=strict)
            if math.isinf(cross) or cross >= job.size:
                return
            farm.tokens[si] += 1
            tok = farm.tokens[si]
            push(now + k * max(cross - job.age, 0.0), EV_CROSS, si, tok)
            # the token bump invalidated the pending departure; reschedule it
            push(now + k * (job.size - job.age), EV_DEPART, si, tok)

        def reassign():
            busy_free = [
                si for si in range(k) if farm.modes[si] == BUSY and farm.jobs[si] is None
            ]
            while True:
                key, job = peek_waiting()
                if job is None:
                    break
                if busy_free:
                    pop_waiting()
                    dequeue_stats(job)
                    start_service(busy_free.pop(), job)
                    continue
                if not self.preemptive:
                    break
                worst_si, worst_key = None, None
                for si in range(k):
                    if farm.modes[si] == BUSY and farm.jobs[si] is not None:
                        kk = self._key(farm.jobs[si])
                        if worst_key is None or kk > worst_key:
                            worst_si, worst_key = si, kk
                if worst_key is None or key >= worst_key:
                    break
                stop_service(worst_si, requeue=True)
                busy_free.append(worst_si)
            if self.dynamic_rank:
                for si in range(k):
                    if farm.modes[si] == BUSY and farm.jobs[si] is not None:
                        refresh_preempt(si)

        def draw_setup():
            return cf.setup.sample(self.setup_rng)

        def on_setup_scheduled(si, u, t):
            push(t + k * u, EV_SETUP, si, farm.tokens[si])

        def transitions():
            farm.step_transitions(N, now, draw_setup, on_setup_scheduled)

        def close_batch():
            batches.append(acc.snapshot())
            fresh = _Acc(R)
            for name in _Acc.SCALARS:
                setattr(acc, name, getattr(fresh, name))
            for name in _Acc.VECTORS:
                setattr(acc, name, getattr(fresh, name))
            # refresh running sums to kill float drift
            refresh_sums()

        def refresh_sums():
            nonlocal Q, Qwine, W
            if R:
                Qn = np.zeros(R)
                for job in jobs.values():
                    if job.waiting:
                        Qn += tab.mvec(self._coord(job))
                Q = Qn
                Qwine = sum(tab.wine1(self._coord(j)) for j in jobs.values() if j.waiting)
            elif self.model.kind == KNOWN:
                Qwine = float(sum(1 for j in jobs.values() if j.waiting))
            else:
                Qwine = 0.0
            W = sum(j.size - j.age for j in jobs.values())

        # -------- event loop ---------------------------------------------

        while heap:
            t, order, _, kind, a, b = heapq.heappop(heap)
            if kind in ("depart", "setup_done", "cross") and farm.tokens[a] != b:
                continue
            integrate(min(t, cf.horizon))

            if kind == "end":
                close_batch()
                break

            if kind == "arrive":
                jid_counter += 1
                size = self.model.size_dist.sample(self.size_rng)
                prio = self.pol_rng.random() if cf.policy == "random" else 0.0
                job = _Job(jid_counter, t, size, prio)
                jobs[job.jid] = job
                N += 1
                W += size
                if collecting:
                    acc.n_arrivals += 1
                    if R:
                        acc.arr_m += tab.mvec(self._coord(job))
                enqueue(job)
                next_arr = t + cf.arrival.sample(self.arr_rng)
                push(next_arr, EV_ARRIVE)
                transitions()
                reassign()

            elif kind == "depart":
                si = a
                job = stop_service(si, requeue=False)
                job.age = job.size
                del jobs[job.jid]
                N -= 1
                if collecting:
                    acc.n_completions += 1
                transitions()
                reassign()

            elif kind == "setup_done":
                si = a
                farm.modes[si] = BUSY
                farm.tokens[si] += 1
                transitions()
                reassign()

            elif kind == "cross":
                # served job's rank reached the best waiting key
                reassign()

            elif kind == "inspect":
                if collecting:
                    wine_sum = 0.0
                    for job in jobs.values():
                        c = self._coord(job)
                        if self.model.kind == KNOWN:
                            wine_sum += self.rank_fn.single_job_wine(c)
                        elif R:
                            wine_sum += tab.wine1(c)
                    snapshots.append((N, wine_sum))
                    for si in range(k):
                        if farm.modes[si] == SETUP:
                            setup_samples.append((now - farm.setup_started[si], N))

            elif kind == "batch":
                if a == 1:
                    collecting = True
                    refresh_sums()
                else:
                    close_batch()

            if trace:
                modes = ",".join(_MODE_CHARS[farm.modes[i]] for i in range(k))
                trace.write(f"{now!r},{kind},{N},{W!r},{modes}\n")

        if trace:
            trace.close()

        batch_arrays = {
            name: np.array([snap[name] for snap in batches])
            for name in (*_Acc.SCALARS, *_Acc.VECTORS)
        }
        stats = SimStats(
            self.cf,
            self.tables.r if R else np.zeros(0),
            batch_arrays,
            np.array(snapshots) if snapshots else np.zeros((0, 2)),
            np.array(setup_samples) if setup_samples else np.zeros((0, 2)),
            meta={"fresh_m": self.tables.fresh_m if R else None,
                  "fresh_m2": self.tables.fresh_m2 if R else None,
                  "rank_fn": self.rank_fn},
        )
        check_convergence(stats)
        return stats


def check_convergence(stats):
    """Flag sustained growth of the work process over the run."""
    w = stats.batch_values("int_w")
    B = len(w)
    q = max(B // 4, 1)
    q2, q3, q4 = w[q:2 * q], w[2 * q:3 * q], w[3 * q:]
    m2, m3, m4 = q2.mean(), q3.mean(), q4.mean()
    if q > 1:
        se = math.sqrt(q2.var(ddof=1) / q + q4.var(ddof=1) / q)
    else:
        se = 0.0
    if m4 > m3 > m2 and m4 > 2.0 * m2 + 1e-9 and (m4 - m2) > 4.0 * se:
        raise NonConvergence(
            f"work process grows across the run: quarter means "
            f"{m2:.4g}, {m3:.4g}, {m4:.4g}"
        )


def run(config):
    """Simulate one replication and return its statistics."""
    return _Engine(config).run()

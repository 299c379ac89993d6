"""Job state models, rank functions, and per-state r-work quantities.

Two job models are supported:

* known sizes: a job's state is its remaining work, which decreases during
  service; the rank of state x is x itself (serve least remaining work).
* unknown sizes: a job's state is its attained service; the rank of state x
  is the best achievable service-per-completion ratio

      rank(x) = inf_{y > x} E[min{S, y} - x | S > x] / P{S <= y | S > x},

  tabulated on an age grid because the infimum rarely has a closed form.

The remaining r-work of a state x, E[S_r(x)], is the expected service until
the job finishes or reaches rank at least r.  Its integral against 1/r^2
over all r equals 1 for every state, which is the single-job form of the
number-work identity (WINE) and the main correctness check on the tables.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right

import numpy as np

from . import dists

KNOWN = "known"
UNKNOWN = "unknown"

# ages just below an atom represent the left limit of conditional quantities
_LEFT = 1.0 - 1e-12
# segments narrower than this (relative) encode jump discontinuities
_JUMP_REL = 1e-9


def _is_jump(x0, x1, scale):
    return x1 - x0 <= _JUMP_REL * max(abs(x1), scale)


class DomainExceeded(Exception):
    """Queried age lies beyond the tabulated grid."""


class JobModel:
    def __init__(self, kind, size_dist):
        if kind not in (KNOWN, UNKNOWN):
            raise ValueError(f"job model kind must be 'known' or 'unknown', got {kind!r}")
        if size_dist.mean() <= 0.0 or not math.isfinite(size_dist.mean()):
            raise ValueError("size distribution needs a positive finite mean")
        self.kind = kind
        self.size_dist = size_dist

    def __repr__(self):
        return f"JobModel({self.kind}, {self.size_dist!r})"


class JobState:
    """Scalar job state; ``hidden`` is the pre-sampled size under unknown sizes.

    The scheduler never reads ``hidden``; it exists so that conditional
    dynamics can be simulated exactly.
    """

    __slots__ = ("value", "completed", "hidden")

    def __init__(self, value, completed=False, hidden=None):
        self.value = float(value)
        self.completed = completed
        self.hidden = hidden

    def __repr__(self):
        if self.completed:
            return "JobState(completed)"
        return f"JobState(value={self.value:.6g})"


def fresh_state(model, rng):
    """State of a newly arrived job; draws the size from the model."""
    size = model.size_dist.sample(rng)
    if model.kind == KNOWN:
        return JobState(size)
    return JobState(0.0, hidden=size)


def advance(model, state, service, rng=None):
    """State after ``service`` units of work (work, not wall time)."""
    if state.completed:
        raise ValueError("cannot advance a completed job")
    if service < 0.0:
        raise ValueError("service must be >= 0")
    if model.kind == KNOWN:
        left = state.value - service
        if left <= 1e-15 * max(1.0, state.value):
            return JobState(0.0, completed=True)
        return JobState(left)
    hidden = state.hidden
    if hidden is None:
        if rng is None:
            raise ValueError("unknown-size state without a hidden size needs an rng")
        # sample the size conditioned on exceeding the attained service
        t = model.size_dist.tail(state.value)
        u = 1.0 - float(t) * rng.random()
        hidden = model.size_dist.quantile(min(u, 1.0 - 1e-16))
    age = state.value + service
    if age >= hidden * (1.0 - 1e-15):
        return JobState(0.0, completed=True)
    return JobState(age, hidden=hidden)


def _golden_min(f, a, b, iters=60):
    """Plain golden-section minimization on [a, b]; returns (x, f(x))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


class RankFunction:
    """Gittins rank as a function of job state, plus r-work helpers."""

    model: JobModel

    def rank(self, x):
        raise NotImplementedError

    def rank_bounds(self):
        """(inf, sup) of the rank over the state space."""
        raise NotImplementedError

    def next_age_at_or_above(self, age, level, strict=False):
        """First age >= ``age`` where the rank reaches ``level`` (inf if never)."""
        raise NotImplementedError

    def expected_r_work(self, x, r):
        """E[S_r(x)]: expected service to finish or reach rank >= r."""
        raise NotImplementedError

    def r_work_second_moment(self, x, r):
        """E[S_r(x)^2] for the same stopped service quantity."""
        raise NotImplementedError

    def initial_r_work_moments(self, r):
        """(E[S_r], E[S_r^2]) for a newly arrived job."""
        raise NotImplementedError

    def single_job_wine(self, x):
        """Integral of E[S_r(x)] / r^2 over all r; equals 1 for Gittins ranks."""
        raise NotImplementedError

    def crossings_for(self, r):
        """Rank crossings of level r along the age axis.

        Returns a list of (age, direction, m_after, q_after) with direction
        +1 when the rank drops below r (the job turns relevant again) and -1
        when it rises to r or above.  Only meaningful for tabulated ranks;
        known-size ranks cross r at remaining work r, which depends on the
        job, so the simulator handles that case in closed form.
        """
        raise NotImplementedError

    def table(self):
        """(ages, ranks) arrays for CSV export."""
        raise NotImplementedError


def gittins_rank(rank_fn, state):
    if state.completed:
        raise ValueError("rank undefined for a completed job")
    return rank_fn.rank(state.value)


def expected_r_work(rank_fn, state, r):
    if state.completed:
        raise ValueError("r-work undefined for a completed job")
    return rank_fn.expected_r_work(state.value, r)


def single_job_wine(rank_fn, state):
    if state.completed:
        raise ValueError("wine integral undefined for a completed job")
    return rank_fn.single_job_wine(state.value)


class SrptRankFunction(RankFunction):
    """Known sizes: rank(x) = x, everything in closed form."""

    def __init__(self, model):
        if model.kind != KNOWN:
            raise ValueError("SrptRankFunction requires the known-size model")
        self.model = model

    def rank(self, x):
        return float(x)

    def rank_bounds(self):
        top = self.model.size_dist.upper_support()
        if math.isinf(top):
            top = self.model.size_dist.quantile(1.0 - dists.TAIL_EPS)
        return (0.0, top)

    def next_age_at_or_above(self, age, level, strict=False):
        # remaining work only decreases during service
        if strict:
            return math.inf
        return age if self.rank(age) >= level else math.inf

    def expected_r_work(self, x, r):
        return x if x < r else 0.0

    def r_work_second_moment(self, x, r):
        return x * x if x < r else 0.0

    def initial_r_work_moments(self, r):
        d = self.model.size_dist
        return d.trunc_mean(r), d.trunc_m2(r)

    def single_job_wine(self, x):
        # int_x^inf x / r^2 dr = 1, exactly
        if x <= 0.0:
            return 1.0
        return x * (1.0 / self.rank(x))

    def table(self):
        lo, hi = self.rank_bounds()
        ages = np.linspace(0.0, hi, 512)
        return ages, ages.copy()


class TabulatedRankFunction(RankFunction):
    """Unknown sizes: rank tabulated on an age grid, linear between knots.

    Duplicated ages encode jump discontinuities (left value first); queries
    at a duplicated age return the right limit, matching the convention that
    age x means the job has survived x units of service.
    """

    def __init__(self, model, ages, ranks):
        self.model = model
        self.ages = np.asarray(ages, dtype=float)
        self.ranks = np.asarray(ranks, dtype=float)
        if len(self.ages) != len(self.ranks) or len(self.ages) < 2:
            raise ValueError("table needs matching age/rank arrays, length >= 2")
        if np.any(np.diff(self.ages) < 0.0):
            raise ValueError("table ages must be nondecreasing")
        if np.any(self.ranks < 0.0):
            raise ValueError("ranks must be nonnegative")
        d = model.size_dist
        self._tail = np.asarray(d.tail(self.ages), dtype=float)
        self._itt = np.array([d.tail_integral(a) for a in self.ages])
        self._ages_list = self.ages.tolist()
        self._ranks_list = self.ranks.tolist()

    # ---- evaluation ------------------------------------------------------

    def _segment(self, x):
        ages = self._ages_list
        if x < ages[0] or x > ages[-1]:
            raise DomainExceeded(
                f"age {x:.6g} outside tabulated range "
                f"[{ages[0]:.6g}, {ages[-1]:.6g}]"
            )
        return min(bisect_right(ages, x) - 1, len(ages) - 2)

    def rank(self, x, clamp=False):
        ages = self._ages_list
        if clamp:
            x = min(max(x, ages[0]), ages[-1])
        i = self._segment(x)
        x0, x1 = ages[i], ages[i + 1]
        ranks = self._ranks_list
        if x1 <= x0:
            return ranks[i + 1]
        th = (x - x0) / (x1 - x0)
        return ranks[i] + th * (ranks[i + 1] - ranks[i])

    def rank_bounds(self):
        return (float(self.ranks.min()), float(self.ranks.max()))

    def next_age_at_or_above(self, age, level, strict=False):
        cur = self.rank(age)
        hit = (cur > level) if strict else (cur >= level)
        if hit:
            return age
        scale = self.ages[-1] * 1e-3
        i = self._segment(age)
        tail_ranks = self.ranks[i + 1:]
        hits = tail_ranks > level if strict else tail_ranks >= level
        off = int(np.argmax(hits))
        if len(hits) == 0 or not hits[off]:
            return math.inf
        j = i + 1 + off
        x1, r1 = float(self.ages[j]), float(self.ranks[j])
        x0, r0 = (age, cur) if off == 0 else (float(self.ages[j - 1]), float(self.ranks[j - 1]))
        if _is_jump(x0, x1, scale) or r1 == r0:
            return x1
        th = (level - r0) / (r1 - r0)
        return x0 + th * (x1 - x0)

    def _phi(self, x, y):
        """E[min(S, y) - x | S > x] evaluated exactly from tail integrals."""
        d = self.model.size_dist
        tx = float(d.tail(x))
        if tx <= 0.0:
            return 0.0
        return d.integrated_tail(x, y) / tx

    def expected_r_work(self, x, r):
        if self.rank(x) >= r:
            return 0.0
        y = self.next_age_at_or_above(x, r)
        return self._phi(x, y)

    def r_work_second_moment(self, x, r):
        if self.rank(x) >= r:
            return 0.0
        y = self.next_age_at_or_above(x, r)
        d = self.model.size_dist
        tx = float(d.tail(x))
        if tx <= 0.0:
            return 0.0
        return 2.0 * (d.t_integrated_tail(x, y) - x * d.integrated_tail(x, y)) / tx

    def initial_r_work_moments(self, r):
        return self.expected_r_work(0.0, r), self.r_work_second_moment(0.0, r)

    def single_job_wine(self, x):
        """Exact integral of E[S_r(x)]/r^2 against the tabulated rank.

        Parametrized by the running maximum of the rank beyond x: as r grows
        past each new maximum level, the optimal give-up age y*(x, r) sweeps
        forward, so the integral accumulates in closed form per table
        segment (phi treated linear within a segment).
        """
        i = self._segment(x)
        level = self.rank(x)
        d = self.model.size_dist
        tx = float(d.tail(x))
        if tx <= 0.0:
            return 1.0
        itt_x = d.tail_integral(x)

        def phi(j):
            return (itt_x - self._itt[j]) / tx

        total = 0.0
        scale = self.ages[-1] * 1e-3
        u0 = x
        phi0 = 0.0
        r0 = level
        for j in range(i + 1, len(self.ages)):
            u1, r1 = float(self.ages[j]), float(self.ranks[j])
            phi1 = phi(j)
            if r1 > level:
                if _is_jump(u0, u1, scale) or r1 <= r0:
                    # jump (or flat step) straight up to r1 at age u1
                    total += phi1 * (1.0 / level - 1.0 / r1)
                else:
                    # linear climb; envelope grows on (level, r1]
                    if r0 < level:
                        th = (level - r0) / (r1 - r0)
                        ue = u0 + th * (u1 - u0)
                        phie = phi0 + th * (phi1 - phi0)
                    else:
                        ue, phie = u0, phi0
                    if r1 - level < 1e-6 * level:
                        # closed form cancels for negligible rises
                        total += 0.5 * (phie + phi1) * (1.0 / level - 1.0 / r1)
                    else:
                        # phi(y(r)) = alpha + beta r on [level, r1]
                        beta = (phi1 - phie) / (r1 - level)
                        alpha = phie - beta * level
                        total += alpha * (1.0 / level - 1.0 / r1) + beta * math.log(r1 / level)
                level = r1
            u0, r0, phi0 = u1, r1, phi1
        # beyond the table the rank is taken constant: serve to completion
        m_inf = itt_x / tx
        total += m_inf / level
        return total

    def crossings_for(self, r):
        out = []
        scale = self.ages[-1] * 1e-3
        relevant = self.ranks[0] < r
        x0, r0 = float(self.ages[0]), float(self.ranks[0])
        for j in range(1, len(self.ages)):
            x1, r1 = float(self.ages[j]), float(self.ranks[j])
            if relevant and r1 >= r:
                if not _is_jump(x0, x1, scale) and r1 != r0 and r0 < r:
                    th = (r - r0) / (r1 - r0)
                    xc = x0 + th * (x1 - x0)
                else:
                    xc = x1
                out.append([xc, -1, 0.0, 0.0])
                relevant = False
            elif not relevant and r1 < r:
                if not _is_jump(x0, x1, scale) and r1 != r0 and r0 > r:
                    th = (r - r0) / (r1 - r0)
                    xc = x0 + th * (x1 - x0)
                else:
                    xc = x1
                out.append([xc, +1, 0.0, 0.0])
                relevant = True
            x0, r0 = x1, r1
        # annotate each down-crossing with conditional r-work moments there
        for idx, (xc, direction, _, _) in enumerate(out):
            if direction == +1:
                nxt = math.inf
                for xn, dn, _, _ in out[idx + 1:]:
                    if dn == -1:
                        nxt = xn
                        break
                d = self.model.size_dist
                tx = float(d.tail(xc))
                if tx <= 0.0:
                    m = q = 0.0
                else:
                    m = d.integrated_tail(xc, nxt) / tx
                    q = 2.0 * (d.t_integrated_tail(xc, nxt) - xc * d.integrated_tail(xc, nxt)) / tx
                out[idx][2] = m
                out[idx][3] = q
        return [tuple(c) for c in out]

    def table(self):
        return self.ages.copy(), self.ranks.copy()


def _age_grid(dist, n):
    """Age knots: log and linear spacing plus atoms with left-limit twins."""
    top = dist.upper_support()
    if math.isinf(top):
        top = dist.quantile(1.0 - 1e-12)
    pts = {0.0}
    pts.update(np.geomspace(top * 1e-6, top, n // 2).tolist())
    pts.update(np.linspace(0.0, top, n // 2).tolist())
    for a in dist.atoms():
        if 0.0 < a <= top:
            pts.add(a * _LEFT)
            if float(dist.tail(a)) > 0.0:
                pts.add(a)
    ages = np.array(sorted(pts))
    # states exist only where the tail is positive
    tails = np.asarray(dist.tail(ages), dtype=float)
    return ages[tails > 0.0]


def _rank_at(dist, x, y_ages, y_itt, y_tail, itt_x, scale):
    """Best service-per-completion ratio at age x over grid + refinements."""
    tx = float(dist.tail(x))
    num = itt_x - y_itt
    den = tx - y_tail
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(den > max(tx * 1e-9, 1e-300), num / den, math.inf)
    # guard the near field where both integrals cancel; the reciprocal
    # hazard candidate below covers the y -> x limit analytically
    near = y_ages - x < 1e-7 * (x + scale)
    ratios = np.where(near, math.inf, ratios)
    best = float(ratios.min()) if len(ratios) else math.inf

    # serving to completion is always an admissible stopping rule
    best = min(best, itt_x / tx)

    # limit of the ratio as y -> x+ is the reciprocal hazard rate
    h = dist.hazard(x)
    if h is not None and h > 0.0:
        best = min(best, 1.0 / h)

    if len(ratios):
        j = int(np.argmin(ratios))
        lo = y_ages[j - 1] if j > 0 else x
        hi = y_ages[j + 1] if j + 1 < len(y_ages) else y_ages[j]
        if hi > lo:
            def f(y):
                if y - x < 1e-7 * (x + scale):
                    return math.inf
                dy = tx - float(dist.tail(y))
                if dy <= max(tx * 1e-9, 1e-300):
                    return math.inf
                return dist.integrated_tail(x, y) / dy

            _, fv = _golden_min(f, lo, hi)
            best = min(best, fv)
    return best


_TABLE_CACHE = {}


def build_rank_table(model, n_grid=4096):
    """Rank function for a job model (closed form or tabulated).

    Tabulated results are memoized per (size distribution, grid size); the
    tables are immutable, so sharing across runs is safe.
    """
    if model.kind == KNOWN:
        return SrptRankFunction(model)
    key = (json.dumps(model.size_dist.params(), sort_keys=True), n_grid)
    hit = _TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    rf = _build_rank_table_uncached(model, n_grid)
    _TABLE_CACHE[key] = rf
    return rf


def _build_rank_table_uncached(model, n_grid):
    d = model.size_dist
    ages = _age_grid(d, n_grid)
    # y candidates: every state knot plus the endpoint of the support
    y_pts = list(ages[1:])
    top = d.upper_support()
    if math.isfinite(top) and (not y_pts or y_pts[-1] < top):
        y_pts.append(top)
    y_ages = np.array(y_pts)
    y_itt = np.array([d.tail_integral(y) for y in y_ages])
    y_tail = np.asarray(d.tail(y_ages), dtype=float)

    ranks = np.empty_like(ages)
    itt = np.array([d.tail_integral(a) for a in ages])
    scale = d.mean()
    for i, x in enumerate(ages):
        keep = y_ages > x
        ranks[i] = _rank_at(d, x, y_ages[keep], y_itt[keep], y_tail[keep], itt[i], scale)
    return TabulatedRankFunction(model, ages, ranks)


def export_rank_table_csv(rank_fn, path):
    ages, ranks = rank_fn.table()
    with open(path, "w") as fh:
        fh.write("age,rank\n")
        for a, r in zip(ages, ranks):
            fh.write(f"{a!r},{r!r}\n")

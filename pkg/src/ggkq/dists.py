"""Parametric nonnegative distributions with exact moments and tail integrals.

Every family exposes, in closed form where possible:

* ``tail(t)``            survival function P{V > t}
* ``integrated_tail``    int_a^b P{V > u} du
* ``t_integrated_tail``  int_a^b u P{V > u} du
* moments, excess mean E[V^2] / (2 E[V]), squared coefficient of variation
* ``mrl(a)``             mean residual life E[V - a | V > a]
* ``residual_bounds()``  uniform bounds on the mean residual life
* seeded sampling via a numpy Generator

The tail integrals are the workhorse: truncated moments, excess quantities
and rank computations all reduce to them.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaincc


class UnboundedResidual(Exception):
    """Mean residual interarrival time admits no finite uniform bound."""


# quantile level used to truncate numeric sweeps over unbounded supports
TAIL_EPS = 1e-9


class ResidualBounds:
    """Interval [a_min, a_max] containing E[V - a | V > a] for all ages a."""

    def __init__(self, a_min, a_max):
        if not (0.0 <= a_min <= a_max < math.inf):
            raise ValueError(f"invalid residual bounds ({a_min}, {a_max})")
        self.a_min = float(a_min)
        self.a_max = float(a_max)

    def __iter__(self):
        return iter((self.a_min, self.a_max))

    def __repr__(self):
        return f"ResidualBounds({self.a_min:.6g}, {self.a_max:.6g})"


class Distribution:
    """Base class for the supported nonnegative distribution families."""

    family = "abstract"

    # ---- family-specific primitives ------------------------------------

    def tail(self, t):
        raise NotImplementedError

    def tail_integral(self, a):
        """int_a^inf P{V > u} du, computed without cancellation."""
        raise NotImplementedError

    def t_tail_integral(self, a):
        """int_a^inf u P{V > u} du, computed without cancellation."""
        raise NotImplementedError

    def integrated_tail(self, a, b):
        """int_a^b P{V > u} du, with b = inf allowed."""
        if math.isinf(b):
            return self.tail_integral(a)
        return self.tail_integral(a) - self.tail_integral(b)

    def t_integrated_tail(self, a, b):
        """int_a^b u P{V > u} du, with b = inf allowed."""
        if math.isinf(b):
            return self.t_tail_integral(a)
        return self.t_tail_integral(a) - self.t_tail_integral(b)

    def mean(self):
        raise NotImplementedError

    def second_moment(self):
        raise NotImplementedError

    def quantile(self, q):
        raise NotImplementedError

    def upper_support(self):
        """Essential supremum (may be inf)."""
        raise NotImplementedError

    def atoms(self):
        """Ages where the distribution carries point mass."""
        return []

    def hazard(self, x):
        """Density / tail at x, or None where there is no density."""
        return None

    def sample(self, rng):
        raise NotImplementedError

    def scaled(self, c):
        """Distribution of c * V (time rescaling)."""
        raise NotImplementedError

    def params(self):
        """Family parameters as a plain dict (config round-trip, hashing)."""
        raise NotImplementedError

    # ---- derived quantities --------------------------------------------

    def var(self):
        return self.second_moment() - self.mean() ** 2

    def cv2(self):
        m = self.mean()
        if m <= 0.0:
            raise ValueError("cv2 undefined for zero-mean distribution")
        return self.var() / m**2

    def excess_mean(self):
        """E[V_e] = E[V^2] / (2 E[V]); zero for the identically-zero case."""
        m = self.mean()
        if m == 0.0:
            return 0.0
        return self.second_moment() / (2.0 * m)

    def is_zero(self):
        return self.upper_support() == 0.0

    def e_min(self, y):
        """E[min(V, y)]."""
        return self.integrated_tail(0.0, y)

    def e_min2(self, y):
        """E[min(V, y)^2]."""
        return 2.0 * self.t_integrated_tail(0.0, y)

    def trunc_mean(self, r):
        """E[V 1(V <= r)]."""
        return self.mean() - r * self.tail(r) - self.integrated_tail(r, math.inf)

    def trunc_m2(self, r):
        """E[V^2 1(V <= r)]."""
        return 2.0 * self.t_integrated_tail(0.0, r) - r * r * self.tail(r)

    def mrl(self, a):
        """Mean residual life E[V - a | V > a]; requires tail(a) > 0."""
        ta = self.tail(a)
        if ta <= 0.0:
            raise ValueError(f"mrl undefined at age {a}: tail is zero")
        return self.integrated_tail(a, math.inf) / ta

    def residual_bounds(self):
        return numeric_residual_bounds(self)

    def sample_n(self, rng, n):
        return np.array([self.sample(rng) for _ in range(n)])

    def __repr__(self):
        inner = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({inner})"


def numeric_residual_bounds(dist, n_grid=10_000):
    """Sweep the mean residual life on an age grid up to the 1 - 1e-9 quantile.

    Raises UnboundedResidual if the sweep shows the conditional mean still
    growing without an apparent bound at the truncation point.
    """
    top = min(dist.upper_support(), dist.quantile(1.0 - TAIL_EPS))
    ages = np.linspace(0.0, top, n_grid, endpoint=False)
    vals = []
    for a in ages:
        if dist.tail(a) <= 0.0:
            break
        vals.append(dist.mrl(a))
    vals = np.asarray(vals)
    hi = float(vals.max())
    if math.isinf(dist.upper_support()):
        # growing tail of the sweep signals a diverging conditional mean
        m = len(vals)
        last, prev = vals[int(0.99 * m):], vals[int(0.95 * m):int(0.99 * m)]
        if last.mean() > prev.mean() and last.mean() > 50.0 * dist.mean():
            raise UnboundedResidual(
                f"{dist!r}: conditional residual mean exceeds "
                f"{last.mean():.3g} and is still increasing"
            )
    lo = float(vals.min())
    # residual life vanishes as the age approaches a finite endpoint
    if math.isfinite(dist.upper_support()):
        lo = 0.0
    return ResidualBounds(lo, hi)


class Deterministic(Distribution):
    """Point mass at v >= 0."""

    family = "deterministic"

    def __init__(self, value):
        if value < 0.0:
            raise ValueError("deterministic value must be >= 0")
        self.value = float(value)

    def tail(self, t):
        return (np.asarray(t, dtype=float) < self.value) * 1.0

    def tail_integral(self, a):
        return max(0.0, self.value - a)

    def t_tail_integral(self, a):
        if a >= self.value:
            return 0.0
        return 0.5 * (self.value - a) * (self.value + a)

    def mean(self):
        return self.value

    def second_moment(self):
        return self.value**2

    def quantile(self, q):
        return self.value

    def upper_support(self):
        return self.value

    def atoms(self):
        return [self.value] if self.value > 0.0 else [0.0]

    def sample(self, rng):
        return self.value

    def scaled(self, c):
        return Deterministic(c * self.value)

    def residual_bounds(self):
        return ResidualBounds(0.0, self.value)

    def params(self):
        return {"family": self.family, "value": self.value}


class Exponential(Distribution):
    family = "exponential"

    def __init__(self, rate):
        if rate <= 0.0:
            raise ValueError("exponential rate must be > 0")
        self.rate = float(rate)

    def tail(self, t):
        return np.exp(-self.rate * np.asarray(t, dtype=float))

    def tail_integral(self, a):
        return math.exp(-self.rate * a) / self.rate

    def t_tail_integral(self, a):
        mu = self.rate
        return (a / mu + 1.0 / mu**2) * math.exp(-mu * a)

    def mean(self):
        return 1.0 / self.rate

    def second_moment(self):
        return 2.0 / self.rate**2

    def quantile(self, q):
        return -math.log1p(-q) / self.rate

    def upper_support(self):
        return math.inf

    def hazard(self, x):
        return self.rate

    def sample(self, rng):
        return -math.log1p(-rng.random()) / self.rate

    def scaled(self, c):
        return Exponential(self.rate / c)

    def mrl(self, a):
        return 1.0 / self.rate

    def residual_bounds(self):
        return ResidualBounds(1.0 / self.rate, 1.0 / self.rate)

    def params(self):
        return {"family": self.family, "rate": self.rate}


class Uniform(Distribution):
    family = "uniform"

    def __init__(self, lo, hi):
        if not (0.0 <= lo < hi):
            raise ValueError("uniform requires 0 <= lo < hi")
        self.lo = float(lo)
        self.hi = float(hi)

    def tail(self, t):
        t = np.asarray(t, dtype=float)
        return np.clip((self.hi - t) / (self.hi - self.lo), 0.0, 1.0)

    def tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        w = self.hi - self.lo
        if a >= self.lo:
            return 0.5 * (self.hi - a) ** 2 / w
        return (self.lo - a) + 0.5 * w

    def t_tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        w = self.hi - self.lo
        if a >= self.lo:
            # int_a^hi u (hi - u) / w du with s = hi - a
            s = self.hi - a
            return (0.5 * self.hi * s**2 - s**3 / 3.0) / w
        head = 0.5 * (self.lo - a) * (self.lo + a)
        s = w
        return head + (0.5 * self.hi * s**2 - s**3 / 3.0) / w

    def mean(self):
        return 0.5 * (self.lo + self.hi)

    def second_moment(self):
        return (self.lo**2 + self.lo * self.hi + self.hi**2) / 3.0

    def quantile(self, q):
        return self.lo + q * (self.hi - self.lo)

    def upper_support(self):
        return self.hi

    def hazard(self, x):
        if x < self.lo or x >= self.hi:
            return None
        return 1.0 / (self.hi - x)

    def sample(self, rng):
        return self.lo + (self.hi - self.lo) * rng.random()

    def scaled(self, c):
        return Uniform(c * self.lo, c * self.hi)

    def residual_bounds(self):
        return ResidualBounds(0.0, self.mean())

    def params(self):
        return {"family": self.family, "lo": self.lo, "hi": self.hi}


class Hyperexponential(Distribution):
    """Mixture of exponentials: rate mu_i with probability p_i."""

    family = "hyperexp"

    def __init__(self, probs, rates):
        probs = [float(p) for p in probs]
        rates = [float(m) for m in rates]
        if len(probs) != len(rates) or not probs:
            raise ValueError("probs and rates must be same nonzero length")
        if any(p <= 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("probs must be positive and sum to 1")
        if any(m <= 0 for m in rates):
            raise ValueError("rates must be > 0")
        self.probs = probs
        self.rates = rates
        self._cum = np.cumsum(probs)

    def tail(self, t):
        t = np.asarray(t, dtype=float)
        out = sum(p * np.exp(-m * t) for p, m in zip(self.probs, self.rates))
        return out

    def tail_integral(self, a):
        return sum(p * math.exp(-m * a) / m for p, m in zip(self.probs, self.rates))

    def t_tail_integral(self, a):
        return sum(
            p * (a / m + 1.0 / m**2) * math.exp(-m * a)
            for p, m in zip(self.probs, self.rates)
        )

    def mean(self):
        return sum(p / m for p, m in zip(self.probs, self.rates))

    def second_moment(self):
        return sum(2.0 * p / m**2 for p, m in zip(self.probs, self.rates))

    def quantile(self, q):
        # numeric inversion; tail is strictly decreasing and smooth
        lo, hi = 0.0, 1.0
        target = 1.0 - q
        while self.tail(hi) > target:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.tail(mid) > target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def upper_support(self):
        return math.inf

    def hazard(self, x):
        dens = sum(p * m * math.exp(-m * x) for p, m in zip(self.probs, self.rates))
        return dens / float(self.tail(x))

    def sample(self, rng):
        u = rng.random()
        i = int(np.searchsorted(self._cum, u, side="right"))
        i = min(i, len(self.rates) - 1)
        return -math.log1p(-rng.random()) / self.rates[i]

    def scaled(self, c):
        return Hyperexponential(self.probs, [m / c for m in self.rates])

    def residual_bounds(self):
        # decreasing failure rate: mrl increases from E[V] to 1/min(rates)
        return ResidualBounds(self.mean(), 1.0 / min(self.rates))

    def params(self):
        return {"family": self.family, "probs": self.probs, "rates": self.rates}


def hyperexp_balanced(mean, cv2):
    """Two-branch hyperexponential with given mean and cv^2 > 1, balanced means."""
    if cv2 <= 1.0:
        raise ValueError("balanced hyperexponential needs cv2 > 1")
    p1 = 0.5 * (1.0 + math.sqrt((cv2 - 1.0) / (cv2 + 1.0)))
    mu1 = 2.0 * p1 / mean
    mu2 = 2.0 * (1.0 - p1) / mean
    return Hyperexponential([p1, 1.0 - p1], [mu1, mu2])


class Erlang(Distribution):
    """Sum of ``shape`` i.i.d. exponentials of the given rate."""

    family = "erlang"

    def __init__(self, shape, rate):
        if int(shape) != shape or shape < 1:
            raise ValueError("erlang shape must be a positive integer")
        if rate <= 0.0:
            raise ValueError("erlang rate must be > 0")
        self.shape = int(shape)
        self.rate = float(rate)

    def tail(self, t):
        t = np.asarray(t, dtype=float)
        x = self.rate * t
        out = np.zeros_like(x)
        term = np.exp(-x)
        for j in range(self.shape):
            out = out + term
            term = term * x / (j + 1)
        return out

    def _sf_gamma(self, j, y):
        # P{Erlang(j, rate) > y}
        if math.isinf(y):
            return 0.0
        return float(gammaincc(j, self.rate * y))

    def tail_integral(self, a):
        # int_a^inf tail = (1/rate) sum_{j=1..n} P{Erlang(j) > a}
        return sum(self._sf_gamma(j, a) for j in range(1, self.shape + 1)) / self.rate

    def t_tail_integral(self, a):
        # int_a^inf u tail(u) du = (1/rate^2) sum_{j=0..n-1} (j+1) P{Erlang(j+2) > a}
        s = sum((j + 1) * self._sf_gamma(j + 2, a) for j in range(self.shape))
        return s / self.rate**2

    def mean(self):
        return self.shape / self.rate

    def second_moment(self):
        return self.shape * (self.shape + 1) / self.rate**2

    def quantile(self, q):
        from scipy.special import gammaincinv

        return float(gammaincinv(self.shape, q)) / self.rate

    def upper_support(self):
        return math.inf

    def hazard(self, x):
        if x == 0.0 and self.shape > 1:
            return 0.0
        dens = (
            self.rate
            * math.exp(-self.rate * x)
            * (self.rate * x) ** (self.shape - 1)
            / math.factorial(self.shape - 1)
        )
        return dens / float(self.tail(x))

    def sample(self, rng):
        total = 0.0
        for _ in range(self.shape):
            total -= math.log1p(-rng.random())
        return total / self.rate

    def scaled(self, c):
        return Erlang(self.shape, self.rate / c)

    def residual_bounds(self):
        # increasing failure rate: mrl decreases from n/rate toward 1/rate
        return ResidualBounds(1.0 / self.rate, self.shape / self.rate)

    def params(self):
        return {"family": self.family, "shape": self.shape, "rate": self.rate}


class BoundedPareto(Distribution):
    """Power-law tail with exponent alpha on [lo, hi]."""

    family = "bounded_pareto"

    def __init__(self, alpha, lo, hi):
        if alpha <= 0.0 or not (0.0 < lo < hi < math.inf):
            raise ValueError("bounded pareto requires alpha > 0 and 0 < lo < hi")
        self.alpha = float(alpha)
        self.lo = float(lo)
        self.hi = float(hi)
        self._norm = 1.0 - (lo / hi) ** alpha

    def tail(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.lo, self.hi)
        core = ((self.lo / tc) ** self.alpha - (self.lo / self.hi) ** self.alpha) / self._norm
        return np.where(t < self.lo, 1.0, np.where(t >= self.hi, 0.0, core))

    def _anti_pow(self, u):
        # antiderivative of (lo/u)^alpha
        a = self.alpha
        if a == 1.0:
            return self.lo * math.log(u)
        return self.lo**a * u ** (1.0 - a) / (1.0 - a)

    def _anti_tpow(self, u):
        # antiderivative of u (lo/u)^alpha
        a = self.alpha
        if a == 2.0:
            return self.lo**2 * math.log(u)
        return self.lo**a * u ** (2.0 - a) / (2.0 - a)

    def tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        total = max(0.0, self.lo - a)
        lo2 = max(a, self.lo)
        c = (self.lo / self.hi) ** self.alpha
        total += ((self._anti_pow(self.hi) - self._anti_pow(lo2)) - c * (self.hi - lo2)) / self._norm
        return total

    def t_tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        total = 0.0
        if a < self.lo:
            total += 0.5 * (self.lo - a) * (self.lo + a)
        lo2 = max(a, self.lo)
        c = (self.lo / self.hi) ** self.alpha
        total += (
            (self._anti_tpow(self.hi) - self._anti_tpow(lo2))
            - 0.5 * c * (self.hi - lo2) * (self.hi + lo2)
        ) / self._norm
        return total

    def mean(self):
        return self.integrated_tail(0.0, self.hi)

    def second_moment(self):
        return 2.0 * self.t_integrated_tail(0.0, self.hi)

    def quantile(self, q):
        if q <= 0.0:
            return self.lo
        target = 1.0 - q
        a = self.alpha
        inner = target * self._norm + (self.lo / self.hi) ** a
        return self.lo * inner ** (-1.0 / a)

    def upper_support(self):
        return self.hi

    def hazard(self, x):
        if x < self.lo or x >= self.hi:
            return None if x < self.lo else None
        dens = self.alpha * self.lo**self.alpha * x ** (-self.alpha - 1.0) / self._norm
        return dens / float(self.tail(x))

    def sample(self, rng):
        return self.quantile(rng.random())

    def scaled(self, c):
        return BoundedPareto(self.alpha, c * self.lo, c * self.hi)

    def params(self):
        return {"family": self.family, "alpha": self.alpha, "lo": self.lo, "hi": self.hi}


class Bimodal(Distribution):
    """Two-point distribution: lo with probability p_lo, else hi."""

    family = "bimodal"

    def __init__(self, lo, p_lo, hi):
        if not (0.0 < lo < hi):
            raise ValueError("bimodal requires 0 < lo < hi")
        if not (0.0 < p_lo < 1.0):
            raise ValueError("bimodal requires 0 < p_lo < 1")
        self.lo = float(lo)
        self.p_lo = float(p_lo)
        self.hi = float(hi)

    def tail(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < self.lo, 1.0, np.where(t < self.hi, 1.0 - self.p_lo, 0.0))

    def tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        seg1 = max(0.0, self.lo - a)
        seg2 = (self.hi - max(a, self.lo)) * (1.0 - self.p_lo)
        return seg1 + seg2

    def t_tail_integral(self, a):
        if a >= self.hi:
            return 0.0
        total = 0.0
        if a < self.lo:
            total += 0.5 * (self.lo - a) * (self.lo + a)
        lo2 = max(a, self.lo)
        total += 0.5 * (1.0 - self.p_lo) * (self.hi - lo2) * (self.hi + lo2)
        return total

    def mean(self):
        return self.p_lo * self.lo + (1.0 - self.p_lo) * self.hi

    def second_moment(self):
        return self.p_lo * self.lo**2 + (1.0 - self.p_lo) * self.hi**2

    def quantile(self, q):
        return self.lo if q <= self.p_lo else self.hi

    def upper_support(self):
        return self.hi

    def atoms(self):
        return [self.lo, self.hi]

    def sample(self, rng):
        return self.lo if rng.random() < self.p_lo else self.hi

    def scaled(self, c):
        return Bimodal(c * self.lo, self.p_lo, c * self.hi)

    def residual_bounds(self):
        return ResidualBounds(0.0, max(self.mean(), self.hi - self.lo))

    def params(self):
        return {"family": self.family, "lo": self.lo, "p_lo": self.p_lo, "hi": self.hi}


_FACTORIES = {
    "deterministic": lambda p: Deterministic(p["value"]),
    "exponential": lambda p: Exponential(p["rate"]),
    "uniform": lambda p: Uniform(p["lo"], p["hi"]),
    "hyperexp": lambda p: Hyperexponential(p["probs"], p["rates"]),
    "erlang": lambda p: Erlang(p["shape"], p["rate"]),
    "bounded_pareto": lambda p: BoundedPareto(p["alpha"], p["lo"], p["hi"]),
    "bimodal": lambda p: Bimodal(p["lo"], p["p_lo"], p["hi"]),
}


def from_params(spec):
    """Build a distribution from a {family, ...params} mapping."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in _FACTORIES:
        known = ", ".join(sorted(_FACTORIES))
        raise ValueError(f"unknown distribution family {family!r} (known: {known})")
    try:
        return _FACTORIES[family]({"family": family, **spec})
    except KeyError as exc:
        raise ValueError(f"missing parameter {exc} for family {family!r}") from None


# free-function aliases ----------------------------------------------------

def sample(dist, rng):
    return dist.sample(rng)


def excess_mean(dist):
    return dist.excess_mean()


def residual_bounds(dist):
    return dist.residual_bounds()


def cv2(dist):
    return dist.cv2()

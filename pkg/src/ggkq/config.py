"""Experiment specifications: TOML parsing, sweeps, and config hashing."""

from __future__ import annotations

import hashlib
import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dists
from .jobs import KNOWN, UNKNOWN, JobModel, build_rank_table
from .sim import POLICIES, SimConfig

SUITES = (
    "simulate",
    "wine",
    "decomposition",
    "gap",
    "single-server-optimality",
    "heavy-traffic",
    "setup-bound",
)


class ConfigError(Exception):
    """Experiment file failed to parse or validate."""


class ExperimentSpec:
    def __init__(self, name, base, sweep, suite, replications, output_dir, baseline_overrides):
        self.name = name
        self.base = base  # dict of SimConfig kwargs-as-parsed (with dist objects)
        self.sweep = sweep
        self.suite = suite
        self.replications = replications
        self.output_dir = output_dir
        self.baseline_overrides = baseline_overrides

    def points(self):
        """Expand the sweep grid into (point descriptor, SimConfig) pairs."""
        rhos = self.sweep.get("rho", [None])
        ks = self.sweep.get("k", [None])
        policies = self.sweep.get("policy", [None])
        horizons = self.sweep.get("horizon", None)
        if horizons is not None and len(horizons) != len(rhos):
            raise ConfigError("sweep.horizon must match sweep.rho in length")
        out = []
        for i, rho in enumerate(rhos):
            for k in ks:
                for pol in policies:
                    kw = dict(self.base)
                    desc = {}
                    if rho is not None:
                        kw["arrival"] = _rescale_arrival(kw["arrival"], kw["job_model"], rho)
                        if horizons is not None:
                            kw["horizon"] = float(horizons[i])
                        desc["rho"] = rho
                    if k is not None:
                        kw["k"] = int(k)
                        desc["k"] = int(k)
                    if pol is not None:
                        kw["policy"] = pol
                        desc["policy"] = pol
                    out.append((desc, make_sim_config(kw)))
        return out

    def baseline_for(self, config):
        """Single-server known-size reference system with matching traffic.

        The default comparison point for gap and heavy-traffic checks: same
        arrival process and size distribution, one server, no setup, known
        sizes under the rank policy (shortest remaining work first).
        Entries in the [baseline] table override these defaults.
        """
        kw = {
            "k": 1,
            "arrival": config.arrival,
            "job_model": JobModel(KNOWN, config.job_model.size_dist),
            "setup": dists.Deterministic(0.0),
            "policy": "gittins",
            "horizon": config.horizon,
            "warmup_fraction": config.warmup_fraction,
            "seed": config.seed + 10_000_019,
            "r_grid": (),
            "batch_count": config.batch_count,
            "n_inspect": config.n_inspect,
            "rank_grid_size": config.rank_grid_size,
        }
        kw.update(self.baseline_overrides)
        return make_sim_config(kw)


def _rescale_arrival(arrival, job_model, rho):
    """Scale interarrival times so the load hits ``rho`` (A_rho = A_1 / rho)."""
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"sweep rho {rho} outside (0, 1)")
    mean_s = job_model.size_dist.mean()
    cur_rho = mean_s / arrival.mean()
    return arrival.scaled(cur_rho / rho)


def make_sim_config(kw):
    kw = dict(kw)
    r_auto = kw.pop("r_grid_auto", None)
    cfg = SimConfig(**kw)
    if r_auto:
        cfg = _with_auto_grid(cfg, r_auto)
    return cfg


def _with_auto_grid(cfg, r_auto):
    count = int(r_auto.get("count", 12))
    rank_fn = build_rank_table(cfg.job_model, cfg.rank_grid_size)
    lo_b, hi_b = rank_fn.rank_bounds()
    lo = float(r_auto.get("lo", max(lo_b * 1.05, hi_b * 1e-3, 1e-9)))
    hi = float(r_auto.get("hi", hi_b))
    if not lo < hi:
        lo, hi = hi_b * 0.5, hi_b
    import numpy as np

    grid = np.geomspace(lo, hi, count)
    kw = _config_kwargs(cfg)
    kw["r_grid"] = tuple(float(g) for g in grid)
    return SimConfig(**kw)


def _config_kwargs(cfg):
    return {
        "k": cfg.k,
        "arrival": cfg.arrival,
        "job_model": cfg.job_model,
        "setup": cfg.setup,
        "policy": cfg.policy,
        "horizon": cfg.horizon,
        "warmup_fraction": cfg.warmup_fraction,
        "seed": cfg.seed,
        "r_grid": cfg.r_grid,
        "batch_count": cfg.batch_count,
        "n_inspect": cfg.n_inspect,
        "rank_grid_size": cfg.rank_grid_size,
        "trace_path": cfg.trace_path,
        "label": cfg.label,
    }


def with_updates(cfg, **updates):
    kw = _config_kwargs(cfg)
    kw.update(updates)
    return SimConfig(**kw)


def _parse_dist(table, where):
    if not isinstance(table, dict) or "family" not in table:
        raise ConfigError(f"{where}: expected a table with a 'family' key")
    try:
        return dists.from_params(table)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_experiment(path):
    """Parse a TOML experiment file into an ExperimentSpec."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: TOML parse error: {exc}") from None
    return parse_experiment(raw, path)


def parse_experiment(raw, where="<config>"):
    if "sim" not in raw:
        raise ConfigError(f"{where}: missing [sim] table")
    sim = dict(raw["sim"])

    arrival = _parse_dist(sim.pop("arrival", None), f"{where}:[sim.arrival]")
    size = _parse_dist(sim.pop("size", None), f"{where}:[sim.size]")
    setup = sim.pop("setup", None)
    setup = _parse_dist(setup, f"{where}:[sim.setup]") if setup else dists.Deterministic(0.0)

    kind = sim.pop("job_model", "known")
    if kind not in (KNOWN, UNKNOWN):
        raise ConfigError(f"{where}: job_model must be 'known' or 'unknown'")
    if arrival.mean() <= 0.0:
        raise ConfigError(f"{where}: arrival distribution needs a positive mean")

    horizon = sim.pop("horizon", None)
    arrivals = sim.pop("arrivals", None)
    if horizon is None and arrivals is None:
        raise ConfigError(f"{where}: [sim] needs 'horizon' or 'arrivals'")
    if horizon is None:
        horizon = float(arrivals) * arrival.mean()

    base = {
        "k": sim.pop("k", 1),
        "arrival": arrival,
        "job_model": JobModel(kind, size),
        "setup": setup,
        "policy": sim.pop("policy", "gittins"),
        "horizon": float(horizon),
        "warmup_fraction": sim.pop("warmup_fraction", 0.2),
        "seed": raw.get("seed", 0),
        "r_grid": tuple(sim.pop("r_grid", ())),
        "batch_count": sim.pop("batch_count", 32),
        "n_inspect": sim.pop("n_inspect", 4000),
        "rank_grid_size": sim.pop("rank_grid_size", 4096),
        "label": raw.get("name", ""),
    }
    r_auto = sim.pop("r_grid_auto", None)
    if r_auto is not None:
        base["r_grid_auto"] = dict(r_auto)
    if sim:
        raise ConfigError(f"{where}: unknown [sim] keys: {sorted(sim)}")
    if base["policy"] not in POLICIES:
        raise ConfigError(f"{where}: unknown policy {base['policy']!r}")

    sweep = dict(raw.get("sweep", {}))
    for key in sweep:
        if key not in ("rho", "k", "policy", "horizon"):
            raise ConfigError(f"{where}: unknown [sweep] key {key!r}")
        if not isinstance(sweep[key], list) or not sweep[key]:
            raise ConfigError(f"{where}: [sweep] {key} must be a nonempty list")

    suite = raw.get("suite", ["simulate"])
    for s in suite:
        if s not in SUITES:
            raise ConfigError(f"{where}: unknown suite entry {s!r} (known: {SUITES})")
    if not suite:
        raise ConfigError(f"{where}: suite must be nonempty")

    replications = int(raw.get("replications", 1))
    if replications < 1:
        raise ConfigError(f"{where}: replications must be >= 1")

    baseline = {}
    if "baseline" in raw:
        braw = dict(raw["baseline"])
        if "arrival" in braw:
            baseline["arrival"] = _parse_dist(braw.pop("arrival"), f"{where}:[baseline.arrival]")
        if "size" in braw:
            size_b = _parse_dist(braw.pop("size"), f"{where}:[baseline.size]")
            kind_b = braw.pop("job_model", KNOWN)
            baseline["job_model"] = JobModel(kind_b, size_b)
        elif "job_model" in braw:
            baseline["job_model"] = JobModel(braw.pop("job_model"), size)
        if "setup" in braw:
            baseline["setup"] = _parse_dist(braw.pop("setup"), f"{where}:[baseline.setup]")
        for key in ("k", "policy", "horizon", "seed", "batch_count"):
            if key in braw:
                baseline[key] = braw.pop(key)
        if braw:
            raise ConfigError(f"{where}: unknown [baseline] keys: {sorted(braw)}")

    try:
        # validate the base configuration eagerly for line-level diagnostics
        make_sim_config(dict(base))
    except (ValueError, dists.UnboundedResidual) as exc:
        raise ConfigError(f"{where}: {exc}") from None

    return ExperimentSpec(
        name=raw.get("name", "experiment"),
        base=base,
        sweep=sweep,
        suite=list(suite),
        replications=replications,
        output_dir=raw.get("output_dir", "out"),
        baseline_overrides=baseline,
    )


def config_hash(cfg):
    """Short stable hash over every semantically meaningful field."""
    desc = cfg.describe()
    desc["n_inspect"] = cfg.n_inspect
    desc["rank_grid_size"] = cfg.rank_grid_size
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

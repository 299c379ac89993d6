import math
import types

import pytest

from ggkq.bounds import (
    C_CONST,
    InsufficientSamples,
    check_gap_multiserver,
    check_setup_number_bound,
    check_single_server_optimality,
    heavy_traffic_ratio,
    loss_terms,
)
from ggkq.dists import Deterministic, Exponential
from ggkq.jobs import KNOWN, JobModel
from ggkq.sim import SimConfig, run


def cfg_of(k=1, arrival=None, size=None, setup=None, policy="gittins", **kw):
    kw.setdefault("horizon", 10_000.0)
    kw.setdefault("batch_count", 20)
    return SimConfig(
        k=k,
        arrival=arrival or Exponential(0.5),
        job_model=JobModel(KNOWN, size or Exponential(1.0)),
        setup=setup,
        policy=policy,
        **kw,
    )


def fake_stats(mean_n, ci=0.01):
    return types.SimpleNamespace(mean_n=mean_n, mean_n_ci=ci)


def test_c_constant():
    assert C_CONST == pytest.approx(9.0 / (8.0 * math.log(1.5)) + 1.0)
    assert C_CONST == pytest.approx(3.775, abs=5e-4)


def test_loss_terms_single_server_poisson_no_setup():
    rep = loss_terms(cfg_of())
    assert rep.loss_servers == 0.0
    assert rep.loss_arrivals == pytest.approx(0.0, abs=1e-12)
    assert rep.loss_setup == 0.0
    assert rep.total() == pytest.approx(0.0, abs=1e-12)


def test_loss_terms_two_server_poisson():
    rep = loss_terms(cfg_of(k=2))
    assert rep.loss_servers == pytest.approx(C_CONST * math.log(2.0))
    assert rep.loss_servers == pytest.approx(2.6166, abs=2e-3)
    assert rep.loss_arrivals == pytest.approx(0.0, abs=1e-12)
    assert rep.loss_setup == 0.0


def test_loss_terms_deterministic_setup_case():
    # k=2, lam=0.5, deterministic interarrivals of 2, deterministic setup 1
    rep = loss_terms(cfg_of(k=2, arrival=Deterministic(2.0), setup=Deterministic(1.0)))
    assert (rep.a_min, rep.a_max) == (0.0, 2.0)
    assert rep.loss_arrivals == pytest.approx(1.0)
    assert rep.setup_excess == pytest.approx(0.5)
    assert rep.loss_setup == pytest.approx(2.0 + 0.5 * (2.0 + 2.0 * 0.5))
    assert rep.loss_setup == pytest.approx(3.5)


def test_loss_servers_monotone_in_rho_and_k():
    prev = 0.0
    for rho in (0.3, 0.5, 0.7, 0.9):
        rep = loss_terms(cfg_of(k=2, arrival=Exponential(rho)))
        assert rep.loss_servers > prev
        prev = rep.loss_servers
    assert loss_terms(cfg_of(k=3)).loss_servers > loss_terms(cfg_of(k=2)).loss_servers
    # the per-load arrival loss is recomputed with the swept arrival rate
    for rho in (0.4, 0.8):
        rep = loss_terms(cfg_of(k=1, arrival=Deterministic(1.0 / rho)))
        assert rep.loss_arrivals == pytest.approx(rho * (1.0 / rho - 0.0))


def test_gap_trivial_same_policy():
    st = fake_stats(1.0)
    cfg = cfg_of()
    v = check_gap_multiserver(st, st, loss_terms(cfg))
    assert v.passed and v.observed == 0.0


def test_gap_fails_when_bound_violated():
    cfg = cfg_of()  # k=1 Poisson no setup: bound total = 0
    v = check_gap_multiserver(fake_stats(2.0), fake_stats(1.0), loss_terms(cfg))
    assert not v.passed
    assert "FAIL" in v.line()


def test_single_server_optimality_verdicts():
    stats = {
        "gittins": fake_stats(0.9),
        "fcfs": fake_stats(1.0),
        "lcfs-pr": fake_stats(1.1),
    }
    verdicts = check_single_server_optimality(stats)
    assert len(verdicts) == 2 and all(v.passed for v in verdicts)
    stats["fcfs"] = fake_stats(0.5)
    verdicts = check_single_server_optimality(stats)
    assert any(not v.passed for v in verdicts)
    with pytest.raises(ValueError):
        check_single_server_optimality({"fcfs": fake_stats(1.0)})


def test_heavy_traffic_limits():
    rows = heavy_traffic_ratio([(0.9, fake_stats(5.0), fake_stats(10.0))], 1.0, 0.0)
    assert rows[0]["limit"] == pytest.approx(0.5)
    assert rows[0]["ratio"] == pytest.approx(0.5)
    rows = heavy_traffic_ratio([(0.9, fake_stats(10.0), fake_stats(10.0))], 1.0, 1.0)
    assert rows[0]["limit"] == 1.0
    rows = heavy_traffic_ratio([(0.9, fake_stats(10.0), fake_stats(10.0))], math.inf, 0.0)
    assert rows[0]["limit"] == 1.0


def test_setup_number_bound_small_run():
    cfg = cfg_of(
        arrival=Exponential(0.5), setup=Deterministic(1.0),
        horizon=40_000.0, seed=11, n_inspect=4000,
    )
    st = run(cfg)
    verdicts = check_setup_number_bound(st)
    assert len(verdicts) >= 10
    assert all(v.passed for v in verdicts), [v.line() for v in verdicts if not v.passed]
    # bound at age 1 for lam = 0.5, A_max = 2, k = 1: 0.5 + 1 + 0 = 1.5
    lam, a_max = 0.5, 2.0
    assert lam * 1.0 + lam * a_max + cfg.k - 1 == pytest.approx(1.5)


def test_setup_number_bound_needs_samples():
    st = run(cfg_of(horizon=2_000.0, seed=3, n_inspect=50))
    with pytest.raises(InsufficientSamples):
        check_setup_number_bound(st)

import subprocess
import sys

import pytest

MM1_TOML = """
name = "cli-mm1"
seed = 4242
replications = 2
suite = ["simulate", "wine"]

[sim]
k = 1
policy = "gittins"
job_model = "known"
arrivals = 1500
batch_count = 20
n_inspect = 100
r_grid = [0.5, 1.0, 2.0]

[sim.arrival]
family = "exponential"
rate = 0.5

[sim.size]
family = "exponential"
rate = 1.0
"""


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "ggkq.cli", *args],
        capture_output=True, text=True,
    )


@pytest.fixture()
def mm1_file(tmp_path):
    path = tmp_path / "mm1.toml"
    path.write_text(MM1_TOML)
    return str(path)


def test_simulate_schema_and_cardinality(mm1_file, tmp_path):
    out = tmp_path / "out"
    res = run_cli("simulate", "--config", mm1_file, "--out", str(out))
    assert res.returncode == 0, res.stderr
    lines = (out / "summary.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:6] == ["config_hash", "name", "label", "k", "policy", "job_model"]
    # 2 replications + 1 merged row
    assert len(lines) == 1 + 3
    per_r = (out / "per_r.csv").read_text().splitlines()
    assert len(per_r) == 1 + 2 * 3  # reps x r values


def test_sweep_cardinality(mm1_file, tmp_path):
    toml = open(mm1_file).read() + "\n[sweep]\nrho = [0.3, 0.6]\n"
    path = tmp_path / "sweep.toml"
    path.write_text(toml)
    out = tmp_path / "outs"
    res = run_cli("simulate", "--config", str(path), "--out", str(out))
    assert res.returncode == 0, res.stderr
    lines = (out / "summary.csv").read_text().splitlines()
    # 2 sweep points x (2 reps + merged)
    assert len(lines) == 1 + 2 * 3
    rhos = {ln.split(",")[6] for ln in lines[1:]}
    assert rhos == {"0.3", "0.6"}


def test_byte_identical_given_seed(mm1_file, tmp_path):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    r1 = run_cli("simulate", "--config", mm1_file, "--out", str(out1))
    r2 = run_cli("simulate", "--config", mm1_file, "--out", str(out2))
    assert r1.returncode == 0 and r2.returncode == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
    assert (out1 / "per_r.csv").read_bytes() == (out2 / "per_r.csv").read_bytes()
    out3 = tmp_path / "o3"
    r3 = run_cli("simulate", "--config", mm1_file, "--out", str(out3), "--seed", "999")
    assert (out1 / "summary.csv").read_bytes() != (out3 / "summary.csv").read_bytes()


def test_config_hash_covers_fields(mm1_file, tmp_path):
    from ggkq.config import config_hash, load_experiment, with_updates

    spec = load_experiment(mm1_file)
    _, cfg = spec.points()[0]
    seen = {config_hash(cfg)}
    for variant in (
        with_updates(cfg, k=2),
        with_updates(cfg, policy="fcfs"),
        with_updates(cfg, seed=cfg.seed + 1),
        with_updates(cfg, horizon=cfg.horizon * 2),
        with_updates(cfg, r_grid=(0.5, 1.0)),
        with_updates(cfg, warmup_fraction=0.1),
        with_updates(cfg, batch_count=24),
    ):
        h = config_hash(variant)
        assert h not in seen
        seen.add(h)


def test_verify_wine_passes(mm1_file, tmp_path):
    res = run_cli("verify", "--config", mm1_file, "--out", str(tmp_path / "v"))
    assert res.returncode == 0, res.stderr + res.stdout
    assert "WINE" in res.stdout and "PASS" in res.stdout


def test_exit_2_on_bad_config(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(MM1_TOML.replace('rate = 0.5', 'rate = 1.5'))  # rho = 1.5
    res = run_cli("simulate", "--config", str(bad), "--out", str(tmp_path / "x"))
    assert res.returncode == 2
    assert "rho" in res.stderr

    missing = tmp_path / "missing.toml"
    missing.write_text("name = 'x'\n")
    res = run_cli("simulate", "--config", str(missing), "--out", str(tmp_path / "y"))
    assert res.returncode == 2
    assert "[sim]" in res.stderr

    unknown_family = tmp_path / "fam.toml"
    unknown_family.write_text(MM1_TOML.replace('family = "exponential"', 'family = "zeta"', 1))
    res = run_cli("simulate", "--config", str(unknown_family), "--out", str(tmp_path / "z"))
    assert res.returncode == 2
    assert "family" in res.stderr

    res = run_cli("verify", "--config", str(tmp_path / "nope.toml"))
    assert res.returncode == 2


def test_exit_2_on_bad_baseline(mm1_file, tmp_path):
    toml = open(mm1_file).read().replace(
        'suite = ["simulate", "wine"]', 'suite = ["gap"]'
    ) + "\n[baseline]\nnot_a_key = 3\n"
    path = tmp_path / "gap.toml"
    path.write_text(toml)
    res = run_cli("verify", "--config", str(path), "--out", str(tmp_path / "g"))
    assert res.returncode == 2
    assert "baseline" in res.stderr


def test_exit_4_on_failed_verification(mm1_file, tmp_path):
    # baseline at half the load: the zero bound cannot absorb the gap
    toml = open(mm1_file).read().replace(
        'suite = ["simulate", "wine"]', 'suite = ["gap"]'
    ) + '\n[baseline.arrival]\nfamily = "exponential"\nrate = 0.1\n'
    path = tmp_path / "fail.toml"
    path.write_text(toml)
    res = run_cli("verify", "--config", str(path), "--out", str(tmp_path / "f"))
    assert res.returncode == 4, res.stdout + res.stderr
    assert "FAIL" in res.stdout


def test_rank_table_and_bounds_subcommands(mm1_file, tmp_path):
    res = run_cli("rank-table", "--config", mm1_file, "--out", str(tmp_path / "rt"))
    assert res.returncode == 0
    table = (tmp_path / "rt" / "rank_table.csv").read_text().splitlines()
    assert table[0] == "age,rank"

    res = run_cli("bounds", "--config", mm1_file, "--out", str(tmp_path / "b"))
    assert res.returncode == 0
    assert "loss terms" in res.stdout
    rows = (tmp_path / "b" / "bounds.csv").read_text().splitlines()
    assert rows[0].startswith("config_hash,k,rho")


SETUP_TOML = """
name = "cli-setup"
seed = 99
replications = 1
suite = ["setup-bound"]

[sim]
k = 1
policy = "gittins"
job_model = "known"
arrivals = 40000
batch_count = 20
n_inspect = 3000

[sim.arrival]
family = "exponential"
rate = 0.5

[sim.size]
family = "exponential"
rate = 1.0

[sim.setup]
family = "deterministic"
value = 1.0
"""


def test_verify_setup_bound_suite(tmp_path):
    path = tmp_path / "setup.toml"
    path.write_text(SETUP_TOML)
    res = run_cli("verify", "--config", str(path), "--out", str(tmp_path / "sb"))
    assert res.returncode == 0, res.stdout + res.stderr
    assert "setup_bin" in res.stdout and "PASS" in res.stdout

import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from feddua.cli import main
from feddua.harness import (
    METRICS_HEADER,
    ExperimentConfig,
    ExperimentResult,
    build_setup,
    dump_config,
    emit_outputs,
    final_accuracy,
    load_config,
    parse_config,
    read_metrics,
    run_experiment,
    sample_clients,
)
from feddua.numcore import ConfigError, make_rng
from feddua.server import check_ledger

SMALL = """
# a few seconds end to end
num_clients = 20
clients_per_round = 5
rounds = 4
batch_size = 8
eta = 0.2
num_classes = 4
input_dim = 6
samples_per_class = 150
branch_hidden = 4
calib_volumes = 16, 32
calib_rounds = 3
calib_window = 1
attackers = 0
w_exclude = 0
"""


@pytest.fixture(scope="module")
def small_cfg():
    return parse_config(SMALL)


@pytest.fixture(scope="module")
def small_run(small_cfg):
    return run_experiment(small_cfg)


# config -----------------------------------------------------------------------


def test_parse_overrides_and_types():
    cfg = parse_config("rounds = 7\nfeddua = off\nattackers = 1, 2\n", ["eta=0.5", "rounds=9"])
    assert cfg.rounds == 9 and cfg.eta == 0.5 and cfg.feddua is False and cfg.attackers == (1, 2)


@pytest.mark.parametrize(
    "text",
    ["bogus = 1", "rounds", "rounds = many", "feddua = maybe", "clients_per_round = 200", "attackers = 100", "strategy = fedsgd", "eta = 0"],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_branch_overhead_checked_at_startup():
    with pytest.raises(ConfigError):
        build_setup(parse_config(SMALL, ["branch_hidden=8"]))


def test_dump_then_parse_is_identity(small_cfg):
    assert parse_config(dump_config(small_cfg)) == small_cfg
    assert parse_config(dump_config(ExperimentConfig())) == ExperimentConfig()


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


# sampling ---------------------------------------------------------------------


def test_sample_exhaustion_returns_all_sorted():
    assert sample_clients(make_rng(0), [5, 3, 9], 10) == [3, 5, 9]


def test_sample_is_seeded():
    a = sample_clients(make_rng(3, "s"), range(100), 10)
    assert a == sample_clients(make_rng(3, "s"), range(100), 10)
    assert a == sorted(a) and len(set(a)) == 10


def test_sample_frequencies():
    rng = make_rng(11)
    counts = np.zeros(100)
    draws = 10_000
    for _ in range(draws):
        counts[sample_clients(rng, range(100), 10)] += 1
    freq = counts / draws
    sigma = np.sqrt(0.1 * 0.9 / draws)
    assert np.all(np.abs(freq - 0.1) <= 3 * sigma * 1.35)  # 3 sigma, Bonferroni-softened over 100 clients
    assert np.mean(np.abs(freq - 0.1) <= 3 * sigma) >= 0.97


def test_sample_needs_someone():
    with pytest.raises(ConfigError):
        sample_clients(make_rng(0), [], 3)


# round loop -------------------------------------------------------------------


def test_records_are_well_formed(small_run, small_cfg):
    assert len(small_run.records) == small_cfg.rounds
    for r in small_run.records:
        assert 0.0 <= r.accuracy <= 1.0
        assert len(r.clients) == small_cfg.clients_per_round and 0 in r.clients
        assert abs(sum(r.delta_w)) <= 1e-12
        assert sum(r.weights) == pytest.approx(1.0)
        assert all(a > 0 for a in r.alphas)


def test_attacker_claims_three_times(small_run):
    for r in small_run.records:
        i = r.clients.index(0)
        assert r.claimed[i] == 3 * r.true[i]
        assert r.delta_w[i] > 0


def test_feddua_off_accepts_everything(small_cfg):
    res = run_experiment(replace(small_cfg, feddua=False, rounds=2))
    assert res.ledger_lines == [] and res.prior is None
    assert all(v == "ACCEPT" for r in res.records for v in r.verdicts)


def test_honest_baseline_pair_matches_when_nothing_is_flagged(small_cfg):
    base = replace(small_cfg, attackers=(), rounds=3)
    on = run_experiment(replace(base, tau=1e9, band_check=False))
    off = run_experiment(replace(base, feddua=False))
    assert [r.accuracy for r in on.records] == [r.accuracy for r in off.records]


def test_excluded_clients_are_never_sampled_again(small_cfg):
    # a two-flag threshold and a misreport so large the attacker is flagged every round
    cfg = replace(small_cfg, rounds=6, w_exclude=2, misreport_factor=10.0)
    res = run_experiment(cfg)
    first = next(r.round for r in res.records if r.num_excluded)
    assert all(0 not in r.clients for r in res.records if r.round > first)
    sampled = {(r.round, c) for r in res.records for c in r.clients}
    logged = {(int(l.split("\t")[0]), int(l.split("\t")[1])) for l in res.ledger_lines}
    assert sampled == logged


def test_prior_file_is_reused(tmp_path, small_cfg, small_run):
    p = tmp_path / "prior.json"
    small_run.prior.save(p)
    again = run_experiment(replace(small_cfg, prior=str(p)))
    assert [r.accuracy for r in again.records] == [r.accuracy for r in small_run.records]


# outputs ----------------------------------------------------------------------


def test_empty_run_writes_headers_only(tmp_path, small_cfg):
    paths = emit_outputs(ExperimentResult(small_cfg, []), tmp_path)
    assert paths["metrics.csv"].read_text() == ",".join(METRICS_HEADER) + "\n"
    assert paths["verdicts.log"].read_text() == ""
    assert paths["accuracy_curve.tsv"].read_text() == "round\taccuracy\n"
    assert read_metrics(paths["metrics.csv"]) == []


def test_metrics_round_trip(tmp_path, small_run):
    paths = emit_outputs(small_run, tmp_path)
    rows = read_metrics(paths["metrics.csv"])
    assert len(rows) == len(small_run.records)
    for row, rec in zip(rows, small_run.records):
        assert row["accuracy"] == pytest.approx(rec.accuracy, abs=1e-9)
        assert row["clients"] == rec.clients and row["claimed"] == rec.claimed and row["true"] == rec.true
        assert row["estimated"] == rec.estimated and row["verdicts"] == rec.verdicts
        np.testing.assert_allclose(row["alpha"], rec.alphas, rtol=0, atol=1e-9)
        np.testing.assert_allclose(row["delta_w"], rec.delta_w, rtol=0, atol=1e-9)
        np.testing.assert_allclose(row["weights"], rec.weights, rtol=0, atol=1e-9)
        assert row["num_flagged"] == rec.num_flagged
    assert check_ledger(paths["verdicts.log"]) == []
    curve = paths["accuracy_curve.tsv"].read_text().splitlines()
    assert len(curve) == len(small_run.records) + 1


def test_final_accuracy_window():
    class R:
        def __init__(self, a):
            self.accuracy = a

    assert final_accuracy([R(a) for a in (0.0, 0.0, 1.0, 1.0)], window=2) == 1.0
    assert np.isnan(final_accuracy([]))


# CLI ----------------------------------------------------------------------------


def write_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def test_cli_threads_do_not_change_metrics(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--threads", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--threads", "8", "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "verdicts.log", "accuracy_curve.tsv", "config.resolved"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_config_echo_replays_the_run(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--set", "rounds=2", "--out", str(tmp_path / "a")]) == 0
    echo = tmp_path / "a" / "config.resolved"
    assert main(["run", "--config", str(echo), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_cli_calibrate_then_run_with_prior(tmp_path):
    cfg = write_cfg(tmp_path)
    prior = tmp_path / "prior.json"
    assert main(["calibrate", "--config", str(cfg), "--out", str(prior)]) == 0
    assert main(["run", "--config", str(cfg), "--set", f"prior={prior}", "--out", str(tmp_path / "p")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 0
    assert (tmp_path / "p" / "metrics.csv").read_bytes() == (tmp_path / "q" / "metrics.csv").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg), "--set", "eta=-1"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["run", "--config", str(cfg), "--set", f"dataset={tmp_path / 'no.csv'}"]) == 1
    bad = tmp_path / "bad.log"
    bad.write_text("not a ledger line\n")
    assert main(["verify-logs", "--ledger", str(bad)]) == 1
    good = tmp_path / "good.log"
    good.write_text("0\t1\tACCEPT\tNONE\t10\t10\tHONEST\n")
    assert main(["verify-logs", "--ledger", str(good)]) == 0
    assert "configuration error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "feddua", "run", "--set", "rounds=0"], capture_output=True, text=True)
    assert out.returncode == 2
    assert "rounds must be >= 1" in out.stderr


def test_csv_dataset_runs(tmp_path):
    from feddua.datagen import make_blobs, write_csv

    path = tmp_path / "data.csv"
    write_csv(make_blobs(4, 6, 150, 0.5, make_rng(1)), path)
    cfg = parse_config(SMALL, [f"dataset={path}", "rounds=2", "feddua=false"])
    res = run_experiment(cfg)
    assert len(res.records) == 2

import math

import numpy as np
import pytest

from seqmh import bench
from seqmh.bench import (
    ChainEstimates,
    GroundTruth,
    RunConfig,
    collect_design_samples,
    estimate_risk,
    histogram_l1,
    integrated_autocorr_time,
    lasso_mode,
    lasso_truth,
    load_config,
    logistic_truth,
    read_truth,
    regenerate_truth,
    worker_count,
    write_truth,
)
from seqmh.cli import main
from seqmh.design import synthetic_moment_samples, write_samples
from seqmh.errors import InvalidArgument
from seqmh.models import synth_lasso_dataset, synth_logistic_data, LogisticRegressionModel
from seqmh.samplers import read_trace


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def logistic_cfg(tmp_path, out="out", extra=""):
    return write_cfg(tmp_path, f"""
kind=random-walk-logistic
seed=3
chains=2
output_dir={tmp_path / out}
N=300
D=3
n_test=20
epsilons=0,0.1
batch_size=30
eval_budget=30000
trace_every=1
truth_steps=2000
time_points=5
{extra}
""", name=f"{out}.cfg")


# config

def test_config_roundtrip():
    cfg = RunConfig.from_text("kind=analysis\nseed=4\nmu_std=0,0.5,2\nepsilon=0.05  # comment\nflag=true\n")
    assert cfg.seed == 4 and cfg.get_list("mu_std", []) == [0, 0.5, 2]
    assert cfg.get("flag") is True
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_errors(tmp_path):
    with pytest.raises(InvalidArgument):
        RunConfig.from_text("kind=bogus\n")
    with pytest.raises(InvalidArgument):
        RunConfig.from_text("seed=1\n")
    with pytest.raises(InvalidArgument):
        RunConfig.from_text("kind=analysis\nnot a pair\n")
    with pytest.raises(InvalidArgument):
        load_config(write_cfg(tmp_path, "kind=design\nsamples_path=missing.csv\n"))


def test_worker_env(monkeypatch):
    monkeypatch.setenv(bench.WORKERS_ENV, "3")
    assert worker_count() == 3
    monkeypatch.setenv(bench.WORKERS_ENV, "x")
    with pytest.raises(InvalidArgument):
        worker_count()
    monkeypatch.delenv(bench.WORKERS_ENV)
    assert worker_count(2) == 2


# risk

def test_frozen_chains_have_zero_risk():
    truth = np.array([0.3, 0.7])
    chains = [ChainEstimates(np.arange(1, 101, dtype=float), np.tile(truth, (100, 1))) for _ in range(3)]
    rep = estimate_risk(chains, truth, [10, 50, 100])
    assert np.all(rep.risk == 0.0)


def test_risk_decomposition_and_decay():
    rng = np.random.default_rng(0)
    T, C = 20000, 200
    chains = [ChainEstimates(np.arange(1, T + 1, dtype=float), rng.normal(1.0, 2.0, (T, 1))) for _ in range(C)]
    grid = [1000, 4000, 16000]
    rep = estimate_risk(chains, np.array([1.0]), grid, burn_in=0.1)
    assert np.allclose(rep.risk, rep.bias_sq + rep.variance, rtol=1e-12, atol=0)
    kept = 0.9 * np.array(grid)
    expected = 4.0 / kept
    assert np.all(np.abs(rep.risk / expected - 1) < 0.35)
    # quadrupling T divides the risk by about four
    assert 2.5 < rep.risk[0] / rep.risk[1] < 6.5


def test_risk_needs_overlap():
    a = ChainEstimates(np.array([1.0, 2.0]), np.ones((2, 1)))
    b = ChainEstimates(np.array([5.0, 6.0]), np.ones((2, 1)))
    with pytest.raises(InvalidArgument):
        estimate_risk([a, b], np.array([1.0]), [1.5, 5.5])


def test_autocorrelation_time():
    rng = np.random.default_rng(1)
    assert integrated_autocorr_time(rng.normal(size=50000)) == pytest.approx(1.0, abs=0.15)
    phi = 0.9
    x = np.empty(200000)
    x[0] = 0
    e = rng.normal(size=x.size)
    for t in range(1, x.size):
        x[t] = phi * x[t - 1] + e[t]
    assert integrated_autocorr_time(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.15)


# ground truth

def test_lasso_truth_and_histogram(tmp_path):
    model = synth_lasso_dataset(1)
    truth = lasso_truth(model)
    assert truth.values.sum() == pytest.approx(1.0, abs=1e-3)
    assert truth.provenance["lo"] < lasso_mode(model) < truth.provenance["hi"]
    # samples from the quadrature CDF itself land close to the truth
    rng = np.random.default_rng(2)
    edges = np.linspace(truth.provenance["lo"], truth.provenance["hi"], truth.provenance["bins"] + 1)
    idx = rng.choice(truth.values.size, 200000, p=truth.values / truth.values.sum())
    x = rng.uniform(edges[idx], edges[idx + 1])
    assert histogram_l1(x, truth) < 0.05
    assert histogram_l1(np.full(100, 10.0), truth) == pytest.approx(2.0, abs=1e-3)
    p = tmp_path / "truth.txt"
    write_truth(p, truth)
    back = read_truth(p)
    assert np.array_equal(back.values, truth.values)
    regen = regenerate_truth(back, model)
    assert regen.to_text() == truth.to_text()


def test_logistic_truth_regenerates():
    X, y, Xt, _, _ = synth_logistic_data(200, 3, 0, n_test=5)
    model = LogisticRegressionModel(X, y)
    t = logistic_truth(model, Xt, 500, 4)
    again = regenerate_truth(GroundTruth.from_text(t.to_text()), model, Xt)
    assert again.to_text() == t.to_text()
    assert 0.3 < t.provenance["acceptance"] <= 1.0


# design samples

def test_collect_design_samples():
    X, y, _, _, _ = synth_logistic_data(300, 3, 0)
    model = LogisticRegressionModel(X, y)
    params = np.random.default_rng(0).normal(0, 0.1, (500, 3))
    s = collect_design_samples(params, model, 0.01, seed=1, max_samples=100)
    assert len(s) == 100
    assert collect_design_samples(params, model, 0.0, seed=1) == []
    # mu equals the monolithic difference over N
    rng = np.random.default_rng(1)
    theta = params[0]
    prop = theta + 0.01 * rng.standard_normal(3)
    mono = (model.log_likelihood(prop) - model.log_likelihood(theta)) / model.N
    assert s[0].mu == pytest.approx(mono, rel=1e-10)


# end-to-end runs

def test_run_is_deterministic_and_resumable(tmp_path):
    a = bench.run(load_config(logistic_cfg(tmp_path, "a")))
    b = bench.run(load_config(logistic_cfg(tmp_path, "b")))
    assert (a / "risk.tsv").read_bytes() == (b / "risk.tsv").read_bytes()
    assert (a / "truth.txt").read_bytes() == (b / "truth.txt").read_bytes()
    trace = sorted(a.glob("chain_*.csv"))[0]
    before = trace.stat().st_mtime_ns
    bench.run(load_config(logistic_cfg(tmp_path, "a")))
    assert trace.stat().st_mtime_ns == before
    assert (a / "risk.tsv").read_bytes() == (b / "risk.tsv").read_bytes()


def test_usage_ledger_matches_traces(tmp_path):
    out = bench.run(load_config(logistic_cfg(tmp_path, "c")))
    ledger = {l.split()[1]: int(l.split("total_evals=")[1])
              for l in (out / "risk.tsv").read_text().splitlines() if l.startswith("# eps=")}
    for label, eps in [("eps=0.0", "0.0"), ("eps=0.1", "0.1")]:
        total = sum(sum(read_trace(p).n_used) for p in out.glob(f"chain_eps{eps}_*.csv"))
        assert ledger[label] == total


def test_risk_command_reproduces_report(tmp_path, capsys):
    out = bench.run(load_config(logistic_cfg(tmp_path, "d")))
    capsys.readouterr()
    assert main(["risk", str(out), str(out / "truth.txt")]) == 0
    assert capsys.readouterr().out == (out / "risk.tsv").read_text()


def test_sgld_first_stage_histogram(tmp_path):
    cfg = write_cfg(tmp_path, f"""
kind=sgld-lasso
seed=1
chains=2
output_dir={tmp_path / 'sgld'}
epsilons=0.5
iterations=500
""")
    out = bench.run(load_config(cfg))
    rows = (out / "stages.tsv").read_text().splitlines()[1:]
    assert rows == ["eps=0.5\t1\t1000"]
    assert (out / "histogram_l1.tsv").exists()


def test_time_budget_flags_partial(tmp_path):
    cfg = write_cfg(tmp_path, f"""
kind=sgld-lasso
seed=1
chains=1
output_dir={tmp_path / 'tb'}
epsilons=0.1
iterations=100000000
time_budget_s=0.2
""")
    out = bench.run(load_config(cfg))
    summary = next(out.glob("*.summary")).read_text()
    assert "partial=1" in summary


def test_rjmcmc_and_gibbs_kinds(tmp_path):
    rj = write_cfg(tmp_path, f"kind=rjmcmc\nseed=0\nchains=1\noutput_dir={tmp_path / 'rj'}\nlam=1.0\niterations=300\n",
                   "rj.cfg")
    out = bench.run(load_config(rj))
    head = (out / "inclusion.tsv").read_text().splitlines()
    assert head[0].startswith("label\tchain\tincl_0") and len(head) == 2
    gb = write_cfg(tmp_path, f"kind=gibbs-mrf\nseed=0\noutput_dir={tmp_path / 'gb'}\nD=6\nsweeps=200\n"
                   "epsilons=0,0.1\nbatch_size=3\ntime_points=2\n", "gb.cfg")
    table = (bench.run(load_config(gb)) / "gibbs.tsv").read_text().splitlines()
    assert table[0] == "# truth=enumeration" and len(table) == 2 + 4


# CLI

def test_cli_analyze(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "kind=analysis\nseed=1\nmu_std=0,2\npi1=0.1\nepsilon=0.05\ntrials=2000\n")
    assert main(["analyze", str(cfg)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "mu_std\tE_dp\tE_mc\tse\tusage_dp\tusage_mc"
    assert len(lines) == 3


def test_cli_design_and_exit_codes(tmp_path, capsys):
    samples = tmp_path / "s.csv"
    write_samples(samples, synthetic_moment_samples(10, 0))
    assert main(["design", str(samples), "--budget", "0.1"]) == 0
    out = capsys.readouterr().out
    assert "pi1=" in out and "predicted_usage=" in out
    assert main(["design", str(samples), "--budget", "0.0"]) == 3
    assert "infeasible" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("seqmh: error:") and "missing.cfg" in err
    with pytest.raises(SystemExit) as info:
        main(["design", str(samples)])
    assert info.value.code == 2

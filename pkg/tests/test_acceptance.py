"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line to the terminal (also under
output capture) before asserting. Several of these run for many minutes.
"""
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize, special, stats

from seqmh import bench
from seqmh.bench import histogram_l1, lasso_mode, lasso_truth, logistic_map
from seqmh.design import average_design, synthetic_moment_samples, worst_case_design
from seqmh.gibbs import (
    EnumeratedTruth,
    approx_conditional_exact,
    conditional_table,
    counts_subset_l1_error,
    dense_mrf,
    dobrushin_coefficient,
    draw_subsets,
    enumerate_joint,
    exact_gibbs_sweeps,
    gibbs_ratio_population,
    stationary,
    sweep_kernel,
    total_variation,
)
from seqmh.models import VarSelModel, synth_lasso_dataset, synth_logistic_dataset, synth_varsel_data
from seqmh.rwalk import (
    RandomWalkParams,
    StageDesign,
    delta_acceptance,
    dp_error_and_usage,
    profile_table,
    simulate_acceptance,
    simulate_sequential_tests,
    usage_variance,
)
from seqmh.samplers import ChainConfig, run_rjmcmc, run_sgld
from seqmh.seqtest import (
    LogLikDiffPopulation,
    SequentialTestSpec,
    compute_mu0,
    exact_mh_test,
    sequential_mh_test,
    sequential_mh_test_many,
)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail, t0):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail} [{time.time() - t0:.0f}s]", flush=True)
    return emit


# sequential test and random-walk analysis

def _population(rng):
    N = int(rng.integers(2, 201))
    kind = rng.integers(3)
    if kind == 0:
        vals = rng.normal(rng.normal(), rng.uniform(0.01, 3.0), N)
    elif kind == 1:
        vals = rng.standard_t(2.0, N) * rng.uniform(0.01, 1.0)
    else:
        vals = rng.integers(-2, 3, N).astype(float)
    return vals


def test_exhaustion_matches_exact(report):
    t0 = time.time()
    rng = np.random.default_rng(20240)
    agree = full = 0
    for _ in range(1000):
        vals = _population(rng)
        N = vals.size
        u = 1.0 - rng.random()
        # put the threshold within a few log-units of the full-data statistic
        lpr = N * math.fsum(vals) / N + rng.normal(0.0, 2.0)
        mu0 = compute_mu0(u, lpr, rng.normal(0.0, 0.5), N)
        pop = LogLikDiffPopulation.from_values(vals)
        spec = SequentialTestSpec(int(rng.integers(1, N + 1)), 1e-300)
        d = sequential_mh_test(pop, mu0, spec, rng)
        agree += d.accept == exact_mh_test(pop, mu0)
        full += d.n_used == N
    ok = agree == 1000
    report("exactness at exhaustion", ok, f"{agree}/1000 decisions agree, {full} consumed all data", t0)
    assert ok


MC_GRID = list(itertools.product([0.05, 0.1], [0.01, 0.05]))


def test_dp_matches_monte_carlo(report):
    t0 = time.time()
    trials = 100_000
    worst = 0.0
    bad = []
    for k, ((pi1, eps), mu) in enumerate(itertools.product(MC_GRID, [0, 0.5, 1, 2, 3, 5, 8])):
        d = StageDesign.uniform(pi1, eps)
        p = dp_error_and_usage(RandomWalkParams(float(mu), d))
        emp = simulate_sequential_tests(float(mu), d, trials, np.random.default_rng([7, k]))
        se_e = math.sqrt(p.error * (1 - p.error) / trials)
        se_u = math.sqrt(usage_variance(p, d) / trials)
        z_e = abs(emp.error - p.error) / se_e if se_e > 0 else (0.0 if emp.error == p.error else math.inf)
        z_u = abs(emp.expected_usage - p.expected_usage) / se_u if se_u > 0 else (
            0.0 if emp.expected_usage == p.expected_usage else math.inf)
        worst = max(worst, z_e, z_u)
        if z_e > 3 or z_u > 3:
            bad.append((pi1, eps, mu, round(z_e, 2), round(z_u, 2)))
    ok = not bad
    report("DP vs Monte-Carlo", ok, f"28 settings, max deviation {worst:.2f} SE, outside 3 SE: {bad}", t0)
    assert ok


def test_worst_case_identity_on_grid(report):
    t0 = time.time()
    gap = 0.0
    for pi1, eps in MC_GRID:
        p = dp_error_and_usage(RandomWalkParams(0.0, StageDesign.uniform(pi1, eps)))
        gap = max(gap, abs(p.error - (1 - p.stop_mass[-1]) / 2))
    ok = gap <= 1e-6
    report("worst-case identity", ok, f"max |E - (1 - P(J))/2| = {gap:.2e}", t0)
    assert ok


def _logistic_triples(count, seed, N=12214, D=50, sigma_rw=0.01):
    """(mu, sigma_l, N, log prior ratio) of random-walk proposals around the posterior with P_a in [0.3, 0.7]."""
    model = synth_logistic_dataset(N, D, 0)
    mode, cov = logistic_map(model)
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        theta = mode + L @ rng.standard_normal(D)
        prop = theta + sigma_rw * rng.standard_normal(D)
        vals = model.population(theta, prop).all_values()
        offset = model.log_prior(theta) - model.log_prior(prop)
        p_a = min(1.0, math.exp(math.fsum(vals) - offset))
        if 0.3 <= p_a <= 0.7:
            out.append((math.fsum(vals) / N, float(np.std(vals)), N, offset))
    return out


def test_errors_cancel_over_u(report):
    t0 = time.time()
    triples = _logistic_triples(50, 0)
    design = StageDesign.uniform(500 / 12214, 0.05)
    table = profile_table(design)
    res = [delta_acceptance(mu, s, N, design, log_ratio_offset=o, table=table) for mu, s, N, o in triples]
    bounded = sum(abs(r.delta) <= r.abs_error_expectation for r in res)
    halved = sum(abs(r.delta) <= 0.5 * r.abs_error_expectation for r in res)
    zs = []
    for k, ((mu, s, N, o), r) in enumerate(zip(triples[:10], res)):
        p, se = simulate_acceptance(mu, s, N, design, 10 ** 6, np.random.default_rng([11, k]), log_ratio_offset=o)
        zs.append(abs(p - r.p_a_approx) / se)
    ok = bounded == 50 and halved >= 40 and max(zs) <= 3
    ratio = np.median([abs(r.delta) / r.abs_error_expectation for r in res])
    report("error cancellation", ok,
           f"|D|<=E|E| {bounded}/50, |D|<=0.5E|E| {halved}/50 (median ratio {ratio:.3f}), "
           f"simulation max {max(zs):.2f} SE", t0)
    assert ok


# samplers

RISK_CONFIG = """kind=random-walk-logistic
seed={rep}
chains=5
output_dir={out}
N=12214
D=50
n_test=500
data_seed=0
scale_decay=1.0
epsilons=0,0.01,0.05,0.1
batch_size=500
eval_budget=20000000
trace_every=1
truth_steps=50000
time_points=10
"""


def _final_risks(path: Path) -> dict:
    last = {}
    for line in path.read_text().splitlines()[1:]:
        if line.startswith("#"):
            continue
        label, _, risk, _, _ = line.split("\t")
        last[float(label[4:])] = float(risk)
    return last


def test_risk_crossover(report, tmp_path):
    t0 = time.time()
    wins = []
    rows = []
    for rep in range(5):
        cfg = bench.RunConfig.from_text(RISK_CONFIG.format(rep=rep, out=tmp_path / f"rep{rep}"))
        risks = _final_risks(bench.run(cfg) / "risk.tsv")
        exact = risks.pop(0.0)
        wins.append(min(risks.values()) < exact)
        rows.append(f"{exact:.3g} vs " + "/".join(f"{risks[e]:.3g}" for e in sorted(risks)))
    ok = sum(wins) >= 4
    report("risk crossover", ok, f"{sum(wins)}/5 replications with some eps > 0 below eps = 0; "
           + "; ".join(rows), t0)
    assert ok


def test_sgld_correction(report):
    t0 = time.time()
    model = synth_lasso_dataset(0)
    truth = lasso_truth(model)
    init = lasso_mode(model)
    stages_ok = True
    wins = []
    detail = []
    for seed in range(5):
        l1 = {}
        for corrected in (True, False):
            cfg = ChainConfig(test=SequentialTestSpec(500, 0.5), iterations=10 ** 6, seed=seed, trace_every=1,
                              step_size=5e-6, sgld_batch=500, corrected=corrected)
            _, trace = run_sgld(model, cfg, init)
            if corrected:
                stages_ok &= set(trace.stage_counts) == {1} and trace.stage_counts[1] == 10 ** 6
            l1[corrected] = histogram_l1(trace.param_array()[:, 0], truth)
        wins.append(l1[True] < 0.5 * l1[False])
        detail.append(f"{l1[True]:.3f}/{l1[False]:.3f}")
    ok = stages_ok and sum(wins) >= 4
    report("SGLD correction", ok, f"one stage every step: {stages_ok}; corrected/uncorrected L1 "
           + " ".join(detail), t0)
    assert ok


def _mask_log_evidence(model, mask, draws, rng, df=4.0):
    """log of the integral over the included coefficients, by importance sampling with a Laplace-t proposal."""
    idx = np.flatnonzero(mask)
    k = idx.size
    X, s = model.features[:, idx], 2.0 * model.labels - 1.0

    def neg_log_post(b):
        return -(float(np.sum(-np.logaddexp(0.0, -s * (X @ b)))) + model.log_prior_k(k, float(np.abs(b).sum())))

    mode = optimize.minimize(neg_log_post, np.full(k, 0.1), method="Nelder-Mead",
                             options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 20000}).x
    p = special.expit(X @ mode)
    cov = 1.5 * np.linalg.inv((X * (p * (1 - p))[:, None]).T @ X + 1e-6 * np.eye(k))
    z = rng.standard_normal((draws, k)) / np.sqrt(rng.chisquare(df, draws) / df)[:, None]
    B = mode + z @ np.linalg.cholesky(cov).T
    lik = -np.logaddexp(0.0, -s[None, :] * (B @ X.T)).sum(axis=1)
    prior = np.array([model.log_prior_k(k, v) for v in np.abs(B).sum(axis=1)])
    w = lik + prior - stats.multivariate_t(mode, cov, df).logpdf(B)
    return special.logsumexp(w) - math.log(draws)


def test_rjmcmc_matches_enumeration(report):
    t0 = time.time()
    X, y = synth_varsel_data(200, 5, 0)
    model = VarSelModel(X, y, lam=1.0, nu_shape=1.0, nu_scale=1.0)
    rng = np.random.default_rng(0)
    masks = [np.array(m, dtype=bool) for m in itertools.product([0, 1], repeat=5) if any(m)]
    logev = np.array([_mask_log_evidence(model, m, 100_000, rng) for m in masks])
    w = np.exp(logev - logev.max())
    w /= w.sum()
    truth = w @ np.array(masks, dtype=float)
    cfg = ChainConfig(test=None, iterations=10 ** 6, seed=1, trace_every=1)
    _, trace = run_rjmcmc(model, cfg)
    incl = trace.param_array()[100_000:, 5:].mean(axis=0)
    err = float(np.abs(incl - truth).max())
    ok = err <= 0.05
    report("RJMCMC enumeration oracle", ok, f"max inclusion error {err:.4f}; chain {np.round(incl, 3)} "
           f"enumeration {np.round(truth, 3)}", t0)
    assert ok


# Gibbs

def test_gibbs_conditional_accuracy(report):
    t0 = time.time()
    D = 100
    model = dense_mrf(D, 0, log_var=0.02)
    spec = SequentialTestSpec(500, 0.01)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        x = rng.integers(0, 2, D)
        i = int(rng.integers(D))
        vals = gibbs_ratio_population(model, i, x).all_values()
        u = rng.random(10_000)
        u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
        acc, _ = sequential_mh_test_many(vals, (np.log(u) - np.log1p(-u)) / vals.size, spec, rng)
        worst = max(worst, abs(acc.mean() - model.conditional(i, x)))
    ok = worst <= 0.015
    report("Gibbs conditional accuracy", ok, f"max |empirical - exact| over 500 probes = {worst:.4f}", t0)
    assert ok


def test_gibbs_enumeration_oracle(report):
    t0 = time.time()
    m = dense_mrf(8, 0)
    truth = EnumeratedTruth(enumerate_joint(m), 8)
    subsets = draw_subsets(8, 1600, np.random.default_rng(0))
    err = counts_subset_l1_error(exact_gibbs_sweeps(conditional_table(m), 10 ** 6, 1), 8, truth, subsets)
    ok = err <= 0.02
    report("Gibbs enumeration oracle", ok, f"subset-L1 error {err:.4f}", t0)
    assert ok


def test_gibbs_stationary_bound(report):
    t0 = time.time()
    violations = []
    tightest = 0.0
    for seed in range(3):
        m = dense_mrf(4, seed, log_var=1.0)
        P0 = conditional_table(m)
        K0 = sweep_kernel(P0)
        eta = dobrushin_coefficient(K0)
        for eps in (0.05, 0.1, 0.2, 0.3, 0.5):
            spec = SequentialTestSpec(1, eps)
            Pe = conditional_table(
                m, lambda i, x: approx_conditional_exact(gibbs_ratio_population(m, i, x).all_values(), spec))
            dv = total_variation(stationary(K0), stationary(sweep_kernel(Pe)))
            bound = np.abs(Pe - P0).max() / (1 - eta)
            tightest = max(tightest, dv / bound)
            if dv > bound:
                violations.append((seed, eps, dv, bound))
    ok = not violations
    report("Gibbs stationary-distribution bound", ok,
           f"15 cases, largest d_v / bound = {tightest:.3f}, violations {violations}", t0)
    assert ok


# design

def test_worst_case_design_dominates(report):
    t0 = time.time()
    samples = synthetic_moment_samples(40, 0)
    train, test = samples[:20], samples[20:]
    rows = []
    ok = True
    for budget in (0.01, 0.05, 0.1):
        avg = average_design(train, budget)
        wc = worst_case_design(budget)
        e_avg, u_avg = avg.evaluate(test)
        e_wc, u_wc = wc.evaluate(test)
        ok &= e_wc <= e_avg and u_wc >= u_avg
        rows.append(f"D*={budget}: |D| {e_wc:.2e}<={e_avg:.2e}, usage {u_wc:.3f}>={u_avg:.3f}")
    report("worst-case design dominance", ok, "; ".join(rows), t0)
    assert ok

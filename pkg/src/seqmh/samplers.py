"""Markov chain drivers that pair proposals with the sequential test.

Every chain owns two random streams spawned from its seed: ``rng`` for
proposals and uniform draws, ``test_rng`` for the mini-batch permutations of
the sequential test. An exact chain and an approximate chain with the same seed
therefore see the same proposals and the same ``u`` at every step.
"""
from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .models import (
    SIGMA_BIRTH,
    SIGMA_UPDATE,
    Lasso1DModel,
    LogisticRegressionModel,
    VarSelModel,
    VarSelState,
    legal_moves,
    varsel_mu0,
)
from .seqtest import (
    LazyPermutation,
    LogLikDiffPopulation,
    SequentialTestSpec,
    compute_mu0,
    exact_mh_test,
    sequential_mh_test,
)


@dataclass
class ChainConfig:
    """Proposal scales, test settings and run length for one chain.

    ``test = None`` selects the exact MH test. ``eval_budget``, when set, stops
    the chain after the first step whose cumulative likelihood evaluations
    reach it; ``time_budget_s`` likewise stops after the first step whose
    elapsed wall-clock time exceeds it and flags the trace as partial.
    """

    test: SequentialTestSpec | None = None
    iterations: int = 1000
    seed: int = 0
    trace_every: int = 10
    eval_budget: int | None = None
    time_budget_s: float | None = None
    sigma_rw: float = 0.01
    step_size: float = 5e-6
    sgld_batch: int = 500
    corrected: bool = True
    sigma_update: float = SIGMA_UPDATE
    sigma_birth: float = SIGMA_BIRTH
    init_beta: float = 0.1

    def __post_init__(self):
        for name in ("sigma_rw", "step_size", "sigma_update", "sigma_birth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.trace_every < 1 or self.iterations < 0 or self.sgld_batch < 1:
            raise ValueError("trace_every and sgld_batch must be >= 1, iterations >= 0")

    def rngs(self):
        a, b = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(a), np.random.default_rng(b)


@dataclass
class StepRecord:
    accept: bool
    n_used: int
    stages: int


@dataclass
class ChainTrace:
    """Recorded steps of one chain plus whole-run counters.

    ``params`` rows, ``steps``, ``accept``, ``n_used``, ``cum_evals`` and
    ``elapsed_ns`` are kept every ``trace_every`` steps; ``stage_counts``,
    ``accepted``, ``total_evals`` and ``steps_run`` cover every step.
    """

    steps: list = field(default_factory=list)
    params: list = field(default_factory=list)
    accept: list = field(default_factory=list)
    n_used: list = field(default_factory=list)
    cum_evals: list = field(default_factory=list)
    elapsed_ns: list = field(default_factory=list)
    stage_counts: Counter = field(default_factory=Counter)
    accepted: int = 0
    total_evals: int = 0
    steps_run: int = 0
    partial: bool = False

    def record(self, step, params, rec: StepRecord, elapsed_ns):
        self.steps.append(step)
        self.params.append(np.array(params, dtype=float).ravel())
        self.accept.append(bool(rec.accept))
        self.n_used.append(int(rec.n_used))
        self.cum_evals.append(int(self.total_evals))
        self.elapsed_ns.append(int(elapsed_ns))

    def param_array(self) -> np.ndarray:
        return np.vstack(self.params) if self.params else np.empty((0, 0))

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps_run if self.steps_run else float("nan")


def mh_decide(pop: LogLikDiffPopulation, mu0: float, test: SequentialTestSpec | None,
              test_rng: np.random.Generator) -> StepRecord:
    if test is None:
        return StepRecord(exact_mh_test(pop, mu0), pop.size, 1)
    d = sequential_mh_test(pop, mu0, test, test_rng)
    return StepRecord(d.accept, d.n_used, d.stages)


def _uniform(rng) -> float:
    # in (0, 1]
    return 1.0 - rng.random()


def random_walk_step(theta, model, config: ChainConfig, rng, test_rng):
    """Gaussian random-walk proposal decided by the (sequential) MH test.

    ``model`` needs ``N``, ``log_prior`` and ``population(theta, theta')``.
    """
    theta = np.asarray(theta, dtype=float)
    prop = theta + config.sigma_rw * rng.standard_normal(theta.shape)
    u = _uniform(rng)
    lpr = float(np.sum(model.log_prior(theta)) - np.sum(model.log_prior(prop)))
    mu0 = compute_mu0(u, lpr, 0.0, model.N)
    pop = model.population(theta, prop)
    rec = mh_decide(pop, mu0, config.test, test_rng)
    return (prop if rec.accept else theta), rec


def _log_normal(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * math.log(2 * math.pi * var)


def sgld_drift(theta: float, model: Lasso1DModel, idx: np.ndarray, step_size: float) -> float:
    n = idx.size
    g = model.N / n * float(model.grad_loglik_terms(theta, idx).sum()) + float(model.grad_log_prior(theta))
    return theta + 0.5 * step_size * g


def sgld_propose(theta: float, model: Lasso1DModel, minibatch: np.ndarray, step_size: float, rng):
    """Langevin proposal from a mini-batch gradient.

    Returns ``(theta', log q(theta'|theta, X_n), log q(theta|theta', X_n))``.
    The proposal variance equals ``step_size``.
    """
    if len(minibatch) == 0:
        raise ValueError("minibatch must be nonempty")
    mean_fwd = sgld_drift(theta, model, minibatch, step_size)
    prop = mean_fwd + math.sqrt(step_size) * rng.standard_normal()
    if step_size == 0:
        return prop, 0.0, 0.0
    mean_rev = sgld_drift(prop, model, minibatch, step_size)
    return prop, _log_normal(prop, mean_fwd, step_size), _log_normal(theta, mean_rev, step_size)


def sgld_corrected_step(theta: float, model: Lasso1DModel, config: ChainConfig, rng, test_rng):
    """SGLD proposal on a fresh mini-batch, then the MH correction.

    With ``config.corrected = False`` the proposal is always accepted and no
    likelihood evaluations are charged to the test.
    """
    n = min(config.sgld_batch, model.N)
    batch = LazyPermutation(model.N, rng).take(n)
    prop, log_fwd, log_rev = sgld_propose(theta, model, batch, config.step_size, rng)
    if not config.corrected:
        return prop, StepRecord(True, 0, 0)
    u = _uniform(rng)
    log_prior_ratio = float(model.log_prior(theta) - model.log_prior(prop))
    mu0 = compute_mu0(u, log_prior_ratio, log_rev - log_fwd, model.N)
    rec = mh_decide(model.population(theta, prop), mu0, config.test, test_rng)
    return (prop if rec.accept else theta), rec


def propose_varsel(state: VarSelState, config: ChainConfig, rng):
    """Pick a legal move and build the proposed state."""
    k, D = state.k, state.D
    moves = legal_moves(k, D)
    move = moves[rng.integers(len(moves))]
    beta = state.beta.copy()
    gamma = state.gamma.copy()
    if move == "update":
        j = rng.choice(np.flatnonzero(gamma))
        beta[j] += config.sigma_update * rng.standard_normal()
    elif move == "birth":
        j = rng.choice(np.flatnonzero(~gamma))
        gamma[j] = True
        beta[j] = config.sigma_birth * rng.standard_normal()
    else:
        j = rng.choice(np.flatnonzero(gamma))
        gamma[j] = False
        beta[j] = 0.0
    return move, VarSelState(beta, gamma)


def rjmcmc_step(state: VarSelState, model: VarSelModel, config: ChainConfig, rng, test_rng):
    move, proposed = propose_varsel(state, config, rng)
    u = _uniform(rng)
    mu0 = varsel_mu0(move, state, proposed, u, model, config.sigma_birth)
    if math.isinf(mu0) and mu0 > 0:
        return state, StepRecord(False, 0, 0)
    rec = mh_decide(model.population(state, proposed), mu0, config.test, test_rng)
    return (proposed if rec.accept else state), rec


def varsel_initial_state(D: int, config: ChainConfig, index: int = 0) -> VarSelState:
    """Single included variable at ``config.init_beta``."""
    gamma = np.zeros(D, dtype=bool)
    gamma[index] = True
    beta = np.zeros(D)
    beta[index] = config.init_beta
    return VarSelState(beta, gamma)


def _params_of(state):
    if isinstance(state, VarSelState):
        return np.concatenate([state.beta, state.gamma.astype(float)])
    return np.atleast_1d(np.asarray(state, dtype=float))


def run_chain(step_fn, init, model, config: ChainConfig, *, trace: ChainTrace | None = None):
    """Iterate ``step_fn`` from ``init`` and return ``(final_state, trace)``."""
    rng, test_rng = config.rngs()
    trace = trace if trace is not None else ChainTrace()
    state = init
    t0 = time.perf_counter_ns()
    for it in range(config.iterations):
        state, rec = step_fn(state, model, config, rng, test_rng)
        trace.steps_run += 1
        trace.total_evals += rec.n_used
        trace.accepted += int(rec.accept)
        trace.stage_counts[rec.stages] += 1
        if it % config.trace_every == 0 or it == config.iterations - 1:
            trace.record(it, _params_of(state), rec, time.perf_counter_ns() - t0)
        if config.eval_budget is not None and trace.total_evals >= config.eval_budget:
            if trace.steps[-1] != it:
                trace.record(it, _params_of(state), rec, time.perf_counter_ns() - t0)
            break
        if config.time_budget_s is not None and time.perf_counter_ns() - t0 > config.time_budget_s * 1e9:
            if trace.steps[-1] != it:
                trace.record(it, _params_of(state), rec, time.perf_counter_ns() - t0)
            trace.partial = it < config.iterations - 1
            break
    return state, trace


def run_random_walk(model: LogisticRegressionModel, config: ChainConfig, init=None):
    init = np.zeros(model.D) if init is None else np.asarray(init, dtype=float)
    return run_chain(random_walk_step, init, model, config)


def run_sgld(model: Lasso1DModel, config: ChainConfig, init: float = 0.0):
    return run_chain(sgld_corrected_step, float(init), model, config)


def run_rjmcmc(model: VarSelModel, config: ChainConfig, init: VarSelState | None = None):
    init = varsel_initial_state(model.D, config) if init is None else init
    return run_chain(rjmcmc_step, init, model, config)


def write_trace(path, trace: ChainTrace) -> None:
    """Newline-delimited records, 17 significant digits."""
    P = trace.param_array()
    width = P.shape[1] if P.size else 0
    header = ["step"] + [f"p{i}" for i in range(width)] + ["accept", "n_used", "cum_evals", "elapsed_ns"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i, step in enumerate(trace.steps):
            row = [str(step)] + [format(v, ".17g") for v in P[i]]
            row += [str(int(trace.accept[i])), str(trace.n_used[i]), str(trace.cum_evals[i]),
                    str(trace.elapsed_ns[i])]
            fh.write(",".join(row) + "\n")


def read_trace(path) -> ChainTrace:
    trace = ChainTrace()
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n_params = len(header) - 5
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                continue
            trace.steps.append(int(parts[0]))
            trace.params.append(np.array([float(v) for v in parts[1:1 + n_params]]))
            trace.accept.append(parts[1 + n_params] == "1")
            trace.n_used.append(int(parts[2 + n_params]))
            trace.cum_evals.append(int(parts[3 + n_params]))
            trace.elapsed_ns.append(int(parts[4 + n_params]))
    if trace.cum_evals:
        trace.total_evals = trace.cum_evals[-1]
        trace.steps_run = trace.steps[-1] + 1
    return trace

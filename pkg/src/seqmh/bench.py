"""Experiment harness: configs, ground truth, multi-chain runs and risk tables.

A run writes one directory holding the config, per-chain traces with a
summary sidecar each, the ground truth and plain-text report tables. Reports
are computed on the cumulative-likelihood-evaluation axis, so the same config
and seed give byte-identical reports.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from . import gibbs as gb
from .design import MomentSample, average_design, read_samples, worst_case_design, write_samples
from .errors import InvalidArgument
from .models import (
    LogisticRegressionModel,
    VarSelModel,
    VarSelState,
    load_dataset,
    logistic_lldiff_population,
    synth_lasso_dataset,
    synth_logistic_data,
    synth_varsel_data,
)
from .rwalk import RandomWalkParams, StageDesign, dp_error_and_usage, simulate_sequential_tests
from .samplers import ChainConfig, ChainTrace, read_trace, run_random_walk, run_rjmcmc, run_sgld, write_trace
from .seqtest import SequentialTestSpec

log = logging.getLogger(__name__)

KINDS = ("random-walk-logistic", "sgld-lasso", "rjmcmc", "gibbs-mrf", "analysis", "design")
WORKERS_ENV = "SEQMH_WORKERS"


# --- config -------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


@dataclass
class RunConfig:
    """Flat key-value run description.

    Recognized keys besides ``kind``, ``seed``, ``chains`` and ``output_dir``
    live in ``params``; see the README for the per-kind list.
    """

    kind: str
    seed: int = 0
    chains: int = 4
    output_dir: str = "run"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown experiment kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.chains < 1:
            raise InvalidArgument("chains must be >= 1")

    def get(self, key, default=None):
        return self.params.get(key, default)

    def get_list(self, key, default):
        v = self.params.get(key, default)
        return list(v) if isinstance(v, (list, tuple)) else [v]

    def to_text(self) -> str:
        lines = [f"kind={self.kind}", f"seed={self.seed}", f"chains={self.chains}", f"output_dir={self.output_dir}"]
        for k in sorted(self.params):
            v = self.params[k]
            if isinstance(v, list):
                v = ",".join(_fmt(x) for x in v)
            else:
                v = _fmt(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base_dir=None) -> "RunConfig":
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"line {lineno}: expected key=value, got {raw!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = _parse_value(v)
        if "kind" not in kv:
            raise InvalidArgument("config has no kind")
        kind = kv.pop("kind")
        seed = int(kv.pop("seed", 0))
        chains = int(kv.pop("chains", 4))
        out = str(kv.pop("output_dir", "run"))
        cfg = cls(kind, seed, chains, out, kv)
        for k, v in kv.items():
            if k.endswith("_path") and v is not None:
                p = Path(v) if base_dir is None else Path(base_dir) / v
                if not p.exists():
                    raise InvalidArgument(f"{k}: file not found: {p}")
                kv[k] = str(p)
        return cfg


def _fmt(v) -> str:
    # shortest text that round-trips
    return repr(float(v)) if isinstance(v, float) else str(v)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_text(text, base_dir=path.parent)


def worker_count(default: int = 1) -> int:
    v = os.environ.get(WORKERS_ENV)
    if v is None:
        return default
    try:
        n = int(v)
    except ValueError as exc:
        raise InvalidArgument(f"{WORKERS_ENV} must be an integer, got {v!r}") from exc
    return max(1, n)


# --- ground truth -------------------------------------------------------------

@dataclass
class GroundTruth:
    values: np.ndarray
    provenance: dict

    def to_text(self) -> str:
        lines = [f"# {k}={_fmt(v)}" for k, v in sorted(self.provenance.items())]
        lines += [format(float(v), ".17g") for v in np.ravel(self.values)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GroundTruth":
        prov, vals = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                k, v = line[1:].strip().split("=", 1)
                prov[k] = _parse_value(v)
            elif line.strip():
                vals.append(float(line))
        return cls(np.array(vals), prov)


def write_truth(path, truth: GroundTruth) -> None:
    Path(path).write_text(truth.to_text())


def read_truth(path) -> GroundTruth:
    return GroundTruth.from_text(Path(path).read_text())


def logistic_map(model: LogisticRegressionModel) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mode and Laplace covariance."""
    X, y, prec = model.features, model.labels, model.prior_precision

    def negpost(theta):
        return -(model.log_likelihood(theta) + model.log_prior(theta))

    def grad(theta):
        p = special.expit(X @ theta)
        return -(X.T @ (y - p) - prec * theta)

    def hess(theta):
        p = special.expit(X @ theta)
        return (X * (p * (1 - p))[:, None]).T @ X + prec * np.eye(X.shape[1])

    res = optimize.minimize(negpost, np.zeros(X.shape[1]), jac=grad, hess=hess, method="trust-exact")
    return res.x, np.linalg.inv(hess(res.x))


def logistic_init(model: LogisticRegressionModel, how: str, seed: int) -> np.ndarray:
    """Chain start: ``laplace`` (a draw from the Laplace approximation), ``map`` or ``zero``."""
    if how == "zero":
        return np.zeros(model.D)
    mode, cov = logistic_map(model)
    if how == "map":
        return mode
    if how != "laplace":
        raise InvalidArgument(f"unknown init {how!r}")
    return np.random.default_rng([seed, 7]).multivariate_normal(mode, cov)


def lasso_mode(model) -> float:
    """Posterior mode of the 1-d lasso toy (soft-thresholded least squares)."""
    a = model.lam * model._sxy
    b = model.lam * model._sxx
    if a > model.lam0:
        return (a - model.lam0) / b
    if a < -model.lam0:
        return (a + model.lam0) / b
    return 0.0


def logistic_truth(model: LogisticRegressionModel, X_test: np.ndarray, steps: int, seed: int,
                   df: float = 8.0, inflate: float = 1.2) -> GroundTruth:
    """Predictive means from an exact independence-MH run with a Laplace-t proposal."""
    rng = np.random.default_rng(seed)
    mode, cov = logistic_map(model)
    L = np.linalg.cholesky(cov * inflate)
    D = mode.size
    Linv = np.linalg.inv(L)

    def log_q(theta):
        z = Linv @ (theta - mode)
        return -0.5 * (df + D) * math.log1p(z @ z / df)

    def log_post(theta):
        return model.log_likelihood(theta) + model.log_prior(theta)

    theta = mode.copy()
    lp, lq = log_post(theta), log_q(theta)
    acc_sum = np.zeros(X_test.shape[0])
    accepted = 0
    for _ in range(steps):
        z = rng.standard_normal(D) / math.sqrt(rng.chisquare(df) / df)
        prop = mode + L @ z
        lp2, lq2 = log_post(prop), log_q(prop)
        if math.log(1.0 - rng.random()) < (lp2 - lp) - (lq2 - lq):
            theta, lp, lq = prop, lp2, lq2
            accepted += 1
        acc_sum += special.expit(X_test @ theta)
    prov = {"method": "independence-mh-laplace-t", "steps": steps, "seed": seed, "df": df,
            "inflate": inflate, "acceptance": accepted / steps if steps else float("nan")}
    return GroundTruth(acc_sum / steps, prov)


def lasso_truth(model, bins: int = 200, points: int = 100_000, half_width_sd: float = 6.0) -> GroundTruth:
    """Posterior bin probabilities by trapezoid quadrature on a clamped support.

    The histogram range is the posterior mean +/- ``half_width_sd`` standard
    deviations; its edges are part of the provenance.
    """
    # locate the mass: coarse scan, then refine around it
    centre = lasso_mode(model)
    scale = 1.0 / math.sqrt(model.lam * model._sxx)
    grid = np.linspace(centre - 40 * scale, centre + 40 * scale, points)
    lp = model.logpost(grid)
    w = np.exp(lp - lp.max())
    mass = np.trapezoid(w, grid)
    mean = np.trapezoid(w * grid, grid) / mass
    sd = math.sqrt(np.trapezoid(w * (grid - mean) ** 2, grid) / mass)
    lo, hi = mean - half_width_sd * sd, mean + half_width_sd * sd
    grid = np.linspace(mean - 12 * sd, mean + 12 * sd, points)
    lp = model.logpost(grid)
    w = np.exp(lp - lp.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    edges = np.linspace(lo, hi, bins + 1)
    probs = np.diff(np.interp(edges, grid, cdf))
    prov = {"method": "trapezoid", "points": points, "lo": lo, "hi": hi, "bins": bins,
            "half_width_sd": half_width_sd}
    return GroundTruth(probs, prov)


def regenerate_truth(truth: GroundTruth, model, X_test=None) -> GroundTruth:
    """Recompute a ground truth from its recorded provenance."""
    p = truth.provenance
    if p.get("method") == "independence-mh-laplace-t":
        if X_test is None:
            raise InvalidArgument("logistic truth needs the test inputs")
        return logistic_truth(model, X_test, int(p["steps"]), int(p["seed"]), float(p["df"]),
                              float(p["inflate"]))
    if p.get("method") == "trapezoid":
        return lasso_truth(model, int(p["bins"]), int(p["points"]), float(p["half_width_sd"]))
    raise InvalidArgument(f"unknown truth method {p.get('method')!r}")


def histogram_l1(samples, truth: GroundTruth) -> float:
    """L1 distance between the sample histogram and the truth bins; mass outside the range counts."""
    edges = np.linspace(truth.provenance["lo"], truth.provenance["hi"], int(truth.provenance["bins"]) + 1)
    x = np.asarray(samples, dtype=float)
    h, _ = np.histogram(x, edges)
    h = h / x.size
    return float(np.abs(h - truth.values).sum() + (1.0 - h.sum()) + (1.0 - truth.values.sum()))


# --- risk -----------------------------------------------------------------------

@dataclass
class ChainEstimates:
    """Per-recorded-step clock values and test-function values of one chain."""

    clock: np.ndarray      # nondecreasing, e.g. cumulative evaluations
    values: np.ndarray     # T x K


@dataclass
class RiskReport:
    time_grid: np.ndarray
    risk: np.ndarray
    bias_sq: np.ndarray
    variance: np.ndarray
    chains: int
    total_evals: int = 0

    def to_table(self, label: str = "") -> str:
        head = "label\ttime\trisk\tbias_sq\tvariance\n" if label is not None else ""
        rows = [f"{label}\t{t:.17g}\t{r:.17g}\t{b:.17g}\t{v:.17g}"
                for t, r, b, v in zip(self.time_grid, self.risk, self.bias_sq, self.variance)]
        return head + "\n".join(rows) + "\n"


def estimate_risk(chains, truth, time_grid, burn_in: float = 0.1) -> RiskReport:
    """Mean squared error of running estimates against the truth.

    At each grid time, each chain's estimate averages the test-function values
    recorded up to that time after dropping the first ``burn_in`` fraction of
    them. Risk averages ``(I_hat - I)^2`` over chains and test functions, and
    equals ``bias_sq + variance`` with both averaged over test functions.
    """
    if len(chains) == 0:
        raise InvalidArgument("no chains")
    if not 0 <= burn_in < 1:
        raise InvalidArgument("burn_in must lie in [0, 1)")
    I = np.atleast_1d(np.asarray(truth.values if isinstance(truth, GroundTruth) else truth, dtype=float))
    grid = np.asarray(time_grid, dtype=float)
    horizon = min(float(c.clock[-1]) for c in chains if len(c.clock)) if all(len(c.clock) for c in chains) else -1
    start = max(float(c.clock[0]) for c in chains)
    grid = grid[(grid >= start) & (grid <= horizon)]
    if grid.size == 0:
        raise InvalidArgument("time grid does not overlap the range covered by every chain")
    err = np.empty((len(chains), grid.size, I.size))
    for c, ch in enumerate(chains):
        vals = np.asarray(ch.values, dtype=float).reshape(len(ch.clock), -1)
        if vals.shape[1] != I.size:
            raise InvalidArgument("test-function count differs from truth")
        # accumulate deviations from the truth so exact chains give exactly zero
        csum = np.vstack([np.zeros(I.size), np.cumsum(vals - I, axis=0)])
        for g, t in enumerate(grid):
            n = int(np.searchsorted(ch.clock, t, side="right"))
            b = int(math.floor(burn_in * n))
            n = max(n, b + 1)
            err[c, g] = (csum[n] - csum[b]) / (n - b)
    risk = (err ** 2).mean(axis=(0, 2))
    bias_sq = (err.mean(axis=0) ** 2).mean(axis=1)
    variance = err.var(axis=0).mean(axis=1)
    return RiskReport(grid, risk, bias_sq, variance, len(chains))


def integrated_autocorr_time(x, c: float = 5.0) -> float:
    """Integrated autocorrelation time of a scalar series with Sokal's adaptive window."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise InvalidArgument("need at least two values")
    x = x - x.mean()
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    if acf[0] == 0:
        return 1.0
    rho = acf / acf[0]
    tau = 2.0 * np.cumsum(rho) - 1.0
    window = np.arange(n) >= c * tau
    m = int(np.argmax(window)) if window.any() else n - 1
    return float(tau[m])


# --- design samples -------------------------------------------------------------

def collect_design_samples(params, model: LogisticRegressionModel, sigma_rw: float, seed: int,
                           max_samples: int = 100) -> list:
    """Exact ``(mu, sigma_l)`` for random-walk proposals from recorded states.

    Proposals are regenerated from each recorded state with the chain's
    proposal scale; pairs with constant ``l_i`` are excluded and logged.
    """
    rng = np.random.default_rng(seed)
    params = np.atleast_2d(np.asarray(params, dtype=float))
    take = params[np.linspace(0, params.shape[0] - 1, min(max_samples, params.shape[0])).astype(int)]
    out = []
    for theta in take:
        prop = theta + sigma_rw * rng.standard_normal(theta.shape)
        l = logistic_lldiff_population(model, theta, prop).all_values()
        sd = float(l.std())
        if sd == 0.0:
            log.info("identical log-likelihood differences; sample excluded")
            continue
        out.append(MomentSample(math.fsum(l) / l.size, sd, l.size))
    return out


# --- runners --------------------------------------------------------------------

def _spec(eps, cfg: RunConfig, N: int):
    if eps is None or eps == 0:
        return None
    m = int(cfg.get("batch_size", 500))
    return SequentialTestSpec(min(m, N), float(eps), float(cfg.get("bound_alpha", 0.5)))


def _chain_config(cfg: RunConfig, eps, chain: int, N: int, **extra) -> ChainConfig:
    budget = cfg.get("eval_budget")
    return ChainConfig(
        test=_spec(eps, cfg, N),
        iterations=int(cfg.get("iterations", 10 ** 9 if budget else 1000)),
        # shared across epsilons: chain c of every setting starts from the same
        # point and sees the same proposals (common random numbers)
        seed=int(np.random.SeedSequence([cfg.seed, chain]).generate_state(1)[0]),
        trace_every=int(cfg.get("trace_every", 10)),
        eval_budget=int(budget) if budget else None,
        time_budget_s=float(cfg.get("time_budget_s")) if cfg.get("time_budget_s") else None,
        sigma_rw=float(cfg.get("sigma_rw", 0.01)),
        step_size=float(cfg.get("step_size", 5e-6)),
        sgld_batch=int(cfg.get("sgld_batch", 500)),
        **extra,
    )


def _logistic_setup(cfg: RunConfig):
    if cfg.get("data_path"):
        X, y = load_dataset(cfg.get("data_path"))
        Xt, _ = load_dataset(cfg.get("test_path")) if cfg.get("test_path") else (X[:200], None)
    else:
        N, D = int(cfg.get("N", 12214)), int(cfg.get("D", 50))
        X, y, Xt, _, _ = synth_logistic_data(N, D, int(cfg.get("data_seed", 0)), int(cfg.get("n_test", 500)),
                                             float(cfg.get("scale_decay", 0.1)))
    return LogisticRegressionModel(X, y, float(cfg.get("prior_precision", 10.0))), Xt


def _summary_text(trace: ChainTrace) -> str:
    lines = [f"steps={trace.steps_run}", f"accepted={trace.accepted}", f"total_evals={trace.total_evals}",
             f"partial={int(trace.partial)}"]
    lines += [f"stages_{k}={v}" for k, v in sorted(trace.stage_counts.items())]
    return "\n".join(lines) + "\n"


def _read_summary(path) -> dict:
    return {k: int(v) for k, v in (l.split("=", 1) for l in Path(path).read_text().splitlines() if "=" in l)}


def _run_one(job):
    kind, cfg_text, eps, chain, out_dir = job
    cfg = RunConfig.from_text(cfg_text)
    trace_path = Path(out_dir) / f"chain_eps{_fmt(float(eps or 0))}_{chain}.csv"
    summary_path = trace_path.with_suffix(".summary")
    if trace_path.exists() and summary_path.exists():
        return str(trace_path)
    if kind == "random-walk-logistic":
        model, _ = _logistic_setup(cfg)
        ccfg = _chain_config(cfg, eps, chain, model.N)
        init = logistic_init(model, cfg.get("init", "laplace"), ccfg.seed)
        _, trace = run_random_walk(model, ccfg, init)
    elif kind == "sgld-lasso":
        model = synth_lasso_dataset(int(cfg.get("data_seed", 0)), int(cfg.get("N", 10000)))
        ccfg = _chain_config(cfg, eps, chain, model.N, corrected=bool(cfg.get("corrected", True)))
        _, trace = run_sgld(model, ccfg, lasso_mode(model))
    elif kind == "rjmcmc":
        model, _ = _varsel_setup(cfg)
        ccfg = _chain_config(cfg, eps, chain, model.N)
        _, trace = run_rjmcmc(model, ccfg)
    else:
        raise InvalidArgument(f"{kind} has no chain runner")
    if ccfg.eval_budget is not None and trace.total_evals < ccfg.eval_budget:
        trace.partial = True
    if trace.partial:
        log.warning("%s: budget exhausted before the chain finished; trace flagged partial", trace_path)
    write_trace(trace_path, trace)
    summary_path.write_text(_summary_text(trace))
    return str(trace_path)


def _varsel_setup(cfg: RunConfig):
    N, D = int(cfg.get("N", 200)), int(cfg.get("D", 5))
    X, y = synth_varsel_data(N + int(cfg.get("n_test", 100)), D, int(cfg.get("data_seed", 0)))
    model = VarSelModel(X[:N], y[:N], float(cfg.get("lam", 1e-10)), float(cfg.get("nu_shape", 1.0)),
                        float(cfg.get("nu_scale", 1.0)))
    return model, X[N:]


def _run_chains(cfg: RunConfig, out: Path, epsilons):
    jobs = [(cfg.kind, cfg.to_text(), eps, c, str(out)) for eps in epsilons for c in range(cfg.chains)]
    workers = worker_count(int(cfg.get("workers", 1)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            paths = list(ex.map(_run_one, jobs))
    else:
        paths = [_run_one(j) for j in jobs]
    grouped = {}
    for (_, _, eps, _, _), p in zip(jobs, paths):
        grouped.setdefault(eps, []).append(Path(p))
    return grouped


def _risk_tables(cfg: RunConfig, grouped, truth: GroundTruth, test_fn) -> str:
    budget = cfg.get("eval_budget")
    traces = {eps: [read_trace(p) for p in paths] for eps, paths in grouped.items()}
    horizon = min(t.cum_evals[-1] for ts in traces.values() for t in ts)
    horizon = float(budget) if budget and horizon >= float(budget) else float(horizon)
    grid = np.linspace(horizon / int(cfg.get("time_points", 20)), horizon, int(cfg.get("time_points", 20)))
    burn = float(cfg.get("burn_in", 0.1))
    out = ["label\ttime\trisk\tbias_sq\tvariance"]
    ledger = []
    for eps in sorted(traces, key=lambda e: float(e or 0)):
        chains = [ChainEstimates(np.array(t.cum_evals, dtype=float), test_fn(t.param_array())) for t in traces[eps]]
        rep = estimate_risk(chains, truth, grid, burn)
        label = f"eps={_fmt(float(eps or 0))}"
        out += [f"{label}\t{t:.17g}\t{r:.17g}\t{b:.17g}\t{v:.17g}"
                for t, r, b, v in zip(rep.time_grid, rep.risk, rep.bias_sq, rep.variance)]
        total = sum(_read_summary(p.with_suffix(".summary"))["total_evals"] for p in grouped[eps])
        ledger.append(f"# {label} total_evals={total}")
    return "\n".join(out + ledger) + "\n"


def _stage_table(grouped) -> str:
    lines = ["label\tstages\tcount"]
    for eps in sorted(grouped, key=lambda e: float(e or 0)):
        counts = {}
        for p in grouped[eps]:
            for k, v in _read_summary(p.with_suffix(".summary")).items():
                if k.startswith("stages_"):
                    counts[int(k[7:])] = counts.get(int(k[7:]), 0) + v
        lines += [f"eps={_fmt(float(eps or 0))}\t{k}\t{v}" for k, v in sorted(counts.items())]
    return "\n".join(lines) + "\n"


def predictive_test_fn(X_test, varsel: bool = False):
    X_test = np.asarray(X_test, dtype=float)
    D = X_test.shape[1]

    def f(P):
        P = np.atleast_2d(P)
        beta = P[:, :D]
        return special.expit(beta @ X_test.T)
    return f


def run(cfg: RunConfig) -> Path:
    """Execute an experiment and return its artifact directory."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    if cfg.kind == "analysis":
        (out / "analysis.tsv").write_text(analysis_table(cfg))
        return out
    if cfg.kind == "design":
        samples = read_samples(cfg.get("samples_path"))
        budget = float(cfg.get("delta_star", 0.05))
        res = worst_case_design(budget) if cfg.get("design", "average") == "worst-case" else average_design(samples, budget)
        (out / "design.txt").write_text(res.to_text())
        return out
    if cfg.kind == "gibbs-mrf":
        (out / "gibbs.tsv").write_text(gibbs_table(cfg))
        return out
    epsilons = cfg.get_list("epsilons", [0.0])
    grouped = _run_chains(cfg, out, epsilons)
    (out / "stages.tsv").write_text(_stage_table(grouped))
    truth_path = out / "truth.txt"
    if cfg.kind == "random-walk-logistic":
        model, Xt = _logistic_setup(cfg)
        if not truth_path.exists():
            write_truth(truth_path, logistic_truth(model, Xt, int(cfg.get("truth_steps", 20000)),
                                                   int(cfg.get("truth_seed", 1))))
        truth = read_truth(truth_path)
        (out / "risk.tsv").write_text(_risk_tables(cfg, grouped, truth, predictive_test_fn(Xt)))
        if cfg.get("design_samples", 0):
            tr = read_trace(grouped[epsilons[0]][0])
            samples = collect_design_samples(tr.param_array(), model, float(cfg.get("sigma_rw", 0.01)),
                                             cfg.seed, int(cfg.get("design_samples")))
            write_samples(out / "design_samples.csv", samples)
    elif cfg.kind == "sgld-lasso":
        model = synth_lasso_dataset(int(cfg.get("data_seed", 0)), int(cfg.get("N", 10000)))
        truth = lasso_truth(model)
        write_truth(truth_path, truth)
        lines = ["label\tchain\tl1"]
        for eps in sorted(grouped, key=lambda e: float(e or 0)):
            for c, p in enumerate(grouped[eps]):
                x = read_trace(p).param_array()[:, 0]
                lines.append(f"eps={_fmt(float(eps or 0))}\t{c}\t{histogram_l1(x, truth):.17g}")
        (out / "histogram_l1.tsv").write_text("\n".join(lines) + "\n")
    elif cfg.kind == "rjmcmc":
        model, Xt = _varsel_setup(cfg)
        lines = ["label\tchain" + "".join(f"\tincl_{j}" for j in range(model.D))]
        for eps in sorted(grouped, key=lambda e: float(e or 0)):
            for c, p in enumerate(grouped[eps]):
                G = read_trace(p).param_array()[:, model.D:]
                b = int(math.floor(float(cfg.get("burn_in", 0.1)) * G.shape[0]))
                incl = G[b:].mean(axis=0)
                lines.append(f"eps={_fmt(float(eps or 0))}\t{c}" + "".join(f"\t{v:.17g}" for v in incl))
        (out / "inclusion.tsv").write_text("\n".join(lines) + "\n")
    return out


def risk_from_directory(trace_dir, truth_path) -> str:
    """Rebuild the risk table of a finished run from its traces and a truth file."""
    trace_dir = Path(trace_dir)
    cfg = load_config(trace_dir / "config.txt")
    truth = read_truth(truth_path)
    grouped = {}
    for p in sorted(trace_dir.glob("chain_eps*_*.csv")):
        eps = float(p.stem[len("chain_eps"):].rsplit("_", 1)[0])
        grouped.setdefault(eps, []).append(p)
    if not grouped:
        raise InvalidArgument(f"no chain traces in {trace_dir}")
    if cfg.kind == "random-walk-logistic":
        _, Xt = _logistic_setup(cfg)
        fn = predictive_test_fn(Xt)
    elif cfg.kind == "rjmcmc":
        _, Xt = _varsel_setup(cfg)
        fn = predictive_test_fn(Xt)
    else:
        raise InvalidArgument(f"risk tables are defined for logistic and rjmcmc runs, not {cfg.kind}")
    return _risk_tables(cfg, grouped, truth, fn)


# --- analysis and gibbs tables --------------------------------------------------

def analysis_table(cfg: RunConfig) -> str:
    """DP versus simulation for the z-statistic walk over a ``mu_std`` grid."""
    mus = [float(v) for v in cfg.get_list("mu_std", [0, 0.5, 1, 2, 3, 5, 8])]
    pi1 = float(cfg.get("pi1", 0.05))
    eps = float(cfg.get("epsilon", 0.05))
    trials = int(cfg.get("trials", 100_000))
    design = StageDesign.uniform(pi1, eps, alpha=float(cfg.get("bound_alpha", 0.5)))
    rng = np.random.default_rng(cfg.seed)
    lines = ["mu_std\tE_dp\tE_mc\tse\tusage_dp\tusage_mc"]
    for mu in mus:
        prof = dp_error_and_usage(RandomWalkParams(mu, design), int(cfg.get("grid_size", 256)))
        emp = simulate_sequential_tests(mu, design, trials, rng)
        lines.append(f"{mu:.17g}\t{prof.error:.17g}\t{emp.error:.17g}\t{emp.error_se:.17g}\t"
                     f"{prof.expected_usage:.17g}\t{emp.expected_usage:.17g}")
    return "\n".join(lines) + "\n"


def gibbs_table(cfg: RunConfig) -> str:
    """Subset-L1 error against sweep count for exact and approximate Gibbs."""
    D = int(cfg.get("D", 8))
    model = gb.dense_mrf(D, int(cfg.get("data_seed", 0)), float(cfg.get("log_var", 0.02)))
    sweeps = int(cfg.get("sweeps", 2000))
    rng = np.random.default_rng(cfg.seed)
    subsets = gb.draw_subsets(D, int(cfg.get("subsets", 1600)), rng, min(5, D))
    if D <= 16:
        truth = gb.EnumeratedTruth(gb.enumerate_joint(model), D)
        provenance = "enumeration"
    else:
        ref = gb.gibbs_sweeps(model, int(cfg.get("truth_sweeps", 10 * sweeps)), None, int(cfg.get("truth_seed", 1)))
        truth = gb.SampleTruth(ref.samples)
        provenance = "exact-gibbs"
    points = int(cfg.get("time_points", 10))
    lines = [f"# truth={provenance}", "label\tsweeps\tevals\tl1"]
    for eps in cfg.get_list("epsilons", [0.0]):
        spec = None if not eps else SequentialTestSpec(int(cfg.get("batch_size", 500)), float(eps))
        res = gb.gibbs_sweeps(model, sweeps, spec, cfg.seed)
        for t in np.linspace(sweeps / points, sweeps, points).astype(int):
            err = gb.subset_l1_error(res.samples[:t], truth, subsets)
            lines.append(f"eps={_fmt(float(eps))}\t{t}\t{res.cum_evals[t - 1]}\t{err:.17g}")
    return "\n".join(lines) + "\n"

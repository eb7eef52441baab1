"""Approximate Gibbs sampling for factorized binary models.

A joint ``P(X) = prod_n f_n(X)`` over binary variables is stored as log
factor tables. Updating site ``i`` needs ``log P(1|x)/P(0|x)``, a sum of
per-factor log ratios over the factors touching ``i``; the sequential test
decides ``u < P(X_i = 1 | x_-i)`` from a sample of those ratios.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidArgument
from .seqtest import LogLikDiffPopulation, SequentialTestSpec, sequential_mh_test


@dataclass(frozen=True)
class FactorizedBinaryModel:
    """Binary model with factors of a common arity ``k``.

    ``scopes`` is ``F x k`` (0-based site indices, distinct within a row) and
    ``tables`` is ``F x 2**k`` log-potentials. Entry ``c`` of a table is the
    configuration whose bits, read from the first scope site as most
    significant, spell ``c``.
    """

    D: int
    scopes: np.ndarray
    tables: np.ndarray

    def __post_init__(self):
        scopes = np.asarray(self.scopes, dtype=np.intp)
        tables = np.asarray(self.tables, dtype=float)
        if scopes.ndim != 2 or tables.ndim != 2 or scopes.shape[0] != tables.shape[0]:
            raise InvalidArgument("scopes and tables must be 2-d with one row per factor")
        k = scopes.shape[1]
        if tables.shape[1] != 2 ** k:
            raise InvalidArgument(f"tables need {2 ** k} columns for arity {k}")
        if scopes.size and (scopes.min() < 0 or scopes.max() >= self.D):
            raise InvalidArgument("factor scope outside 0..D-1")
        if any(len(set(row)) != k for row in scopes.tolist()):
            raise InvalidArgument("repeated site inside a factor scope")
        if not np.all(np.isfinite(tables)):
            raise InvalidArgument("log-potential tables must be finite")
        object.__setattr__(self, "scopes", scopes)
        object.__setattr__(self, "tables", tables)
        weights = 1 << np.arange(k - 1, -1, -1)
        object.__setattr__(self, "_weights", weights)
        site_factors, site_bits = [], []
        for i in range(self.D):
            f, pos = np.nonzero(scopes == i)
            site_factors.append(f)
            site_bits.append(weights[pos])
        object.__setattr__(self, "_site_factors", site_factors)
        object.__setattr__(self, "_site_bits", site_bits)

    @property
    def n_factors(self) -> int:
        return self.scopes.shape[0]

    @property
    def arity(self) -> int:
        return self.scopes.shape[1]

    def factors_of(self, i: int) -> np.ndarray:
        return self._site_factors[i]

    def log_joint(self, x) -> float:
        """Unnormalized ``log P(x)``."""
        x = np.asarray(x, dtype=np.intp)
        codes = x[self.scopes] @ self._weights
        return float(np.sum(self.tables[np.arange(self.n_factors), codes]))

    def ratio_terms(self, i: int, x, idx=None) -> np.ndarray:
        """``log f_n(X_i=1, x_-i) - log f_n(X_i=0, x_-i)`` over factors touching ``i``."""
        x = np.asarray(x, dtype=np.intp)
        f = self._site_factors[i]
        bit = self._site_bits[i]
        if idx is not None:
            f, bit = f[idx], bit[idx]
        codes = x[self.scopes[f]] @ self._weights
        c0 = codes & ~bit
        return self.tables[f, c0 | bit] - self.tables[f, c0]

    def log_odds(self, i: int, x) -> float:
        return math.fsum(self.ratio_terms(i, x))

    def conditional(self, i: int, x) -> float:
        """Exact ``P(X_i = 1 | x_-i)``."""
        return float(special.expit(self.log_odds(i, x)))


def dense_mrf(D: int, seed: int, log_var: float = 0.02) -> FactorizedBinaryModel:
    """Third-order MRF with a potential on every triple of sites.

    Log-potential entries are i.i.d. normal with mean 0 and variance ``log_var``.
    """
    if D < 3:
        raise InvalidArgument("a third-order MRF needs D >= 3")
    rng = np.random.default_rng(seed)
    scopes = np.array(list(itertools.combinations(range(D), 3)), dtype=np.intp)
    tables = rng.normal(0.0, math.sqrt(log_var), size=(scopes.shape[0], 8))
    return FactorizedBinaryModel(D, scopes, tables)


def constant_mrf(D: int, value: float = 0.0) -> FactorizedBinaryModel:
    scopes = np.array(list(itertools.combinations(range(D), 3)), dtype=np.intp)
    return FactorizedBinaryModel(D, scopes, np.full((scopes.shape[0], 8), value))


def gibbs_ratio_population(model: FactorizedBinaryModel, i: int, x) -> LogLikDiffPopulation:
    """Per-factor log ratios for site ``i`` at configuration ``x`` (value of ``x[i]`` ignored)."""
    if not 0 <= i < model.D:
        raise InvalidArgument(f"site {i} outside 0..{model.D - 1}")
    x = np.array(x, dtype=np.intp)
    n = model.factors_of(i).size
    if n == 0:
        raise InvalidArgument(f"site {i} touches no factor")
    return LogLikDiffPopulation(n, lambda idx: model.ratio_terms(i, x, idx))


def gibbs_mu0(u: float, n_factors: int) -> float:
    """``(1/N) log u / log(1 - u)``, as displayed for the Gibbs variant.

    Only equivalent to the conditional-probability test under sign conditions
    on the log joints; the sampler uses :func:`gibbs_logit_mu0`.
    """
    if not 0.0 < u < 1.0:
        raise InvalidArgument(f"u must lie in (0, 1), got {u}")
    if n_factors < 1:
        raise InvalidArgument("n_factors must be >= 1")
    return math.log(u) / math.log1p(-u) / n_factors


def gibbs_logit_mu0(u: float, n_factors: int) -> float:
    """Threshold with ``u < P(X_i=1|x_-i)  <=>  mean ratio > logit(u)/N``."""
    if not 0.0 < u < 1.0:
        raise InvalidArgument(f"u must lie in (0, 1), got {u}")
    if n_factors < 1:
        raise InvalidArgument("n_factors must be >= 1")
    return (math.log(u) - math.log1p(-u)) / n_factors


@dataclass(frozen=True)
class GibbsUpdate:
    value: int
    n_used: int
    stages: int


def _open_uniform(rng) -> float:
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


def approx_gibbs_update(i: int, state, model: FactorizedBinaryModel, spec: SequentialTestSpec | None,
                        rng: np.random.Generator, test_rng: np.random.Generator | None = None) -> GibbsUpdate:
    """Resample ``X_i``; ``spec = None`` sums all factors exactly."""
    pop = gibbs_ratio_population(model, i, state)
    u = _open_uniform(rng)
    mu0 = gibbs_logit_mu0(u, pop.size)
    if spec is None:
        return GibbsUpdate(int(math.fsum(pop.all_values()) / pop.size > mu0), pop.size, 1)
    m = min(spec.batch_size, pop.size)
    if m != spec.batch_size:
        spec = SequentialTestSpec(m, spec.epsilon, spec.bound_alpha)
    d = sequential_mh_test(pop, mu0, spec, test_rng if test_rng is not None else rng)
    return GibbsUpdate(int(d.accept), d.n_used, d.stages)


@dataclass
class GibbsRun:
    samples: np.ndarray      # recorded sweeps x D, uint8
    total_evals: int
    elapsed_ns: np.ndarray   # per recorded sweep
    cum_evals: np.ndarray    # per recorded sweep


def gibbs_sweeps(model: FactorizedBinaryModel, n_sweeps: int, spec: SequentialTestSpec | None, seed: int,
                 init=None, record_every: int = 1, eval_budget: int | None = None) -> GibbsRun:
    """Systematic-scan Gibbs: sites ``0..D-1`` in order each sweep.

    With ``eval_budget`` the run ends after the first sweep whose cumulative
    factor evaluations reach it.
    """
    rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    x = np.zeros(model.D, dtype=np.intp) if init is None else np.array(init, dtype=np.intp)
    rows, times, cum = [], [], []
    evals = 0
    t0 = time.perf_counter_ns()
    for t in range(n_sweeps):
        for i in range(model.D):
            upd = approx_gibbs_update(i, x, model, spec, rng, test_rng)
            x[i] = upd.value
            evals += upd.n_used
        if t % record_every == 0:
            rows.append(x.astype(np.uint8))
            times.append(time.perf_counter_ns() - t0)
            cum.append(evals)
        if eval_budget is not None and evals >= eval_budget:
            if t % record_every != 0:
                rows.append(x.astype(np.uint8))
                times.append(time.perf_counter_ns() - t0)
                cum.append(evals)
            break
    samples = np.vstack(rows) if rows else np.empty((0, model.D), dtype=np.uint8)
    return GibbsRun(samples, evals, np.array(times, dtype=np.int64), np.array(cum, dtype=np.int64))


# --- small models: enumeration and exact kernels -----------------------------

def all_states(D: int) -> np.ndarray:
    """``2**D x D`` bit matrix; row ``s`` is ``s`` in binary, site 0 most significant."""
    if D > 24:
        raise InvalidArgument("enumeration limited to D <= 24")
    s = np.arange(2 ** D)
    return ((s[:, None] >> np.arange(D - 1, -1, -1)) & 1).astype(np.intp)


def state_index(x) -> int:
    out = 0
    for b in np.asarray(x, dtype=np.intp):
        out = (out << 1) | int(b)
    return out


def enumerate_joint(model: FactorizedBinaryModel) -> np.ndarray:
    """Normalized ``P(x)`` over all ``2**D`` states (indexed as in :func:`all_states`)."""
    X = all_states(model.D)
    logp = np.zeros(X.shape[0])
    for f in range(model.n_factors):
        codes = X[:, model.scopes[f]] @ model._weights
        logp += model.tables[f, codes]
    return np.exp(logp - special.logsumexp(logp))


def conditional_table(model: FactorizedBinaryModel, cond=None) -> np.ndarray:
    """``D x 2**D`` table of ``P(X_i = 1 | x_-i)`` at every state ``x``.

    ``cond(i, x)`` overrides the exact conditional, e.g. with an approximate one.
    """
    X = all_states(model.D)
    cond = cond or model.conditional
    out = np.empty((model.D, X.shape[0]))
    for i in range(model.D):
        bit = 1 << (model.D - 1 - i)
        for s in range(X.shape[0]):
            if s & bit:
                out[i, s] = out[i, s ^ bit]
            else:
                out[i, s] = cond(i, X[s])
    return out


def exact_gibbs_sweeps(P1: np.ndarray, n_sweeps: int, seed: int, init: int = 0) -> np.ndarray:
    """Fast exact systematic-scan Gibbs from a cached conditional table.

    Returns visit counts over the ``2**D`` states, one count per sweep.
    """
    D = P1.shape[0]
    rng = np.random.default_rng(seed)
    bits = [1 << (D - 1 - i) for i in range(D)]
    rows = [P1[i].tolist() for i in range(D)]
    counts = [0] * P1.shape[1]
    s = int(init)
    chunk = 65536 // D + 1
    done = 0
    while done < n_sweeps:
        k = min(chunk, n_sweeps - done)
        us = rng.random(k * D).tolist()
        j = 0
        for _ in range(k):
            for i in range(D):
                b = bits[i]
                if us[j] < rows[i][s]:
                    s |= b
                else:
                    s &= ~b
                j += 1
            counts[s] += 1
        done += k
    return np.array(counts, dtype=np.int64)


def sweep_kernel(P1: np.ndarray) -> np.ndarray:
    """Transition matrix of one systematic sweep built from a conditional table."""
    D, S = P1.shape
    K = np.eye(S)
    idx = np.arange(S)
    for i in range(D):
        bit = 1 << (D - 1 - i)
        T = np.zeros((S, S))
        lo = idx & ~bit
        T[idx, lo | bit] = P1[i]
        T[idx, lo] += 1.0 - P1[i]
        K = K @ T
    return K


def stationary(K: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(K.T)
    p = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return p / p.sum()


def dobrushin_coefficient(K: np.ndarray) -> float:
    """``max_{x,y} d_v(K(x,.), K(y,.))``."""
    S = K.shape[0]
    best = 0.0
    for a in range(S):
        d = 0.5 * np.abs(K[a + 1:] - K[a]).sum(axis=1)
        if d.size:
            best = max(best, float(d.max()))
    return best


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _t_critical(n: int, eps: float) -> float:
    from scipy import stats
    return float(stats.t.isf(eps, n - 1))


def order_accept_probability(values, mu0: float, spec: SequentialTestSpec) -> float:
    """Probability over visiting orders that the sequential test accepts (all ``N!`` orders)."""
    values = np.asarray(values, dtype=float)
    N = values.size
    if N > 8:
        raise InvalidArgument("order enumeration limited to N <= 8")
    pop = LogLikDiffPopulation.from_values(values)
    perms = list(itertools.permutations(range(N)))
    return sum(sequential_mh_test(pop, mu0, spec, order=p).accept for p in perms) / len(perms)


def approx_conditional_exact(values, spec: SequentialTestSpec) -> float:
    """``P(X_i is assigned 1)`` under the sequential test, integrated over ``u`` and orders.

    The acceptance probability is piecewise constant in ``mu0``; breakpoints
    are the stage decision boundaries ``lbar_n +/- s_n t_crit``, and
    ``u = expit(N mu0)`` maps each piece to its probability.
    """
    values = np.asarray(values, dtype=float)
    N = values.size
    if spec.batch_size > N:
        spec = SequentialTestSpec(N, spec.epsilon, spec.bound_alpha)
    m = spec.batch_size
    breaks = {math.fsum(values) / N}
    for p in itertools.permutations(range(N)):
        v = values[list(p)]
        for n in range(m, N, m):
            if n < 2:
                continue
            head = v[:n]
            lbar = head.mean()
            s_l = head.std(ddof=1)
            se = s_l / math.sqrt(n) * math.sqrt(1.0 - (n - 1) / (N - 1))
            breaks.add(float(lbar))
            if se > 0:
                eps = spec.stage_epsilon(n / N)
                c = se * _t_critical(n, eps)
                breaks.update((float(lbar - c), float(lbar + c)))
    b = np.array(sorted(breaks))
    edges = np.concatenate([[-np.inf], b, [np.inf]])
    cdf = special.expit(N * edges)
    total = 0.0
    for k in range(edges.size - 1):
        mass = cdf[k + 1] - cdf[k]
        if mass <= 0:
            continue
        lo, hi = edges[k], edges[k + 1]
        if np.isinf(lo):
            mid = hi - 1.0
        elif np.isinf(hi):
            mid = lo + 1.0
        else:
            mid = 0.5 * (lo + hi)
        total += mass * order_accept_probability(values, mid, spec)
    return float(total)


# --- evaluation metric --------------------------------------------------------

def draw_subsets(D: int, M: int, rng: np.random.Generator, size: int = 5) -> np.ndarray:
    """``M`` random ``size``-subsets, or all of them when there are at most ``M``."""
    if size > D:
        raise InvalidArgument("subset size exceeds D")
    if math.comb(D, size) <= M:
        return np.array(list(itertools.combinations(range(D), size)), dtype=np.intp)
    return np.sort(np.array([rng.choice(D, size, replace=False) for _ in range(M)]), axis=1)


def subset_codes(samples: np.ndarray, subset) -> np.ndarray:
    sub = np.asarray(samples, dtype=np.intp)[:, subset]
    return sub @ (1 << np.arange(len(subset) - 1, -1, -1))


def empirical_subset_marginal(samples, subset, weights=None) -> np.ndarray:
    codes = subset_codes(samples, subset)
    h = np.bincount(codes, weights=weights, minlength=2 ** len(subset)).astype(float)
    return h / h.sum()


class EnumeratedTruth:
    """Subset marginals of a fully enumerated joint."""

    def __init__(self, joint: np.ndarray, D: int):
        self.joint = np.asarray(joint, dtype=float)
        self.states = all_states(D)

    def __call__(self, subset) -> np.ndarray:
        return empirical_subset_marginal(self.states, subset, weights=self.joint)


class SampleTruth:
    """Subset marginals of a long reference run."""

    def __init__(self, samples):
        self.samples = np.asarray(samples)

    def __call__(self, subset) -> np.ndarray:
        return empirical_subset_marginal(self.samples, subset)


def subset_l1_error(samples, truth, subsets) -> float:
    """Average L1 distance between empirical and true subset marginals.

    ``samples`` is ``T x D`` binary; ``truth(subset)`` returns the true
    marginal over the ``2**|subset|`` configurations.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise InvalidArgument("samples must be a nonempty T x D array")
    errs = [np.abs(empirical_subset_marginal(samples, s) - truth(s)).sum() for s in subsets]
    return float(np.mean(errs))


def counts_subset_l1_error(counts, D: int, truth, subsets) -> float:
    """Same metric from visit counts over all ``2**D`` states."""
    states = all_states(D)
    w = np.asarray(counts, dtype=float)
    if w.sum() <= 0:
        raise InvalidArgument("empty trace")
    errs = [np.abs(empirical_subset_marginal(states, s, w) - truth(s)).sum() for s in subsets]
    return float(np.mean(errs))


# --- serialization ------------------------------------------------------------

def save_model(path, model: FactorizedBinaryModel) -> None:
    """Header ``D n_factors``, then per factor its sites and log-potentials."""
    with open(path, "w") as fh:
        fh.write(f"{model.D} {model.n_factors}\n")
        for sc, tb in zip(model.scopes, model.tables):
            fh.write(" ".join(str(int(v)) for v in sc) + " " + " ".join(format(v, ".17g") for v in tb) + "\n")


def load_model(path) -> FactorizedBinaryModel:
    with open(path) as fh:
        D, F = (int(v) for v in fh.readline().split())
        scopes, tables = [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            n = len(parts)
            k = next(k for k in range(1, 16) if k + 2 ** k == n)
            scopes.append([int(v) for v in parts[:k]])
            tables.append([float(v) for v in parts[k:]])
    if len(scopes) != F:
        raise InvalidArgument(f"header declares {F} factors, found {len(scopes)}")
    return FactorizedBinaryModel(D, np.array(scopes), np.array(tables))


__all__ = [
    "FactorizedBinaryModel", "dense_mrf", "constant_mrf", "gibbs_ratio_population", "gibbs_mu0",
    "gibbs_logit_mu0", "GibbsUpdate", "approx_gibbs_update", "GibbsRun", "gibbs_sweeps", "all_states",
    "state_index", "enumerate_joint", "conditional_table", "exact_gibbs_sweeps", "sweep_kernel",
    "stationary", "dobrushin_coefficient", "total_variation", "order_accept_probability",
    "approx_conditional_exact", "draw_subsets", "subset_codes", "empirical_subset_marginal",
    "EnumeratedTruth", "SampleTruth", "subset_l1_error", "counts_subset_l1_error", "save_model", "load_model",
]

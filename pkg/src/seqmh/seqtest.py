"""Sequential approximate Metropolis-Hastings test.

The MH accept/reject step is recast as a question about a population mean:
accept the proposal iff the average log-likelihood difference ``mu`` over all
``N`` datapoints exceeds a threshold ``mu0`` that absorbs the uniform draw,
the prior ratio and the proposal ratio. The sequential test answers that
question from growing mini-batches drawn without replacement, stopping as
soon as a t-test is confident at level ``epsilon``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .errors import DegenerateScale, InsufficientData, InvalidArgument

# Above this many degrees of freedom the normal tail replaces the t tail.
NORMAL_DF_CUTOFF = 1e6


@dataclass(frozen=True)
class LogLikDiffPopulation:
    """Lazy view over the per-datapoint differences ``l_i`` for one proposal.

    ``eval_batch`` maps an integer index array to the matching ``l_i`` values
    and must be deterministic for a fixed ``(theta, theta')`` pair.
    """

    size: int
    eval_batch: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgument(f"population size must be >= 1, got {self.size}")

    @classmethod
    def from_values(cls, values) -> "LogLikDiffPopulation":
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 1:
            raise InvalidArgument("values must be one-dimensional")
        return cls(arr.size, lambda idx: arr[idx])

    def all_values(self) -> np.ndarray:
        return np.asarray(self.eval_batch(np.arange(self.size)), dtype=float)


@dataclass(frozen=True)
class SequentialTestSpec:
    """Knobs of the sequential test.

    Attributes:
        batch_size: datapoints added per stage (``m``).
        epsilon: per-stage error threshold in (0, 0.5].
        bound_alpha: Wang-Tsiatis exponent in [0.5, 1]; 0.5 keeps a constant
            bound, 1 gives the O'Brien-Fleming shape.
    """

    batch_size: int
    epsilon: float
    bound_alpha: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.epsilon <= 0.5:
            raise InvalidArgument(f"epsilon must lie in (0, 0.5], got {self.epsilon}")
        if not 0.5 <= self.bound_alpha <= 1.0:
            raise InvalidArgument(f"bound_alpha must lie in [0.5, 1], got {self.bound_alpha}")

    @property
    def base_bound(self) -> float:
        """``G = Phi^-1(1 - epsilon)``."""
        return float(special.ndtri(1.0 - self.epsilon))

    def pi1(self, N: int) -> float:
        return self.batch_size / N

    def validate(self, N: int) -> None:
        if self.batch_size > N:
            raise InvalidArgument(f"batch_size {self.batch_size} exceeds population size {N}")

    def stage_epsilon(self, pi: float) -> float:
        """Tail-probability threshold at data fraction ``pi``.

        With ``bound_alpha = 0.5`` this is ``epsilon`` itself; otherwise the
        bound ``G0 * pi**(0.5 - alpha)`` is mapped back to a normal tail mass.
        """
        if self.bound_alpha == 0.5:
            return self.epsilon
        g = self.base_bound * pi ** (0.5 - self.bound_alpha)
        return float(special.ndtr(-g))


@dataclass
class RunningMoments:
    """Running mean and mean-square of the consumed ``l_i``.

    The second moment is kept as a sum of squared deviations (Chan et al.
    pairwise update), so ``lsqbar - lbar**2`` never goes meaningfully negative.
    """

    lbar: float = 0.0
    n: int = 0
    m2: float = 0.0
    lo: float = math.inf
    hi: float = -math.inf
    _batches: list = field(default_factory=list, repr=False)

    @property
    def lsqbar(self) -> float:
        if self.n == 0:
            return 0.0
        return self.m2 / self.n + self.lbar * self.lbar

    @property
    def constant(self) -> bool:
        return self.n > 0 and self.lo == self.hi

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        k = values.size
        if k == 0:
            return
        bmean = float(values.mean())
        bm2 = float(((values - bmean) ** 2).sum())
        n_new = self.n + k
        d = bmean - self.lbar
        self.m2 += bm2 + d * d * self.n * k / n_new
        self.lbar += d * k / n_new
        self.n = n_new
        self.lo = min(self.lo, float(values.min()))
        self.hi = max(self.hi, float(values.max()))
        self._batches.append(values)

    def exact_mean(self) -> float:
        """Correctly rounded mean of everything consumed (order independent)."""
        return math.fsum(np.concatenate(self._batches)) / self.n


@dataclass(frozen=True)
class TestDecision:
    accept: bool
    n_used: int
    stages: int
    final_delta: float
    lbar: float


def compute_mu0(u: float, log_prior_ratio: float, log_proposal_ratio: float, N: int) -> float:
    """Per-datapoint MH threshold.

    Args:
        u: uniform draw in (0, 1]; ``u = 1`` is allowed as the limit.
        log_prior_ratio: ``log rho(theta_t) - log rho(theta')``.
        log_proposal_ratio: the Hastings term
            ``log q(theta_t | theta') - log q(theta' | theta_t)``.
        N: population size.

    Returns:
        ``(log u + log_prior_ratio - log_proposal_ratio) / N``.
    """
    if not (math.isfinite(log_prior_ratio) and math.isfinite(log_proposal_ratio)):
        raise InvalidArgument("prior and proposal log-ratios must be finite")
    if not 0.0 < u <= 1.0:
        raise InvalidArgument(f"u must lie in (0, 1], got {u}")
    if N < 1:
        raise InvalidArgument(f"N must be >= 1, got {N}")
    return (math.log(u) + log_prior_ratio - log_proposal_ratio) / N


def estimate_std(moments: RunningMoments, N: int) -> float:
    """Standard error of ``lbar`` with the finite population correction."""
    n = moments.n
    if n < 2:
        raise InsufficientData(f"need at least 2 observations, got {n}")
    if n >= N or moments.constant:
        return 0.0
    var = max(moments.m2 / n, 0.0) * n / (n - 1)
    s_l = math.sqrt(var)
    return s_l / math.sqrt(n) * math.sqrt(1.0 - (n - 1) / (N - 1))


def t_statistic(lbar: float, mu0: float, s: float) -> float:
    if s <= 0.0:
        raise DegenerateScale("standard error is zero; decide by sign of lbar - mu0")
    return (lbar - mu0) / s


def student_t_tail(t_abs: float, df: float) -> float:
    """Upper tail ``1 - F_df(t_abs)`` of the Student-t distribution.

    Uses the regularized incomplete beta identity
    ``P(T > t) = I_{df/(df+t^2)}(df/2, 1/2) / 2``.
    """
    if df < 1:
        raise InvalidArgument(f"df must be >= 1, got {df}")
    if t_abs < 0 or math.isnan(t_abs):
        raise InvalidArgument(f"t_abs must be nonnegative, got {t_abs}")
    if math.isinf(t_abs):
        return 0.0
    if df > NORMAL_DF_CUTOFF:
        return 0.5 * math.erfc(t_abs / math.sqrt(2.0))
    x = df / (df + t_abs * t_abs)
    return 0.5 * float(special.betainc(0.5 * df, 0.5, x))


class LazyPermutation:
    """Uniform random permutation of ``range(N)`` materialized on demand.

    The first prefix is a uniform ordered subset; the complement is only
    shuffled if the caller asks for more. The joint law of everything taken
    equals that of a full uniform permutation.
    """

    def __init__(self, N: int, rng: np.random.Generator):
        self.N = N
        self.rng = rng
        self._order: np.ndarray | None = None
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        N = self.N
        if self._order is None:
            if k >= N:
                self._order = self.rng.permutation(N)
            else:
                self._order = self.rng.choice(N, size=k, replace=False)
        elif self._order.size < N and self._pos + k > self._order.size:
            mask = np.ones(N, dtype=bool)
            mask[self._order] = False
            rest = np.flatnonzero(mask)
            self.rng.shuffle(rest)
            self._order = np.concatenate([self._order, rest])
        out = self._order[self._pos:self._pos + k]
        self._pos += out.size
        return out


class FixedOrder:
    """A caller-supplied permutation consumed front to back."""

    def __init__(self, order):
        self._order = np.asarray(order, dtype=np.intp)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = self._order[self._pos:self._pos + k]
        self._pos += out.size
        return out


def sequential_mh_test(pop: LogLikDiffPopulation, mu0: float, spec: SequentialTestSpec,
                       rng: np.random.Generator | None = None, *, order=None) -> TestDecision:
    """Decide whether the population mean of ``l_i`` exceeds ``mu0``.

    Mini-batches of ``min(m, N - n)`` points are drawn without replacement
    until the t-test tail probability falls below the stage threshold or the
    population is exhausted. At exhaustion the decision is the exact one.
    A constant sample (zero standard error) decides immediately by sign; ties
    reject.

    ``order`` fixes the visiting permutation (a full permutation of
    ``range(N)``) instead of drawing one from ``rng``.
    """
    N = pop.size
    spec.validate(N)
    m = spec.batch_size
    if order is not None:
        if len(order) != N:
            raise InvalidArgument(f"order must have length {N}, got {len(order)}")
        order = FixedOrder(order)
    elif rng is None:
        raise InvalidArgument("either rng or order is required")
    else:
        order = LazyPermutation(N, rng)
    moments = RunningMoments()
    stages = 0
    while True:
        idx = order.take(min(m, N - moments.n))
        moments.update(pop.eval_batch(idx))
        stages += 1
        n = moments.n
        if n == N:
            lbar = moments.exact_mean()
            return TestDecision(lbar > mu0, n, stages, 0.0, lbar)
        if n < 2:
            continue
        lbar = moments.lbar
        s = estimate_std(moments, N)
        if s == 0.0:
            return TestDecision(lbar > mu0, n, stages, 0.0, lbar)
        delta = student_t_tail(abs(lbar - mu0) / s, n - 1)
        if delta < spec.stage_epsilon(n / N):
            return TestDecision(lbar > mu0, n, stages, delta, lbar)


def exact_mh_test(pop: LogLikDiffPopulation, mu0: float) -> bool:
    """Full-data decision: accept iff the mean of all ``l_i`` exceeds ``mu0``."""
    return math.fsum(pop.all_values()) / pop.size > mu0


def sequential_mh_test_many(values, mu0s, spec: SequentialTestSpec, rng: np.random.Generator | None = None,
                            *, orders=None, chunk: int = 1024):
    """Run the sequential test once per threshold in ``mu0s`` on a fixed population.

    Each run visits its own uniform permutation of ``values`` (or the matching
    row of ``orders``), with the same stopping and tie rules as
    :func:`sequential_mh_test`. Returns ``(accept, n_used)`` arrays.
    """
    values = np.asarray(values, dtype=float)
    mu0s = np.atleast_1d(np.asarray(mu0s, dtype=float))
    N = values.size
    spec.validate(N)
    R = mu0s.size
    if orders is None and rng is None:
        raise InvalidArgument("either rng or orders is required")
    full_mean = math.fsum(values) / N
    m = spec.batch_size
    ends = list(range(m, N, m))
    accept = np.empty(R, dtype=bool)
    used = np.empty(R, dtype=np.int64)
    from scipy import stats
    crit = {}
    for n in ends:
        if n >= 2:
            crit[n] = float(stats.t.isf(spec.stage_epsilon(n / N), n - 1))
    for a in range(0, R, chunk):
        b = min(R, a + chunk)
        if orders is not None:
            perm = np.asarray(orders[a:b], dtype=np.intp)
        else:
            perm = rng.permuted(np.broadcast_to(np.arange(N), (b - a, N)), axis=1)
        v = values[perm]
        mu0 = mu0s[a:b]
        open_ = np.ones(b - a, dtype=bool)
        acc = np.zeros(b - a, dtype=bool)
        nu = np.full(b - a, N, dtype=np.int64)
        S = np.zeros(b - a)
        M2 = np.zeros(b - a)
        lo = np.full(b - a, np.inf)
        hi = np.full(b - a, -np.inf)
        n_prev = 0
        for n in ends:
            blk = v[:, n_prev:n]
            k = n - n_prev
            bmean = blk.mean(axis=1)
            bm2 = ((blk - bmean[:, None]) ** 2).sum(axis=1)
            mean_prev = S / n_prev if n_prev else np.zeros(b - a)
            d = bmean - mean_prev
            M2 = M2 + bm2 + d * d * n_prev * k / n
            S = S + bmean * k
            lo = np.minimum(lo, blk.min(axis=1))
            hi = np.maximum(hi, blk.max(axis=1))
            n_prev = n
            if n < 2:
                continue
            lbar = S / n
            const = lo == hi
            s = np.sqrt(np.maximum(M2 / (n - 1), 0.0)) / math.sqrt(n) * math.sqrt(1.0 - (n - 1) / (N - 1))
            decide = open_ & (const | (np.abs(lbar - mu0) > crit[n] * s))
            acc[decide] = lbar[decide] > mu0[decide]
            nu[decide] = n
            open_ &= ~decide
            if not open_.any():
                break
        acc[open_] = full_mean > mu0[open_]
        accept[a:b] = acc
        used[a:b] = nu
    return accept, used

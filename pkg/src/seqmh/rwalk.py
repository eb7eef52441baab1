"""Error and data-usage analysis of the sequential test.

Under a CLT approximation the stagewise z statistics of the test form a
Gaussian random walk whose law depends only on the standardized mean
``mu_std = (mu - mu0) * sqrt(N - 1) / sigma_l`` and on the stage fractions
``pi_j``. This module propagates that walk with a discretized dynamic program,
simulates it directly as an independent check, and integrates the resulting
error over the uniform draw ``u`` to get the error in the acceptance
probability.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special
from scipy.interpolate import PchipInterpolator

from .errors import InvalidArgument

DEFAULT_GRID_SIZE = 256
# Surviving mass further than this many marginal sd from the walk's mean is
# dropped; the marginal sd of every z_j is 1.
_WALK_SPAN = 12.0
_CONVERGENCE_TOL = 1e-4
_PI_TOL = 1e-9


def uniform_pi_grid(pi1: float) -> np.ndarray:
    """Stage fractions ``j * pi1`` capped at 1 (last stage may be partial)."""
    if not 0.0 < pi1 <= 1.0:
        raise InvalidArgument(f"pi1 must lie in (0, 1], got {pi1}")
    J = max(1, math.ceil(1.0 / pi1 - _PI_TOL))
    grid = np.minimum(np.arange(1, J + 1) * pi1, 1.0)
    grid[-1] = 1.0
    return grid


def bound_sequence(G0: float, alpha: float, pi_grid) -> np.ndarray:
    """Wang-Tsiatis stage bounds ``G_j = G0 * pi_j ** (0.5 - alpha)``."""
    if G0 < 0:
        raise InvalidArgument(f"G0 must be nonnegative, got {G0}")
    if not 0.5 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must lie in [0.5, 1], got {alpha}")
    pi = np.asarray(pi_grid, dtype=float)
    return G0 * pi ** (0.5 - alpha)


def bound_from_epsilon(epsilon: float) -> float:
    return float(special.ndtri(1.0 - epsilon))


@dataclass(frozen=True)
class StageDesign:
    """Stage fractions and the bound applied to ``|z_j|`` at each of them."""

    pi_grid: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi_grid, dtype=float)
        b = np.asarray(self.bounds, dtype=float)
        if pi.ndim != 1 or pi.size == 0 or b.shape != pi.shape:
            raise InvalidArgument("pi_grid and bounds must be matching nonempty 1-d sequences")
        if np.any(np.diff(pi) <= 0) or pi[0] <= 0:
            raise InvalidArgument("pi_grid must be strictly increasing and positive")
        if abs(pi[-1] - 1.0) > _PI_TOL:
            raise InvalidArgument(f"last stage must cover all data, got pi_J = {pi[-1]}")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise InvalidArgument("bounds must be finite and nonnegative")
        pi = pi.copy()
        pi[-1] = 1.0
        object.__setattr__(self, "pi_grid", pi)
        object.__setattr__(self, "bounds", b)

    @classmethod
    def uniform(cls, pi1: float, epsilon: float | None = None, *, G0: float | None = None,
                alpha: float = 0.5) -> "StageDesign":
        if (epsilon is None) == (G0 is None):
            raise InvalidArgument("give exactly one of epsilon or G0")
        if G0 is None:
            G0 = bound_from_epsilon(epsilon)
        pi = uniform_pi_grid(pi1)
        return cls(pi, bound_sequence(G0, alpha, pi))

    @property
    def pi1(self) -> float:
        return float(self.pi_grid[0])

    @property
    def n_stages(self) -> int:
        return int(self.pi_grid.size)


@dataclass(frozen=True)
class RandomWalkParams:
    mu_std: float
    design: StageDesign


@dataclass
class RandomWalkProfile:
    """Outcome of the dynamic program for one standardized mean.

    ``error`` is the probability of the wrong early decision, ``expected_usage``
    the mean data fraction at termination, ``stop_mass[j]`` the probability of
    stopping at stage ``j``.
    """

    error: float
    expected_usage: float
    stop_mass: np.ndarray
    converged: bool = True
    convergence_delta: float = 0.0


@dataclass
class EmpiricalProfile:
    error: float
    error_se: float
    expected_usage: float
    usage_se: float
    stop_counts: np.ndarray
    trials: int


@dataclass
class DeltaResult:
    delta: float
    p_a_exact: float
    p_a_approx: float
    abs_error_expectation: float
    expected_usage: float
    converged: bool = True
    quadrature_error: float = 0.0


def rw_conditional_params(mu_std: float, pi_prev: float, pi_cur: float,
                          z_prev: float) -> tuple[float, float]:
    """Mean and variance of ``z_j`` given ``z_{j-1}``.

    ``pi_prev = 0`` denotes the first stage, where ``z_prev`` is ignored. At
    ``pi_cur = 1`` the walk is absorbed: the mean is ``+-inf`` with the sign of
    ``mu_std`` (0 when ``mu_std = 0``) and the variance is 1.
    """
    if not 0.0 <= pi_prev < 1.0 or not pi_prev <= pi_cur <= 1.0:
        raise InvalidArgument(f"need 0 <= pi_prev < 1 and pi_prev <= pi_cur <= 1, got {pi_prev}, {pi_cur}")
    if pi_cur == pi_prev:
        if pi_prev == 0.0:
            raise InvalidArgument("first stage must contain data")
        return float(z_prev), 0.0
    if pi_cur == 1.0:
        mean = math.copysign(math.inf, mu_std) if mu_std != 0 else 0.0
        return mean, 1.0
    var = (pi_cur - pi_prev) / (pi_cur * (1.0 - pi_prev))
    drift = (pi_cur - pi_prev) / ((1.0 - pi_prev) * math.sqrt(pi_cur * (1.0 - pi_cur)))
    carry = math.sqrt(pi_prev / pi_cur * (1.0 - pi_cur) / (1.0 - pi_prev))
    return mu_std * drift + (z_prev * carry if pi_prev > 0 else 0.0), var


def _stage_coefficients(pi_grid: np.ndarray):
    """Per-stage (drift, carry, sd) of the walk for stages with ``pi < 1``."""
    prev = np.concatenate([[0.0], pi_grid[:-1]])
    cur = pi_grid
    inner = cur < 1.0
    p, c = prev[inner], cur[inner]
    drift = (c - p) / ((1.0 - p) * np.sqrt(c * (1.0 - c)))
    carry = np.sqrt(p / c * (1.0 - c) / (1.0 - p))
    sd = np.sqrt((c - p) / (c * (1.0 - p)))
    return drift, carry, sd


def _dp_batch(mu_abs: np.ndarray, design: StageDesign, L: int):
    """Propagate the walk for a batch of nonnegative standardized means.

    Returns (lower-exit mass per stage, upper-exit mass per stage, surviving
    mass entering the final exact stage), each with the batch as leading axis.
    """
    B = mu_abs.size
    pi = design.pi_grid
    bounds = design.bounds
    drift, carry, sd = _stage_coefficients(pi)
    J = pi.size
    n_inner = drift.size
    lower = np.zeros((B, J))
    upper = np.zeros((B, J))
    z = np.zeros((B, 1))
    w = np.ones((B, 1))
    for j in range(n_inner):
        G = bounds[j]
        mean = drift[j] * mu_abs[:, None] + carry[j] * z            # (B, La)
        s = sd[j]
        lo_cdf = special.ndtr((-G - mean) / s)
        up_cdf = special.ndtr((mean - G) / s)
        lower[:, j] = (w * lo_cdf).sum(axis=1)
        upper[:, j] = (w * up_cdf).sum(axis=1)
        inside = np.clip(1.0 - lo_cdf - up_cdf, 0.0, None)
        # marginal mean of z_j ignoring stopping; marginal sd is 1
        centre = mu_abs * math.sqrt(pi[j] / (1.0 - pi[j]))
        a = np.maximum(-G, centre - _WALK_SPAN)
        b = np.minimum(G, centre + _WALK_SPAN)
        width = np.maximum(b - a, 0.0)
        h = width / L
        nodes = a[:, None] + (np.arange(L) + 0.5)[None, :] * h[:, None]   # (B, L)
        diff = (nodes[:, None, :] - mean[:, :, None]) / s                  # (B, La, L)
        K = np.exp(-0.5 * diff * diff)
        rowsum = K.sum(axis=2)
        coef = np.where(rowsum > 0, w * inside / np.where(rowsum > 0, rowsum, 1.0), 0.0)
        w_new = np.einsum("ba,bal->bl", coef, K)
        # kernel narrower than a cell: put in-band mass on the nearest node
        stray = (rowsum == 0) & (inside * w > 0) & (width[:, None] > 0)
        if np.any(stray):
            bi, ai = np.nonzero(stray)
            hs = np.where(h[bi] > 0, h[bi], 1.0)
            k = np.clip(np.floor((mean[bi, ai] - a[bi]) / hs), 0, L - 1).astype(int)
            np.add.at(w_new, (bi, k), (w * inside)[bi, ai])
        z, w = nodes, w_new
    final = w.sum(axis=1)
    return lower, upper, final


def _profile_arrays(mu_abs: np.ndarray, design: StageDesign, L: int, chunk: int = 16):
    errors = np.empty(mu_abs.size)
    usage = np.empty(mu_abs.size)
    stops = np.empty((mu_abs.size, design.n_stages))
    for start in range(0, mu_abs.size, chunk):
        sl = slice(start, start + chunk)
        lower, upper, final = _dp_batch(mu_abs[sl], design, L)
        stop = lower + upper
        stop[:, -1] += final
        stops[sl] = stop
        errors[sl] = lower.sum(axis=1)
        usage[sl] = stop @ design.pi_grid
    return errors, usage, stops


def dp_error_and_usage(params: RandomWalkParams, grid_size: int = DEFAULT_GRID_SIZE,
                       check_convergence: bool = True) -> RandomWalkProfile:
    """Error probability and expected data fraction of the sequential test.

    The z range at each stage is split into ``grid_size`` cells; mass is
    carried at cell midpoints and each source row of the Gaussian kernel is
    normalized to the exact in-band probability, so exits are computed from
    the normal CDF rather than the grid. The last stage (all data) is exact.
    Cost is O(grid_size**2 * J).

    When ``check_convergence`` is set the program is rerun with twice the grid
    and ``converged`` is cleared if either output moves by more than 1e-4.
    """
    if grid_size < 32:
        raise InvalidArgument(f"grid_size must be >= 32, got {grid_size}")
    mu_abs = np.array([abs(params.mu_std)], dtype=float)
    err, use, stops = _profile_arrays(mu_abs, params.design, grid_size)
    prof = RandomWalkProfile(float(err[0]), float(use[0]), stops[0])
    if check_convergence:
        err2, use2, _ = _profile_arrays(mu_abs, params.design, 2 * grid_size)
        d = max(abs(err2[0] - err[0]), abs(use2[0] - use[0]))
        prof.convergence_delta = float(d)
        prof.converged = bool(d <= _CONVERGENCE_TOL)
    return prof


def usage_variance(profile: RandomWalkProfile, design: StageDesign) -> float:
    """Variance of the stopping fraction implied by ``profile.stop_mass``."""
    p = profile.stop_mass
    m = float(p @ design.pi_grid)
    return max(float(p @ design.pi_grid ** 2) - m * m, 0.0)


def worst_case_error(design: StageDesign, grid_size: int = DEFAULT_GRID_SIZE) -> float:
    """Error at ``mu_std = 0``, the largest over all standardized means."""
    prof = dp_error_and_usage(RandomWalkParams(0.0, design), grid_size, check_convergence=False)
    return prof.error


def _simulate_walk(mu_std: np.ndarray, design: StageDesign, rng: np.random.Generator):
    """Run one walk per entry of ``mu_std``.

    Returns (accept flags, stop stage index, early-error flags).
    """
    T = mu_std.size
    pi = design.pi_grid
    bounds = design.bounds
    drift, carry, sd = _stage_coefficients(pi)
    stage = np.full(T, pi.size - 1)
    accept = mu_std > 0
    early_wrong = np.zeros(T, dtype=bool)
    alive = np.ones(T, dtype=bool)
    z = np.zeros(T)
    for j in range(drift.size):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        zj = drift[j] * mu_std[idx] + carry[j] * z[idx] + sd[j] * rng.standard_normal(idx.size)
        z[idx] = zj
        up = zj > bounds[j]
        lo = zj < -bounds[j]
        stop = idx[up | lo]
        stage[stop] = j
        accept[idx[up]] = True
        accept[idx[lo]] = False
        early_wrong[idx[lo]] = mu_std[idx[lo]] >= 0
        early_wrong[idx[up]] = mu_std[idx[up]] < 0
        alive[stop] = False
    return accept, stage, early_wrong


def simulate_sequential_tests(mu_std: float, design: StageDesign, trials: int,
                              rng: np.random.Generator) -> EmpiricalProfile:
    """Monte-Carlo estimate of error and usage by sampling the walk directly."""
    if trials < 1:
        raise InvalidArgument(f"trials must be >= 1, got {trials}")
    mu = np.full(trials, float(mu_std))
    _, stage, wrong = _simulate_walk(mu, design, rng)
    frac = design.pi_grid[stage]
    err = float(wrong.mean())
    use = float(frac.mean())
    if trials > 1:
        err_se = float(wrong.std(ddof=1) / math.sqrt(trials))
        use_se = float(frac.std(ddof=1) / math.sqrt(trials))
    else:
        err_se = use_se = float("nan")
    counts = np.bincount(stage, minlength=design.n_stages)
    return EmpiricalProfile(err, err_se, use, use_se, counts, trials)


@dataclass
class ProfileTable:
    """Error and usage tabulated over ``|mu_std|`` for interpolation.

    Beyond the last node the error is taken as 0 and the usage as its last
    tabulated value (which is ``pi1`` to DP precision by construction).
    """

    design: StageDesign
    x: np.ndarray
    error: np.ndarray
    usage: np.ndarray
    grid_size: int
    _err_fn: PchipInterpolator = field(init=False, repr=False)
    _use_fn: PchipInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        # flat stretches give zero secants; PCHIP handles them but warns
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            self._err_fn = PchipInterpolator(self.x, self.error, extrapolate=False)
            self._use_fn = PchipInterpolator(self.x, self.usage, extrapolate=False)

    @property
    def x_max(self) -> float:
        return float(self.x[-1])

    def error_at(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        out = self._err_fn(np.minimum(x, self.x_max))
        return np.where(x > self.x_max, 0.0, np.clip(out, 0.0, 0.5))

    def usage_at(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        out = self._use_fn(np.minimum(x, self.x_max))
        return np.clip(out, self.design.pi1, 1.0)


def profile_nodes(design: StageDesign) -> np.ndarray:
    """Tabulation nodes: fine up to 10, geometric out to certain first-stage exit."""
    pi1 = design.pi1
    if pi1 >= 1.0:
        return np.array([0.0, 1.0])
    reach = math.sqrt(pi1 / (1.0 - pi1))
    x_max = max(20.0, (float(design.bounds[0]) + 10.0) / reach)
    fine = np.linspace(0.0, 10.0, 201)
    coarse = np.geomspace(10.0, x_max, 60)[1:]
    return np.concatenate([fine, coarse])


def profile_table(design: StageDesign, grid_size: int = DEFAULT_GRID_SIZE) -> ProfileTable:
    x = profile_nodes(design)
    if design.pi1 >= 1.0:
        return ProfileTable(design, x, np.zeros_like(x), np.ones_like(x), grid_size)
    err, use, _ = _profile_arrays(x, design, grid_size)
    return ProfileTable(design, x, err, use, grid_size)


def delta_acceptance(mu: float, sigma_l: float, N: int, design: StageDesign,
                     quadrature_points: int = 64, *, log_ratio_offset: float = 0.0,
                     table: ProfileTable | None = None,
                     grid_size: int = DEFAULT_GRID_SIZE) -> DeltaResult:
    """Error in the acceptance probability after integrating over ``u``.

    The threshold is ``mu0(u) = (log u + log_ratio_offset) / N`` where the
    offset collects the prior and proposal log-ratios (0 for a flat prior and
    symmetric proposal), so ``P_a = min(1, exp(N*mu - offset))``.

    The integral over ``u`` is taken in the variable ``x = mu_std(u)``, which
    is affine in ``log u``; the point ``u = P_a`` maps to ``x = 0`` and the
    two sides are integrated separately with adaptive Gauss-Kronrod
    (``quadrature_points`` caps the number of subintervals).
    """
    if not sigma_l > 0:
        raise InvalidArgument(f"sigma_l must be positive, got {sigma_l}")
    if N < 2:
        raise InvalidArgument(f"N must be >= 2, got {N}")
    if quadrature_points < 16:
        raise InvalidArgument(f"quadrature_points must be >= 16, got {quadrature_points}")
    if table is None:
        table = profile_table(design, grid_size)
    a = N * mu - log_ratio_offset           # log of the unclipped MH ratio
    k = N * sigma_l / math.sqrt(N - 1)      # -d log u / d mu_std
    p_a = 1.0 if a >= 0 else math.exp(a)
    x1 = a / k                              # mu_std at u = 1
    xmax = table.x_max
    quad_err = 0.0

    def integrate_pos(fn, lo, hi, logscale):
        # int_lo^hi fn(x) * k * exp(logscale - k x) dx  over x >= 0
        nonlocal quad_err
        if hi <= lo:
            return 0.0
        hi = min(hi, lo + 60.0 / k)
        val, err = integrate.quad(lambda x: float(fn(x)) * k * math.exp(logscale - k * x),
                                  lo, hi, limit=quadrature_points, epsabs=1e-10, epsrel=1e-8)
        quad_err += err
        return val

    # rejection side, u in (0, P_a): x from max(x1, 0) to infinity
    x_lo = max(x1, 0.0)
    below = integrate_pos(table.error_at, x_lo, xmax, a)
    use_below = integrate_pos(table.usage_at, x_lo, xmax, a)
    tail_x = max(x_lo, xmax)
    use_below += float(table.usage_at(xmax)) * math.exp(a - k * tail_x)
    # acceptance side, u in (P_a, 1): x in (x1, 0) when a < 0, mirrored to y = -x
    if a < 0:
        y_hi = -x1

        def mirrored(fn):
            def g(y):
                return float(fn(y)) * k * math.exp(a + k * y)
            return g

        above, e1 = integrate.quad(mirrored(table.error_at), 0.0, y_hi,
                                   limit=quadrature_points, epsabs=1e-10, epsrel=1e-8)
        use_above, e2 = integrate.quad(mirrored(table.usage_at), 0.0, y_hi,
                                       limit=quadrature_points, epsabs=1e-10, epsrel=1e-8)
        quad_err += e1 + e2
    else:
        above = use_above = 0.0
    delta = above - below
    return DeltaResult(
        delta=delta,
        p_a_exact=p_a,
        p_a_approx=p_a + delta,
        abs_error_expectation=above + below,
        expected_usage=use_above + use_below,
        converged=quad_err <= _CONVERGENCE_TOL,
        quadrature_error=quad_err,
    )


def simulate_acceptance(mu: float, sigma_l: float, N: int, design: StageDesign, trials: int,
                        rng: np.random.Generator, *, log_ratio_offset: float = 0.0):
    """Direct Monte-Carlo estimate of the approximate acceptance probability.

    Draws ``u``, maps it to ``mu_std`` and runs the walk. Returns
    ``(p_a_approx, standard_error)``.
    """
    u = rng.random(trials)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    mu0 = (np.log(u) + log_ratio_offset) / N
    x = (mu - mu0) * math.sqrt(N - 1) / sigma_l
    accept, _, _ = _simulate_walk(x, design, rng)
    p = float(accept.mean())
    return p, math.sqrt(max(p * (1 - p), 0.0) / trials)


def _panel_rule(lo: float, hi: float, width: float, nodes: np.ndarray, weights: np.ndarray):
    n_panels = max(1, math.ceil((hi - lo) / width))
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    return x, w


def delta_acceptance_many(mu, sigma_l, N, table: ProfileTable, *, log_ratio_offset=0.0,
                          points_per_panel: int = 16, panel_width: float = 0.25):
    """Vectorized fixed-rule version of :func:`delta_acceptance` for many samples.

    Composite Gauss-Legendre in ``x = mu_std(u)``, panels no wider than
    ``panel_width`` or two decay lengths of the exponential weight.
    Returns ``(delta, abs_error_expectation, expected_usage)`` arrays.
    """
    mu, sigma_l, N, off = np.broadcast_arrays(np.asarray(mu, dtype=float), np.asarray(sigma_l, dtype=float),
                                              np.asarray(N, dtype=float), np.asarray(log_ratio_offset, dtype=float))
    if np.any(sigma_l <= 0) or np.any(N < 2):
        raise InvalidArgument("sigma_l must be positive and N >= 2")
    gl_x, gl_w = np.polynomial.legendre.leggauss(points_per_panel)
    xmax = table.x_max
    out_delta = np.empty(mu.shape)
    out_abs = np.empty(mu.shape)
    out_use = np.empty(mu.shape)
    for idx in np.ndindex(mu.shape):
        a = N[idx] * mu[idx] - off[idx]
        k = N[idx] * sigma_l[idx] / math.sqrt(N[idx] - 1)
        x1 = a / k
        width = min(panel_width, 2.0 / k)
        x_lo = max(x1, 0.0)
        hi = min(max(xmax, x_lo), x_lo + 60.0 / k)
        below = use_below = 0.0
        if hi > x_lo:
            x, w = _panel_rule(x_lo, hi, width, gl_x, gl_w)
            wt = w * k * np.exp(a - k * x)
            below = float(wt @ table.error_at(x))
            use_below = float(wt @ table.usage_at(x))
        use_below += float(table.usage_at(xmax)) * math.exp(a - k * max(x_lo, xmax))
        above = use_above = 0.0
        if a < 0:
            y_hi = -x1
            y_lo = max(0.0, y_hi - 60.0 / k)
            y, w = _panel_rule(y_lo, y_hi, width, gl_x, gl_w)
            wt = w * k * np.exp(a + k * y)
            above = float(wt @ table.error_at(y))
            use_above = float(wt @ table.usage_at(y))
            # u below exp(a + k*y_lo) on the acceptance side has negligible mass
            use_above += float(table.usage_at(y_lo)) * math.exp(a + k * y_lo) * (y_lo > 0)
        out_delta[idx] = above - below
        out_abs[idx] = above + below
        out_use[idx] = use_above + use_below
    return out_delta, out_abs, out_use


def format_profile_table(mu_std, profiles, deltas=None) -> str:
    """Tab-separated ``mu_std, error, usage, delta`` rows with a header."""
    lines = ["mu_std\terror\tusage\tdelta"]
    deltas = [float("nan")] * len(profiles) if deltas is None else deltas
    for m, p, d in zip(mu_std, profiles, deltas):
        lines.append(f"{float(m):.17g}\t{p.error:.17g}\t{p.expected_usage:.17g}\t{float(d):.17g}")
    return "\n".join(lines) + "\n"


def parse_profile_table(text: str):
    """Inverse of :func:`format_profile_table`: array with one row per line."""
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    return np.array([[float(v) for v in r] for r in rows])

"""Choosing sequential-test parameters by grid search.

A design is a first-stage fraction ``pi1``, a base bound ``G0`` and a
Wang-Tsiatis exponent ``alpha``. The average design minimizes mean data usage
over a set of observed ``(mu, sigma_l, N)`` samples subject to a budget on the
mean absolute acceptance-probability error; the worst-case design bounds the
error at ``mu_std = 0`` and needs no samples.
"""
from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import InfeasibleDesign, InvalidArgument
from .rwalk import (
    RandomWalkParams,
    StageDesign,
    bound_from_epsilon,
    delta_acceptance_many,
    dp_error_and_usage,
    profile_table,
)

log = logging.getLogger(__name__)

DESIGN_GRID_SIZE = 64


@dataclass(frozen=True)
class MomentSample:
    """Population mean and standard deviation of ``l_i`` for one proposal."""

    mu: float
    sigma_l: float
    N: int

    def __post_init__(self):
        if not self.sigma_l > 0 or not math.isfinite(self.sigma_l):
            raise InvalidArgument(f"sigma_l must be positive and finite, got {self.sigma_l}")
        if self.N < 2:
            raise InvalidArgument(f"N must be >= 2, got {self.N}")
        if not math.isfinite(self.mu):
            raise InvalidArgument("mu must be finite")


@dataclass(frozen=True)
class DesignGrid:
    pi1s: tuple = (0.01, 0.02, 0.05, 0.1, 0.2)
    epsilons: tuple = (0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
    alphas: tuple = (0.5, 0.65, 0.8, 1.0)

    def __post_init__(self):
        if not (self.pi1s and self.epsilons and self.alphas):
            raise InvalidArgument("every grid axis needs at least one value")
        for e in self.epsilons:
            if not 0 < e <= 0.5:
                raise InvalidArgument(f"epsilon {e} outside (0, 0.5]")

    def points(self):
        """``(pi1, G0, alpha)`` triples; ``alpha`` is irrelevant when ``pi1 = 1``."""
        for pi1, eps, alpha in itertools.product(self.pi1s, self.epsilons, self.alphas):
            yield pi1, bound_from_epsilon(eps), alpha

    def __len__(self):
        return len(self.pi1s) * len(self.epsilons) * len(self.alphas)


DEFAULT_GRID = DesignGrid()


@dataclass(frozen=True)
class DesignResult:
    pi1: float
    G0: float
    alpha: float
    predicted_error: float
    predicted_usage: float
    grid_evaluations: int
    kind: str = "average"
    delta_star: float = field(default=float("nan"))

    @property
    def epsilon(self) -> float:
        return float(special.ndtr(-self.G0))

    def stage_design(self) -> StageDesign:
        return StageDesign.uniform(self.pi1, G0=self.G0, alpha=self.alpha)

    def evaluate(self, samples, *, grid_size: int = DESIGN_GRID_SIZE):
        """Mean ``|Delta|`` and mean usage of this design on other samples."""
        d = self.stage_design()
        table = None if d.pi1 >= 1.0 else design_table(self.pi1, self.G0, self.alpha, grid_size)
        return evaluate_average(samples, d, grid_size=grid_size, table=table)

    def batch_size(self, N: int) -> int:
        return max(1, min(N, round(self.pi1 * N)))

    def to_text(self) -> str:
        keys = ("kind", "delta_star", "pi1", "G0", "epsilon", "alpha", "predicted_error",
                "predicted_usage", "grid_evaluations")
        lines = []
        for k in keys:
            v = getattr(self, k)
            lines.append(f"{k}={format(v, '.17g') if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DesignResult":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(kv["pi1"]), float(kv["G0"]), float(kv["alpha"]), float(kv["predicted_error"]),
                   float(kv["predicted_usage"]), int(kv["grid_evaluations"]), kv.get("kind", "average"),
                   float(kv.get("delta_star", "nan")))


def _arrays(samples):
    if len(samples) == 0:
        raise InvalidArgument("need at least one moment sample")
    mu = np.array([s.mu for s in samples], dtype=float)
    sig = np.array([s.sigma_l for s in samples], dtype=float)
    N = np.array([s.N for s in samples], dtype=float)
    return mu, sig, N


def _design(pi1, G0, alpha):
    return StageDesign.uniform(pi1, G0=G0, alpha=alpha)


@functools.lru_cache(maxsize=512)
def design_table(pi1: float, G0: float, alpha: float, grid_size: int = DESIGN_GRID_SIZE):
    """Profile table of a uniform-stage design, memoized."""
    return profile_table(_design(pi1, G0, alpha), grid_size)


@functools.lru_cache(maxsize=512)
def _cached_worst(pi1, G0, alpha, grid_size):
    return worst_case_point(_design(pi1, G0, alpha), grid_size)


def evaluate_average(samples, design: StageDesign, *, grid_size: int = DESIGN_GRID_SIZE,
                     quadrature_points: int = 16, table=None):
    """Mean ``|Delta|`` and mean ``E_u pi_bar`` over the samples for one design."""
    mu, sig, N = _arrays(samples)
    if design.pi1 >= 1.0:
        return 0.0, 1.0
    table = table if table is not None else profile_table(design, grid_size)
    delta, _, usage = delta_acceptance_many(mu, sig, N, table, points_per_panel=quadrature_points)
    return float(np.mean(np.abs(delta))), float(np.mean(usage))


def _select(candidates, delta_star, kind, n_eval):
    feasible = [c for c in candidates if c[3] <= delta_star]
    if not feasible:
        best = min(c[3] for c in candidates)
        raise InfeasibleDesign(f"no grid point meets budget {delta_star}; smallest error {best:.3g}", best)
    pi1, G0, alpha, err, use = min(feasible, key=lambda c: (c[4], c[3], c[0]))
    return DesignResult(pi1, G0, alpha, err, use, n_eval, kind, float(delta_star))


def _check_budget(delta_star):
    if not delta_star >= 0 or math.isnan(delta_star):
        raise InvalidArgument(f"delta_star must be nonnegative, got {delta_star}")


def average_design(samples, delta_star: float, grid: DesignGrid = DEFAULT_GRID,
                   quadrature_points: int = 16, *, grid_size: int = DESIGN_GRID_SIZE) -> DesignResult:
    """Minimize mean usage subject to mean ``|Delta|`` <= ``delta_star``."""
    _check_budget(delta_star)
    _arrays(samples)
    candidates = []
    for pi1, G0, alpha in grid.points():
        d = _design(pi1, G0, alpha)
        table = None if d.pi1 >= 1.0 else design_table(pi1, G0, alpha, grid_size)
        err, use = evaluate_average(samples, d, grid_size=grid_size, quadrature_points=quadrature_points,
                                    table=table)
        candidates.append((pi1, G0, alpha, err, use))
    return _select(candidates, delta_star, "average", len(candidates))


def worst_case_point(design: StageDesign, grid_size: int = DESIGN_GRID_SIZE):
    """``(E(0), pi_bar(0))`` for a design."""
    if design.pi1 >= 1.0:
        return 0.0, 1.0
    prof = dp_error_and_usage(RandomWalkParams(0.0, design), grid_size, check_convergence=False)
    return prof.error, prof.expected_usage


def worst_case_design(delta_star: float, grid: DesignGrid = DEFAULT_GRID, *,
                      grid_size: int = DESIGN_GRID_SIZE) -> DesignResult:
    """Minimize ``pi_bar(0)`` subject to ``E(0) <= delta_star``."""
    _check_budget(delta_star)
    candidates = []
    for pi1, G0, alpha in grid.points():
        err, use = _cached_worst(pi1, G0, alpha, grid_size)
        candidates.append((pi1, G0, alpha, err, use))
    return _select(candidates, delta_star, "worst-case", len(candidates))


def fixed_batch_design(samples, delta_star: float, pi1: float, grid: DesignGrid = DEFAULT_GRID, *,
                       grid_size: int = DESIGN_GRID_SIZE) -> DesignResult:
    """Tune only the bound (constant in ``pi``) at a fixed first-stage fraction."""
    sub = DesignGrid((pi1,), grid.epsilons, (0.5,))
    return average_design(samples, delta_star, sub, grid_size=grid_size)


def synthetic_moment_samples(n: int, seed: int, N: int = 10000, spread: float = 1.5) -> list:
    """Samples whose acceptance probabilities cover (0, 1) like a random-walk trial run.

    ``N * mu`` is the log MH ratio, drawn as ``-|Normal(0, spread)|``-ish
    around zero, and ``sigma_l`` is log-uniform so that the standardized
    spread ``sqrt(N) sigma_l`` ranges over roughly [0.3, 30].
    """
    rng = np.random.default_rng(seed)
    log_ratio = -np.abs(rng.normal(0.0, spread, n)) + rng.normal(0.0, 0.3, n)
    sig = np.exp(rng.uniform(math.log(0.3), math.log(30.0), n)) / math.sqrt(N)
    return [MomentSample(float(lr / N), float(s), int(N)) for lr, s in zip(log_ratio, sig)]


def write_samples(path, samples) -> None:
    with open(path, "w") as fh:
        fh.write("mu,sigma_l,N\n")
        for s in samples:
            fh.write(f"{s.mu:.17g},{s.sigma_l:.17g},{s.N}\n")


def read_samples(path) -> list:
    """Read ``mu,sigma_l,N`` rows; rows with ``sigma_l = 0`` are skipped and logged."""
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["mu", "sigma_l", "N"]:
            raise InvalidArgument(f"{path}: expected header mu,sigma_l,N, got {','.join(header)}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            mu, sig, N = line.split(",")
            if float(sig) == 0.0:
                log.info("%s:%d: constant-l sample excluded", path, lineno)
                continue
            out.append(MomentSample(float(mu), float(sig), int(N)))
    return out


def write_result(path, result: DesignResult) -> None:
    with open(path, "w") as fh:
        fh.write(result.to_text())


def read_result(path) -> DesignResult:
    with open(path) as fh:
        return DesignResult.from_text(fh.read())

"""Target posteriors and their log-likelihood difference populations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidArgument, InvalidMove
from .seqtest import LogLikDiffPopulation

# Proposal scales used for the variable-selection experiment.
SIGMA_UPDATE = 0.01
SIGMA_BIRTH = 0.1


def _log_sigmoid_signed(signs, logits):
    # log sigmoid(s * a) without overflow
    return -np.logaddexp(0.0, -signs * logits)


@dataclass(frozen=True)
class LogisticRegressionModel:
    """Binary logistic regression with a spherical Gaussian prior."""

    features: np.ndarray
    labels: np.ndarray
    prior_precision: float = 10.0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise InvalidArgument("features must be N x D and labels length N")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidArgument("labels must be 0/1")
        if self.prior_precision <= 0:
            raise InvalidArgument("prior_precision must be positive")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_signs", 2.0 * y - 1.0)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.D,):
            raise InvalidArgument(f"theta must have shape ({self.D},), got {theta.shape}")
        return theta

    def loglik_terms(self, theta, idx=None) -> np.ndarray:
        theta = self._check(theta)
        X = self.features if idx is None else self.features[idx]
        s = self._signs if idx is None else self._signs[idx]
        return _log_sigmoid_signed(s, X @ theta)

    def log_likelihood(self, theta) -> float:
        return float(np.sum(self.loglik_terms(theta)))

    def log_prior(self, theta) -> float:
        theta = self._check(theta)
        return -0.5 * self.prior_precision * float(theta @ theta)

    def population(self, theta, theta_prime) -> LogLikDiffPopulation:
        return logistic_lldiff_population(self, theta, theta_prime)

    def predictive(self, theta, X) -> np.ndarray:
        """``p(y = 1 | x, theta)`` for each row of ``X``."""
        return special.expit(np.asarray(X, dtype=float) @ self._check(theta))


def logistic_lldiff_population(model: LogisticRegressionModel, theta, theta_prime) -> LogLikDiffPopulation:
    """``l_i = log p(y_i | x_i, theta') - log p(y_i | x_i, theta)``, evaluated per row."""
    theta = model._check(theta)
    theta_prime = model._check(theta_prime)
    X, s = model.features, model._signs
    delta = theta_prime - theta

    def eval_batch(idx):
        Xi = X[idx]
        a = Xi @ theta
        return _log_sigmoid_signed(s[idx], a + Xi @ delta) - _log_sigmoid_signed(s[idx], a)

    return LogLikDiffPopulation(model.N, eval_batch)


@dataclass(frozen=True)
class Lasso1DModel:
    """One-dimensional L1-regularized linear regression.

    Likelihood ``exp(-lam/2 (y - theta x)^2)`` per point and Laplace prior
    ``exp(-lam0 |theta|)``.
    """

    xs: np.ndarray
    ys: np.ndarray
    lam: float = 3.0
    lam0: float = 4950.0

    def __post_init__(self):
        x = np.asarray(self.xs, dtype=float)
        y = np.asarray(self.ys, dtype=float)
        if x.ndim != 1 or x.shape != y.shape:
            raise InvalidArgument("xs and ys must be matching 1-d arrays")
        if self.lam <= 0 or self.lam0 < 0:
            raise InvalidArgument("lam must be positive and lam0 nonnegative")
        object.__setattr__(self, "xs", x)
        object.__setattr__(self, "ys", y)
        object.__setattr__(self, "_sxx", math.fsum(x * x))
        object.__setattr__(self, "_sxy", math.fsum(x * y))
        object.__setattr__(self, "_syy", math.fsum(y * y))

    @property
    def N(self) -> int:
        return self.xs.size

    def loglik_terms(self, theta: float, idx=None) -> np.ndarray:
        x = self.xs if idx is None else self.xs[idx]
        y = self.ys if idx is None else self.ys[idx]
        r = y - theta * x
        return -0.5 * self.lam * r * r

    def grad_loglik_terms(self, theta: float, idx=None) -> np.ndarray:
        x = self.xs if idx is None else self.xs[idx]
        y = self.ys if idx is None else self.ys[idx]
        return self.lam * x * (y - theta * x)

    def log_prior(self, theta):
        return -self.lam0 * np.abs(theta)

    def grad_log_prior(self, theta):
        # subgradient with sign(0) = 0
        return -self.lam0 * np.sign(theta)

    def logpost(self, theta):
        """Unnormalized log posterior; accepts scalars or arrays."""
        theta = np.asarray(theta, dtype=float)
        rss = self._syy - 2.0 * theta * self._sxy + theta * theta * self._sxx
        out = -0.5 * self.lam * rss + self.log_prior(theta)
        return float(out) if out.ndim == 0 else out

    def grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = self.lam * (self._sxy - theta * self._sxx) + self.grad_log_prior(theta)
        return float(out) if out.ndim == 0 else out

    def population(self, theta: float, theta_prime: float) -> LogLikDiffPopulation:
        lam = self.lam
        x, y = self.xs, self.ys

        def eval_batch(idx):
            xi, yi = x[idx], y[idx]
            r0 = yi - theta * xi
            r1 = yi - theta_prime * xi
            return -0.5 * lam * (r1 * r1 - r0 * r0)

        return LogLikDiffPopulation(self.N, eval_batch)


def lasso1d_logpost(model: Lasso1DModel, theta):
    return model.logpost(theta)


def lasso1d_grad(model: Lasso1DModel, theta):
    return model.grad(theta)


# --- variable selection -----------------------------------------------------

@dataclass(frozen=True)
class VarSelState:
    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        g = np.asarray(self.gamma, dtype=bool)
        if b.shape != g.shape or b.ndim != 1:
            raise InvalidArgument("beta and gamma must be matching 1-d arrays")
        b = np.where(g, b, 0.0)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "gamma", g)

    @property
    def k(self) -> int:
        return int(self.gamma.sum())

    @property
    def D(self) -> int:
        return self.gamma.size

    def l1(self) -> float:
        return float(np.abs(self.beta[self.gamma]).sum())


@dataclass(frozen=True)
class VarSelModel:
    """Logistic regression with reversible-jump variable selection.

    The coefficient prior is Laplace with scale ``nu``; ``nu`` carries an
    inverse-gamma(``nu_shape``, ``nu_scale``) hyperprior and is integrated out.
    With ``nu_shape = nu_scale = 0`` (the ``1/nu`` hyperprior) the integrated
    log prior is ``-k log||beta||_1 + k log lam + log B(k, D - k + 1)``, an
    improper density with a pole at ``beta = 0``; a positive scale makes it
    proper.
    """

    features: np.ndarray
    labels: np.ndarray
    lam: float = 1e-10
    nu_shape: float = 0.0
    nu_scale: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise InvalidArgument("features must be N x D and labels length N")
        if self.lam <= 0 or self.nu_shape < 0 or self.nu_scale < 0:
            raise InvalidArgument("lam must be positive, nu hyperparameters nonnegative")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "_signs", 2.0 * y - 1.0)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def loglik_terms(self, state: VarSelState, idx=None) -> np.ndarray:
        X = self.features if idx is None else self.features[idx]
        s = self._signs if idx is None else self._signs[idx]
        return _log_sigmoid_signed(s, X @ state.beta)

    def log_likelihood(self, state: VarSelState) -> float:
        return float(np.sum(self.loglik_terms(state)))

    def log_prior_k(self, k: int, l1: float) -> float:
        D, a, b = self.D, self.nu_shape, self.nu_scale
        if not 1 <= k <= D:
            return -math.inf
        out = k * math.log(self.lam) + float(special.betaln(k, D - k + 1))
        out += float(special.gammaln(k + a) - special.gammaln(k))
        s = l1 + b
        out -= (k + a) * math.log(s) if s > 0 else -math.inf
        return out

    def log_prior(self, state: VarSelState) -> float:
        return self.log_prior_k(state.k, state.l1())

    def predictive(self, state: VarSelState, X) -> np.ndarray:
        return special.expit(np.asarray(X, dtype=float) @ state.beta)

    def population(self, state: VarSelState, proposed: VarSelState) -> LogLikDiffPopulation:
        X, s = self.features, self._signs
        b0, b1 = state.beta, proposed.beta

        def eval_batch(idx):
            Xi, si = X[idx], s[idx]
            return _log_sigmoid_signed(si, Xi @ b1) - _log_sigmoid_signed(si, Xi @ b0)

        return LogLikDiffPopulation(self.N, eval_batch)


MOVES = ("update", "birth", "death")


def legal_moves(k: int, D: int) -> tuple:
    """Moves available at model size ``k``: update always, birth for k < D, death for k > 1."""
    out = ["update"]
    if k < D:
        out.append("birth")
    if k > 1:
        out.append("death")
    return tuple(out)


def log_move_prob(move: str, k: int, D: int) -> float:
    """``log p(gamma -> gamma')`` for one specific birth or death target.

    A move type is chosen uniformly among the legal ones, then a component
    uniformly among the eligible ones.
    """
    moves = legal_moves(k, D)
    if move not in moves:
        raise InvalidMove(f"{move} is not legal at k={k}, D={D}")
    pick = -math.log(len(moves))
    if move == "birth":
        return pick - math.log(D - k)
    if move == "death":
        return pick - math.log(k)
    return pick - math.log(k)


def _log_normal_pdf(x: float, sd: float) -> float:
    return -0.5 * (x / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)


def varsel_mu0(move: str, state: VarSelState, proposed: VarSelState, u: float,
               model: VarSelModel, sigma_birth: float = SIGMA_BIRTH) -> float:
    """Move-specific MH threshold for reversible-jump variable selection.

    ``(1/N) log[u rho(theta) q(theta'|theta) / (rho(theta') q(theta|theta'))]``
    with the birth proposal density ``N(beta_j | 0, sigma_birth)`` and the move
    probabilities of :func:`log_move_prob`.
    """
    k, D = state.k, state.D
    if move not in legal_moves(k, D):
        raise InvalidMove(f"{move} is not legal at k={k}, D={D}")
    if not 0.0 < u <= 1.0:
        raise InvalidArgument(f"u must lie in (0, 1], got {u}")
    expected_k = {"update": k, "birth": k + 1, "death": k - 1}[move]
    if proposed.k != expected_k:
        raise InvalidMove(f"{move} from k={k} cannot produce k={proposed.k}")
    log_ratio = model.log_prior(state) - model.log_prior(proposed)
    if move == "birth":
        j = int(np.flatnonzero(proposed.gamma & ~state.gamma)[0])
        fwd = log_move_prob("birth", k, D) + _log_normal_pdf(proposed.beta[j], sigma_birth)
        rev = log_move_prob("death", k + 1, D)
        log_ratio += fwd - rev
    elif move == "death":
        j = int(np.flatnonzero(state.gamma & ~proposed.gamma)[0])
        fwd = log_move_prob("death", k, D)
        rev = log_move_prob("birth", k - 1, D) + _log_normal_pdf(state.beta[j], sigma_birth)
        log_ratio += fwd - rev
    return (math.log(u) + log_ratio) / model.N


# --- synthetic data ---------------------------------------------------------

def synth_logistic_data(n: int, d: int, seed: int, n_test: int = 0, scale_decay: float = 0.1):
    """Features with PCA-like decaying scales and labels from a random truth.

    Returns ``(X, y, X_test, y_test, theta_true)``.
    """
    rng = np.random.default_rng(seed)
    scales = np.geomspace(1.0, scale_decay, d) if d > 1 else np.ones(1)
    theta_true = rng.normal(0.0, 1.0, d) / scales / math.sqrt(d)
    total = n + n_test
    X = rng.normal(size=(total, d)) * scales
    p = special.expit(X @ theta_true)
    y = (rng.random(total) < p).astype(float)
    return X[:n], y[:n], X[n:], y[n:], theta_true


def synth_logistic_dataset(n: int, d: int, seed: int, prior_precision: float = 10.0) -> LogisticRegressionModel:
    X, y, _, _, _ = synth_logistic_data(n, d, seed)
    return LogisticRegressionModel(X, y, prior_precision)


def synth_lasso_dataset(seed: int, n: int = 10000, lam: float = 3.0, lam0: float = 4950.0) -> Lasso1DModel:
    """``y = 0.5 x + xi`` with ``xi ~ N(0, 1/3)`` (variance) and ``x ~ U(-1, 1)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, n)
    y = 0.5 * x + rng.normal(0.0, math.sqrt(1.0 / 3.0), n)
    return Lasso1DModel(x, y, lam, lam0)


def synth_varsel_data(n: int, d: int, seed: int, coef=None):
    """Design with a leading constant column and a sparse true coefficient vector."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d - 1))]) if d > 1 else np.ones((n, 1))
    if coef is None:
        coef = np.zeros(d)
        coef[: min(d, 3)] = [0.5, 1.5, -1.0][: min(d, 3)]
    coef = np.asarray(coef, dtype=float)
    y = (rng.random(n) < special.expit(X @ coef)).astype(float)
    return X, y


def save_dataset(path, X, y) -> None:
    """One row per datapoint, label in the last column."""
    data = np.column_stack([np.asarray(X, dtype=float), np.asarray(y, dtype=float)])
    np.savetxt(path, data, delimiter=",", fmt="%.17g")


def load_dataset(path):
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    return data[:, :-1], data[:, -1]

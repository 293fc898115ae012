"""Target distributions exposed through their score ``grad log p``.

Scores are written against the small op set in :mod:`ksivi.tensor`, so the
same code evaluates on plain ndarrays (fast, for MCMC and metrics) and on
tensors (so reparameterized samples can be differentiated *through* the
target score during training).  Row-batches ``(n, d)`` are the native layout;
numpy callers may also pass a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import tensor as tn
from .tensor import Tensor, as_array

__all__ = [
    "ScoreTarget",
    "StandardNormal",
    "Banana",
    "GaussianMixture",
    "StudentTProduct",
    "LogisticRegression",
    "ConditionedDiffusion",
    "Tempered",
    "AnnealedPath",
    "multimodal",
    "x_shaped",
    "eight_gaussians",
    "synthesize_logreg",
    "tempered_score",
    "annealed_score",
]


def _rows(x):
    """Promote a numpy vector to a one-row batch; report whether we did."""
    if isinstance(x, Tensor):
        if x.ndim != 2:
            raise ValueError("tensor inputs must be (n, d) row batches")
        return x, False
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _unrow(out, single: bool):
    if single:
        return out[0]
    return out


def _column(d: int, j: int) -> np.ndarray:
    e = np.zeros((d, 1))
    e[j, 0] = 1.0
    return e


class ScoreTarget:
    """Base class: subclasses implement ``_score`` and ``_log_density`` on row batches."""

    dim: int

    def score(self, x):
        """``grad log p`` at ``x`` (vector, row batch, or tensor batch)."""
        X, single = _rows(x)
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        return _unrow(self._score(X), single)

    def log_density(self, x):
        """Unnormalized ``log p`` at ``x`` (numpy only)."""
        X, single = _rows(as_array(x))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {X.shape[1]}")
        out = self._log_density(X)
        return float(out[0]) if single else out

    def _score(self, X):
        raise NotImplementedError

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no log-density")

    @property
    def has_log_density(self) -> bool:
        return type(self)._log_density is not ScoreTarget._log_density

    def sample(self, n: int, rng=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact sampler")


@dataclass(frozen=True)
class StandardNormal(ScoreTarget):
    dim: int = 2

    def _score(self, X):
        return X * -1.0

    def _log_density(self, X):
        return -0.5 * np.sum(X * X, axis=1)

    def sample(self, n, rng=None):
        return np.random.default_rng(rng).standard_normal((n, self.dim))


@dataclass(frozen=True)
class Banana(ScoreTarget):
    """Pushforward of ``N(0, cov)`` under ``v -> (v1, v1^2 + v2 + 1)``."""

    cov: tuple = ((1.0, 0.9), (0.9, 1.0))
    dim: int = 2

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(np.array(self.cov))

    def _score(self, X):
        P = self.precision
        x1 = X @ _column(2, 0)
        x2 = X @ _column(2, 1)
        v1 = x1
        v2 = x2 - x1 * x1 - 1.0
        g1 = (v1 * P[0, 0] + v2 * P[0, 1]) * -1.0
        g2 = (v1 * P[1, 0] + v2 * P[1, 1]) * -1.0
        s1 = g1 - x1 * g2 * 2.0
        return s1 @ np.array([[1.0, 0.0]]) + g2 @ np.array([[0.0, 1.0]])

    def _log_density(self, X):
        v = np.column_stack([X[:, 0], X[:, 1] - X[:, 0] ** 2 - 1.0])
        return -0.5 * np.einsum("ni,ij,nj->n", v, self.precision, v)

    def sample(self, n, rng=None):
        v = np.random.default_rng(rng).multivariate_normal(np.zeros(2), np.array(self.cov), size=n)
        return np.column_stack([v[:, 0], v[:, 0] ** 2 + v[:, 1] + 1.0])


@dataclass(frozen=True)
class GaussianMixture(ScoreTarget):
    weights: tuple
    means: tuple
    covs: tuple

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2 or covs.shape != (len(means), means.shape[1], means.shape[1]):
            raise ValueError("means must be (K, d) and covs (K, d, d)")
        if len(w) != len(means) or np.any(w <= 0):
            raise ValueError("need one positive weight per component")
        object.__setattr__(self, "dim", int(means.shape[1]))

    def _components(self):
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covs, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        w = w / w.sum()
        precs = np.linalg.inv(covs)
        logdets = np.linalg.slogdet(covs)[1]
        return w, means, precs, logdets

    def _score(self, X):
        w, means, precs, logdets = self._components()
        logits, grads = [], []
        for k in range(len(w)):
            diff = X - means[k]
            pd = diff @ precs[k]
            logits.append(tn.sum(pd * diff, axis=1, keepdims=True) * -0.5 + (np.log(w[k]) - 0.5 * logdets[k]))
            grads.append(pd * -1.0)
        # constant shift for a stable softmax; it cancels exactly in the ratio
        shift = np.max(np.hstack([as_array(a) for a in logits]), axis=1, keepdims=True)
        num, den = None, None
        for a, g in zip(logits, grads):
            e = tn.exp(a - shift)
            num = e * g if num is None else num + e * g
            den = e if den is None else den + e
        return num / den

    def _log_density(self, X):
        w, means, precs, logdets = self._components()
        terms = []
        for k in range(len(w)):
            diff = X - means[k]
            terms.append(-0.5 * np.einsum("ni,ij,nj->n", diff, precs[k], diff) + np.log(w[k]) - 0.5 * logdets[k])
        return logsumexp(np.column_stack(terms), axis=1)

    def sample(self, n, rng=None):
        rng = np.random.default_rng(rng)
        w, means, _, _ = self._components()
        covs = np.asarray(self.covs, dtype=np.float64)
        comp = rng.choice(len(w), size=n, p=w)
        out = np.empty((n, self.dim))
        for k in range(len(w)):
            idx = comp == k
            out[idx] = rng.multivariate_normal(means[k], covs[k], size=int(idx.sum()))
        return out


def multimodal() -> GaussianMixture:
    I = np.eye(2).tolist()
    return GaussianMixture(weights=(0.5, 0.5), means=((-2.0, 0.0), (2.0, 0.0)), covs=(I, I))


def x_shaped() -> GaussianMixture:
    return GaussianMixture(
        weights=(0.5, 0.5),
        means=((0.0, 0.0), (0.0, 0.0)),
        covs=(((2.0, 1.8), (1.8, 2.0)), ((2.0, -1.8), (-1.8, 2.0))),
    )


def eight_gaussians(radius: float = 10.0, std: float = 1.0) -> GaussianMixture:
    ang = np.arange(1, 9) * np.pi / 4
    means = tuple(map(tuple, radius * np.column_stack([np.cos(ang), np.sin(ang)])))
    cov = (std**2 * np.eye(2)).tolist()
    return GaussianMixture(weights=(0.125,) * 8, means=means, covs=(cov,) * 8)


@dataclass(frozen=True)
class StudentTProduct(ScoreTarget):
    """Independent Student-t coordinates with ``nu`` degrees of freedom."""

    nu: float = 2.0
    dim: int = 2

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"degrees of freedom must be positive, got {self.nu}")

    def _score(self, X):
        return X * -(self.nu + 1.0) / (X * X + self.nu)

    def _log_density(self, X):
        return -0.5 * (self.nu + 1.0) * np.sum(np.log1p(X * X / self.nu), axis=1)

    def sample(self, n, rng=None):
        return np.random.default_rng(rng).standard_t(self.nu, size=(n, self.dim))


@dataclass(frozen=True, eq=False)
class LogisticRegression(ScoreTarget):
    """Posterior over coefficients ``beta`` with prior ``N(0, I / alpha)``.

    ``covariates`` already carry the intercept column.
    """

    covariates: np.ndarray
    labels: np.ndarray
    alpha: float = 0.01

    def __post_init__(self):
        Xb = np.atleast_2d(np.asarray(self.covariates, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if Xb.shape[0] != y.shape[0]:
            raise ValueError("covariates and labels disagree on the number of rows")
        if Xb.shape[1] < 1:
            raise ValueError("empty covariate dimension")
        if not self.alpha > 0:
            raise ValueError("prior precision must be positive")
        object.__setattr__(self, "covariates", Xb)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "dim", int(Xb.shape[1]))

    def _score(self, B):
        Xb, y = self.covariates, self.labels
        prior = B * -self.alpha
        if len(y) == 0:
            return prior
        logits = B @ Xb.T
        prob = tn.sigmoid(logits)
        return prior + (prob * -1.0 + y) @ Xb

    def _log_density(self, B):
        logits = B @ self.covariates.T
        ll = np.sum(self.labels * logits - np.logaddexp(0.0, logits), axis=1)
        return ll - 0.5 * self.alpha * np.sum(B * B, axis=1)


def synthesize_logreg(n: int, d: int, seed=None, alpha: float = 0.01) -> LogisticRegression:
    """Synthetic logistic-regression posterior with ``d`` features plus intercept."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d + 1) / np.sqrt(d + 1)
    X = rng.standard_normal((n, d))
    Xb = np.column_stack([np.ones(n), X])
    y = (rng.uniform(size=n) < expit(Xb @ beta)).astype(np.float64)
    return LogisticRegression(Xb, y, alpha=alpha)


@dataclass(frozen=True, eq=False)
class ConditionedDiffusion(ScoreTarget):
    """Euler-Maruyama path of ``dx = a x (1 - x^2) dt + dw`` given noisy observations.

    ``observations[k]`` is the noisy value of the path at 1-based step
    ``obs_every * (k + 1)``.  The path starts from ``x = 0`` at time 0.
    """

    observations: np.ndarray
    dim: int = 100
    dt: float = 0.01
    drift: float = 10.0
    obs_std: float = 0.1
    obs_every: int = 5

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64).reshape(-1)
        if len(obs) != self.dim // self.obs_every:
            raise ValueError(f"expected {self.dim // self.obs_every} observations, got {len(obs)}")
        object.__setattr__(self, "observations", obs)
        shift = np.zeros((self.dim, self.dim))
        shift[np.arange(self.dim - 1), np.arange(1, self.dim)] = 1.0
        mask = np.zeros(self.dim)
        idx = self.obs_indices
        mask[idx] = 1.0
        full = np.zeros(self.dim)
        full[idx] = obs
        object.__setattr__(self, "_shift", shift)
        object.__setattr__(self, "_mask", mask)
        object.__setattr__(self, "_obs_full", full)

    @property
    def obs_indices(self) -> np.ndarray:
        return np.arange(self.obs_every - 1, self.dim, self.obs_every)

    def _mean_map(self, U):
        return U + (U - U**3) * (self.drift * self.dt)

    def _score(self, X):
        prev = X @ self._shift
        resid = X - self._mean_map(prev)
        slope = (X * X * (-3.0 * self.drift * self.dt)) + (1.0 + self.drift * self.dt)
        prior = resid * (-1.0 / self.dt) + (resid @ self._shift.T) * slope * (1.0 / self.dt)
        lik = (X - self._obs_full) * self._mask * (-1.0 / self.obs_std**2)
        return prior + lik

    def _log_density(self, X):
        prev = X @ self._shift
        resid = X - self._mean_map(prev)
        prior = -0.5 * np.sum(resid**2, axis=1) / self.dt
        obs = X[:, self.obs_indices] - self.observations
        return prior - 0.5 * np.sum(obs**2, axis=1) / self.obs_std**2

    def log_prior(self, X) -> np.ndarray:
        X, _ = _rows(X)
        resid = X - self._mean_map(X @ self._shift)
        return -0.5 * np.sum(resid**2, axis=1) / self.dt

    @classmethod
    def simulate(
        cls,
        dim: int = 100,
        seed=None,
        dt: float | None = None,
        drift: float = 10.0,
        obs_std: float = 0.1,
        obs_every: int = 5,
    ) -> "ConditionedDiffusion":
        """Draw one path from the discretized prior and observe it with noise.

        ``dt`` defaults to ``1 / dim`` so the path covers the unit time interval.
        """
        dt = 1.0 / dim if dt is None else dt
        rng = np.random.default_rng(seed)
        path = np.empty(dim)
        x = 0.0
        for k in range(dim):
            x = x + drift * x * (1.0 - x * x) * dt + np.sqrt(dt) * rng.standard_normal()
            path[k] = x
        idx = np.arange(obs_every - 1, dim, obs_every)
        obs = path[idx] + obs_std * rng.standard_normal(len(idx))
        return cls(obs, dim=dim, dt=dt, drift=drift, obs_std=obs_std, obs_every=obs_every)


@dataclass(frozen=True, eq=False)
class Tempered(ScoreTarget):
    """``p^(1/tau)``: score scaled by ``1/tau``."""

    base: ScoreTarget
    tau: float = 1.0

    def __post_init__(self):
        if self.tau < 1.0:
            raise ValueError(f"temperature must be >= 1, got {self.tau}")
        object.__setattr__(self, "dim", self.base.dim)

    def _score(self, X):
        s = self.base._score(X)
        return s if self.tau == 1.0 else s * (1.0 / self.tau)

    def _log_density(self, X):
        return self.base._log_density(X) / self.tau


def tempered_score(target: ScoreTarget, tau: float, x):
    return Tempered(target, tau).score(x)


@dataclass(eq=False)
class AnnealedPath:
    """Geometric bridge ``p_t ~ base^(1 - lam_t) * target^lam_t``, ``lam_t = 1 - t / T``."""

    target: ScoreTarget
    layers: int
    base: ScoreTarget | None = None
    lambdas: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.base is None:
            self.base = StandardNormal(self.target.dim)
        if self.lambdas is None:
            self.lambdas = 1.0 - np.arange(self.layers) / self.layers
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        if len(self.lambdas) != self.layers or self.lambdas[0] != 1.0:
            raise ValueError("schedule needs one value per layer, starting at 1")

    @property
    def dim(self) -> int:
        return self.target.dim

    def score(self, t: int, x):
        if not 0 <= t < self.layers:
            raise IndexError(f"layer {t} outside 0..{self.layers - 1}")
        lam = float(self.lambdas[t])
        if lam == 1.0:
            return self.target.score(x)
        if lam == 0.0:
            return self.base.score(x)
        return self.base.score(x) * (1.0 - lam) + self.target.score(x) * lam

    def layer_target(self, t: int) -> "_LayerTarget":
        return _LayerTarget(self, t)


@dataclass(frozen=True, eq=False)
class _LayerTarget(ScoreTarget):
    path: AnnealedPath
    t: int

    def __post_init__(self):
        object.__setattr__(self, "dim", self.path.dim)

    def score(self, x):
        return self.path.score(self.t, x)


def annealed_score(path: AnnealedPath, t: int, x):
    return path.score(t, x)

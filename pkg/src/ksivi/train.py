"""Optimizers, stabilizers and the KSIVI / HKSIVI training loops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import tensor as tn
from .kernels import Kernel, make_kernel
from .objective import (
    NonFiniteGradient,
    grad_ustat,
    grad_vanilla,
    ksd_loss,
    ksd_loss_ustat,
    ksd_value_ustat,
    make_batch,
    witness,
)
from .tensor import backward, flatten
from .targets import AnnealedPath, Tempered

__all__ = [
    "OptimizerState",
    "TrainSchedule",
    "HkSchedule",
    "TrainState",
    "TrainResult",
    "TrainingDiverged",
    "clip_gradient",
    "ema_update",
    "temperature_at",
    "train_ksivi",
    "train_hksivi",
    "jacobian_norm_probe",
    "KSIVI",
    "HKSIVI",
]

MAX_BAD_STEPS = 10


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite steps; carries a state dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD or Adam with per-parameter moment buffers.

    ``step(params, grad)`` takes the flat gradient vector (ordered like
    ``params``) and updates the tensors in place.
    """

    variant: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.variant!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def _split(self, params, grad):
        grad = np.asarray(grad, dtype=np.float64)
        sizes = [p.data.size for p in params]
        if grad.shape != (sum(sizes),):
            raise ValueError(f"gradient length {grad.size} does not match {sum(sizes)} parameters")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("optimizer received a non-finite gradient")
        out, at = [], 0
        for p, s in zip(params, sizes):
            out.append(grad[at : at + s].reshape(p.data.shape))
            at += s
        return out

    def step(self, params, grad) -> None:
        grads = self._split(params, grad)
        self.count += 1
        if self.variant == "sgd":
            for p, g in zip(params, grads):
                p.data = p.data - self.lr * g
            return
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        c1 = 1.0 - self.beta1**self.count
        c2 = 1.0 - self.beta2**self.count
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "variant": self.variant,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "count": self.count,
        }


def clip_gradient(grad, threshold: float) -> np.ndarray:
    """Rescale ``grad`` onto the ball of radius ``threshold`` if it lies outside."""
    if not threshold > 0:
        raise ValueError("clip threshold must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= threshold:
        return grad
    return grad * (threshold / norm)


def ema_update(shadow, current, decay: float):
    """``decay * shadow + (1 - decay) * current`` (arrays or lists of arrays)."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must lie in [0, 1)")
    if isinstance(shadow, list):
        return [ema_update(s, c, decay) for s, c in zip(shadow, current)]
    return decay * np.asarray(shadow) + (1.0 - decay) * np.asarray(current)


# -- schedules ---------------------------------------------------------------


@dataclass
class TrainSchedule:
    iterations: int = 50_000
    batch_size: int = 100
    estimator: str = "vanilla"
    lr: float = 1e-3
    optimizer: str = "adam"
    clip: float | None = None
    ema_decay: float | None = None
    temperature_start: float | None = None
    temperature_fraction: float = 0.5
    log_every: int = 100
    log_batch: int = 500
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        for name in ("iterations", "batch_size", "lr", "log_every", "log_batch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.estimator not in ("vanilla", "u-stat"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "u-stat" and self.batch_size < 2:
            raise ValueError("u-stat estimator needs batch_size >= 2")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.temperature_start is not None and self.temperature_start < 1.0:
            raise ValueError("temperature_start must be >= 1")
        if not 0.0 < self.temperature_fraction <= 1.0:
            raise ValueError("temperature_fraction must lie in (0, 1]")


@dataclass
class HkSchedule(TrainSchedule):
    layers: int = 5
    weights: tuple | None = None
    sigma_ini: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.weights is None:
            self.weights = (1.0,) * self.layers
        self.weights = tuple(float(b) for b in self.weights)
        if len(self.weights) != self.layers:
            raise ValueError("need one weight per layer")
        if any(b < 0 for b in self.weights) or not any(b > 0 for b in self.weights):
            raise ValueError("layer weights must be non-negative and not all zero")
        if not self.sigma_ini > 0:
            raise ValueError("sigma_ini must be positive")


def temperature_at(schedule: TrainSchedule, iteration: int) -> float:
    """Linear decay from ``temperature_start`` to 1 over the first fraction of training."""
    if schedule.temperature_start is None:
        return 1.0
    span = schedule.temperature_fraction * schedule.iterations
    frac = min(1.0, iteration / span)
    return max(1.0, schedule.temperature_start + (1.0 - schedule.temperature_start) * frac)


# -- loop state --------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    iteration: int
    optimizer: OptimizerState
    rng: np.random.Generator
    ema: list | None = None
    bad_streak: int = 0
    bad_total: int = 0


@dataclass
class TrainResult:
    family: object
    trace: list
    state: TrainState
    elapsed: float = 0.0

    def ema_parameters(self):
        return self.state.ema


def _new_state(params, schedule: TrainSchedule) -> TrainState:
    opt = OptimizerState(schedule.optimizer, schedule.lr)
    ema = [p.data.copy() for p in params] if schedule.ema_decay is not None else None
    return TrainState(0, opt, np.random.default_rng(schedule.seed), ema)


def _dump(params, names, state: TrainState, last) -> dict:
    return {
        "iteration": state.iteration,
        "bad_streak": state.bad_streak,
        "last_loss": last,
        "parameters": {n: p.data.copy() for n, p in zip(names, params)},
    }


def _apply(params, names, grad, loss, schedule, state: TrainState) -> float:
    """Clip, step, EMA; handles the non-finite policy.  Returns the gradient norm used."""
    if grad is None or not np.all(np.isfinite(grad)) or not np.isfinite(loss):
        state.bad_streak += 1
        state.bad_total += 1
        if state.bad_streak >= MAX_BAD_STEPS:
            raise TrainingDiverged(
                f"{state.bad_streak} consecutive non-finite steps at iteration {state.iteration}",
                _dump(params, names, state, loss),
            )
        grad = np.zeros(sum(p.data.size for p in params))
    else:
        state.bad_streak = 0
    norm = float(np.linalg.norm(grad))
    if schedule.clip is not None:
        grad = clip_gradient(grad, schedule.clip)
    state.optimizer.step(params, grad)
    if state.ema is not None:
        state.ema = ema_update(state.ema, [p.data for p in params], schedule.ema_decay)
    return norm


def _log_rng(seed: int, iteration: int) -> np.random.Generator:
    # stateless per log event so logging never shifts the training stream
    return np.random.default_rng([int(seed), 7919, int(iteration)])


def _monitor(kernel, family, score, n, rng, probe):
    batch = family.batch_draw(n, rng, score)
    k = kernel.adapted(batch.x_np)
    value = ksd_value_ustat(k, batch)
    w = witness(k, batch, probe)
    return value, float(np.linalg.norm(w)), getattr(k, "bandwidth", None)


def _fmt_bw(bw):
    return float("nan") if bw is None else float(bw)


def train_ksivi(family, target, kernel: Kernel, schedule: TrainSchedule, state=None, probe=None, callback=None):
    """Fit ``family`` to ``target`` by stochastic descent on the KSD objective.

    Returns a :class:`TrainResult`.  Pass the ``state`` of a previous result
    (or one restored from a checkpoint) to continue the same run.
    ``callback(iteration, family)`` runs at every logged iteration.
    """
    if family.dim != target.dim:
        raise ValueError(f"family dimension {family.dim} != target dimension {target.dim}")
    params = family.parameters
    names = [n for n, _ in family.named_parameters()]
    state = _new_state(params, schedule) if state is None else state
    probe = np.zeros(family.dim) if probe is None else np.asarray(probe, dtype=np.float64)
    estimate = grad_vanilla if schedule.estimator == "vanilla" else grad_ustat
    trace = []
    start = time.perf_counter()
    while state.iteration < schedule.iterations:
        it = state.iteration
        tau = temperature_at(schedule, it)
        tgt = target if tau == 1.0 else Tempered(target, tau)
        loss = float("nan")
        try:
            est = estimate(kernel, family, tgt, schedule.batch_size, state.rng)
            grad, loss = est.vector, est.loss
        except (NonFiniteGradient, FloatingPointError):
            grad = None
        norm = _apply(params, names, grad, loss, schedule, state)
        state.iteration += 1
        if it % schedule.log_every == 0 or state.iteration == schedule.iterations:
            value, wnorm, bw = _monitor(
                kernel, family, target.score, schedule.log_batch, _log_rng(schedule.seed, it), probe
            )
            row = {
                "iteration": it,
                "ksd_ustat": value,
                "grad_norm": norm,
                "witness_norm": wnorm,
                "bandwidth": _fmt_bw(bw),
            }
            if schedule.timing:
                row["elapsed_seconds"] = time.perf_counter() - start
            trace.append(row)
            if callback is not None:
                callback(it, family)
    return TrainResult(family, trace, state, time.perf_counter() - start)


def _hier_batch(hfamily, n, rng):
    x_top = rng.standard_normal((n, hfamily.dim))
    noises = [rng.standard_normal((n, hfamily.dim)) for _ in range(hfamily.layers)]
    traj, _ = hfamily.hier_draw(x_top, noises)
    return traj, noises


def hksivi_loss(hfamily, path: AnnealedPath, kernel: Kernel, batches, estimator: str, weights):
    """Weighted sum of per-layer KSD losses on the tape.

    ``batches`` holds one or two ``(trajectory, noises)`` pairs from the
    current parameters.  Layer ``t`` sees the detached sample ``x_{t+1}`` as
    its mixing draw.  Returns the loss tensor and per-layer (loss, bandwidth).
    """
    total = None
    layers = []
    T = hfamily.layers
    for t in range(T - 1, -1, -1):
        beta = weights[t]
        if beta == 0.0:
            continue
        i = T - 1 - t
        fam = hfamily.layer(t)
        score = path.layer_target(t).score
        drawn = [make_batch(fam, traj[i], noises[i], score) for traj, noises in batches]
        k = kernel.adapted(np.vstack([b.x_np for b in drawn]))
        if estimator == "vanilla":
            term = ksd_loss(k, drawn[0], drawn[1])
        else:
            term = ksd_loss_ustat(k, drawn[0])
        layers.append((t, float(term.data), getattr(k, "bandwidth", None)))
        if beta != 1.0:
            term = term * beta
        total = term if total is None else total + term
    return total, layers


def train_hksivi(
    hfamily, path: AnnealedPath, kernel: Kernel, schedule: HkSchedule, state=None, probe=None, callback=None
):
    """Train a hierarchical family against the annealed path, all layers jointly.

    ``callback(iteration, hfamily)`` runs at every logged iteration.
    """
    if path.layers != hfamily.layers or schedule.layers != hfamily.layers:
        raise ValueError("path, schedule and hierarchy must agree on the layer count")
    params = hfamily.parameters
    names = [n for n, _ in hfamily.named_parameters()]
    state = _new_state(params, schedule) if state is None else state
    probe = np.zeros(hfamily.dim) if probe is None else np.asarray(probe, dtype=np.float64)
    n_batches = 2 if schedule.estimator == "vanilla" else 1
    trace = []
    start = time.perf_counter()
    while state.iteration < schedule.iterations:
        it = state.iteration
        batches = [_hier_batch(hfamily, schedule.batch_size, state.rng) for _ in range(n_batches)]
        loss_value, grad, layers = float("nan"), None, []
        try:
            loss, layers = hksivi_loss(hfamily, path, kernel, batches, schedule.estimator, schedule.weights)
            loss_value = float(loss.data)
            if loss.requires_grad:
                grads = backward(loss)
                grad = flatten([grads.get(p, np.zeros_like(p.data)) for p in params])
            else:
                grad = np.zeros(sum(p.data.size for p in params))
        except FloatingPointError:
            grad = None
        norm = _apply(params, names, grad, loss_value, schedule, state)
        state.iteration += 1
        if it % schedule.log_every == 0 or state.iteration == schedule.iterations:
            rng = _log_rng(schedule.seed, it)
            traj, noises = _hier_batch(hfamily, schedule.log_batch, rng)
            fam0 = hfamily.layer(0)
            final = make_batch(fam0, traj[-2], noises[-1], path.target.score)
            k = kernel.adapted(final.x_np)
            row = {
                "iteration": it,
                "ksd_ustat": ksd_value_ustat(k, final),
                "grad_norm": norm,
                "witness_norm": float(np.linalg.norm(witness(k, final, probe))),
                "bandwidth": _fmt_bw(getattr(k, "bandwidth", None)),
            }
            if schedule.timing:
                row["elapsed_seconds"] = time.perf_counter() - start
            for t, value, bw in sorted(layers):
                row[f"layer{t}_ksd"] = value
                row[f"layer{t}_bandwidth"] = _fmt_bw(bw)
            trace.append(row)
            if callback is not None:
                callback(it, hfamily)
    return TrainResult(hfamily, trace, state, time.perf_counter() - start)


# -- diagnostics -------------------------------------------------------------


def jacobian_norm_probe(family, z_samples) -> tuple[float, float, float]:
    """Frobenius norm of ``d mu(z) / d phi`` at each probe ``z``: (min, median, max).

    Uses one backward pass per output coordinate.  Only mean-network
    parameters enter (``sigma`` does not affect ``mu``).
    """
    Z = np.atleast_2d(np.asarray(z_samples, dtype=np.float64))
    if Z.shape[0] < 1:
        raise ValueError("need at least one probe point")
    params = [p for n, p in family.named_parameters() if n.startswith("mean.")]
    norms = []
    for z in Z:
        mu = family.mean(z[None, :])
        total = 0.0
        for j in range(mu.shape[1]):
            out = tn.sum(mu * _unit(mu.shape, j))
            if not out.requires_grad:
                continue
            g = backward(out)
            total += sum(float(np.sum(g[p] ** 2)) for p in params if p in g)
        norms.append(np.sqrt(total))
    norms = np.asarray(norms)
    return float(norms.min()), float(np.median(norms)), float(norms.max())


def _unit(shape, j):
    e = np.zeros(shape)
    e[:, j] = 1.0
    return e


# -- estimator front-ends ----------------------------------------------------


def _resolve_kernel(kernel, kernel_params):
    if isinstance(kernel, Kernel):
        return kernel
    params = dict(kernel_params or {})
    if kernel == "rbf":
        params.setdefault("heuristic", "svgd")
    return make_kernel(kernel, **params)


class KSIVI(BaseEstimator):
    """Kernel semi-implicit variational inference as a fit/sample estimator.

    ``fit(target)`` trains a semi-implicit family against a score target
    (any object with ``dim`` and ``score``); ``sample(n)`` draws from the
    fitted marginal.
    """

    def __init__(
        self,
        mixing_dim=3,
        hidden=(50, 50),
        init_std=1.0,
        kernel="rbf",
        kernel_params=None,
        estimator="vanilla",
        iterations=50_000,
        batch_size=100,
        lr=1e-3,
        optimizer="adam",
        clip=None,
        ema_decay=None,
        temperature_start=None,
        log_every=100,
        seed=0,
    ):
        self.mixing_dim = mixing_dim
        self.hidden = hidden
        self.init_std = init_std
        self.kernel = kernel
        self.kernel_params = kernel_params
        self.estimator = estimator
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.clip = clip
        self.ema_decay = ema_decay
        self.temperature_start = temperature_start
        self.log_every = log_every
        self.seed = seed

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(
            iterations=self.iterations,
            batch_size=self.batch_size,
            estimator=self.estimator,
            lr=self.lr,
            optimizer=self.optimizer,
            clip=self.clip,
            ema_decay=self.ema_decay,
            temperature_start=self.temperature_start,
            log_every=self.log_every,
            seed=self.seed,
        )

    def fit(self, target, y=None):
        from .family import SemiImplicitFamily

        schedule = self._schedule()
        init_rng = np.random.default_rng([int(self.seed), 1])
        self.family_ = SemiImplicitFamily(
            target.dim, self.mixing_dim, self.hidden, init_std=self.init_std, rng=init_rng
        )
        self.kernel_ = _resolve_kernel(self.kernel, self.kernel_params)
        result = train_ksivi(self.family_, target, self.kernel_, schedule)
        self.trace_ = result.trace
        self.state_ = result.state
        self.n_features_in_ = target.dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "family_"):
            raise RuntimeError("estimator is not fitted; call fit(target) first")

    def sample(self, n, rng=None):
        self._check_fitted()
        return self.family_.sample(int(n), self.seed if rng is None else rng)


class HKSIVI(BaseEstimator):
    """Hierarchical variant: a stack of residual Langevin-style layers on an annealed path."""

    def __init__(
        self,
        layers=5,
        hidden=(50, 50),
        sigma_ini=1.0,
        kernel="rbf",
        kernel_params=None,
        estimator="vanilla",
        iterations=20_000,
        batch_size=100,
        lr=1e-3,
        optimizer="adam",
        clip=None,
        weights=None,
        log_every=100,
        seed=0,
    ):
        self.layers = layers
        self.hidden = hidden
        self.sigma_ini = sigma_ini
        self.kernel = kernel
        self.kernel_params = kernel_params
        self.estimator = estimator
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.clip = clip
        self.weights = weights
        self.log_every = log_every
        self.seed = seed

    def fit(self, target, y=None):
        from .family import HierarchicalFamily

        schedule = HkSchedule(
            iterations=self.iterations,
            batch_size=self.batch_size,
            estimator=self.estimator,
            lr=self.lr,
            optimizer=self.optimizer,
            clip=self.clip,
            log_every=self.log_every,
            seed=self.seed,
            layers=self.layers,
            weights=self.weights,
            sigma_ini=self.sigma_ini,
        )
        self.path_ = AnnealedPath(target, self.layers)
        init_rng = np.random.default_rng([int(self.seed), 1])
        self.family_ = HierarchicalFamily(self.path_, self.hidden, self.sigma_ini, rng=init_rng)
        self.kernel_ = _resolve_kernel(self.kernel, self.kernel_params)
        result = train_hksivi(self.family_, self.path_, self.kernel_, schedule)
        self.trace_ = result.trace
        self.state_ = result.state
        self.n_features_in_ = target.dim
        return self

    def sample(self, n, rng=None, return_trajectory=False):
        if not hasattr(self, "family_"):
            raise RuntimeError("estimator is not fitted; call fit(target) first")
        return self.family_.sample(int(n), self.seed if rng is None else rng, return_trajectory)

"""Parallel Langevin samplers used as ground truth, and annealed Langevin trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChainState",
    "SamplerConfig",
    "sgld_step",
    "mala_step",
    "mala_log_accept",
    "annealed_langevin",
    "run_ground_truth",
]


@dataclass
class ChainState:
    """Particles of ``n`` independent chains sharing one step size and one rng."""

    particles: np.ndarray
    step_size: float
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    iteration: int = 0
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def _score(target, X):
    s = np.asarray(target.score(X), dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("target score is not finite")
    return s


def _noise(state: ChainState, noise):
    if noise is not None:
        return np.asarray(noise, dtype=np.float64)
    return state.rng.standard_normal(state.particles.shape)


def sgld_step(state: ChainState, target, noise=None) -> ChainState:
    """``x + (eps / 2) s(x) + sqrt(eps) * eta`` for every particle, in place.

    ``noise`` overrides the standard normal draw ``eta`` (test hook).
    """
    eps = state.step_size
    X = state.particles
    eta = _noise(state, noise)
    state.particles = X + (0.5 * eps) * _score(target, X) + np.sqrt(eps) * eta
    state.iteration += 1
    return state


def _log_proposal(to, frm, s_frm, eps):
    """``log N(to; frm + (eps/2) s(frm), eps I)`` up to a constant shared by both directions."""
    r = to - frm - (0.5 * eps) * s_frm
    return -np.sum(r * r, axis=-1) / (2.0 * eps)


def mala_log_accept(target, x, x_new, eps, s_x=None, s_new=None) -> np.ndarray:
    """Log Metropolis-Hastings ratio for the Langevin proposal (before taking min with 0)."""
    x = np.atleast_2d(x)
    x_new = np.atleast_2d(x_new)
    s_x = _score(target, x) if s_x is None else s_x
    s_new = _score(target, x_new) if s_new is None else s_new
    return (
        target.log_density(x_new)
        - target.log_density(x)
        + _log_proposal(x, x_new, s_new, eps)
        - _log_proposal(x_new, x, s_x, eps)
    )


def mala_step(state: ChainState, target, noise=None, uniforms=None) -> ChainState:
    """One Metropolis-adjusted Langevin step for every particle, in place."""
    if not getattr(target, "has_log_density", False):
        raise ValueError(f"{type(target).__name__} exposes no log-density; MALA needs one")
    eps = state.step_size
    X = state.particles
    s = _score(target, X)
    prop = X + (0.5 * eps) * s + np.sqrt(eps) * _noise(state, noise)
    s_prop = _score(target, prop)
    log_a = mala_log_accept(target, X, prop, eps, s, s_prop)
    u = state.rng.random(X.shape[0]) if uniforms is None else np.asarray(uniforms)
    accept = np.log(u) < np.minimum(log_a, 0.0)
    # an exact no-move proposal is always accepted
    accept |= np.all(prop == X, axis=1)
    state.particles = np.where(accept[:, None], prop, X)
    state.accepted += int(accept.sum())
    state.proposed += X.shape[0]
    state.iteration += 1
    return state


def annealed_langevin(path, noises, start, sigma_ini: float = 1.0) -> list[np.ndarray]:
    """Top-down trajectory ``x_t = x_{t+1} + (sigma_ini^2 / 2) s_t(x_{t+1}) + sigma_ini * xi``.

    ``noises[i]`` drives layer ``T - 1 - i``.  Returns ``[x_T, ..., x_0]``.
    """
    if len(noises) != path.layers:
        raise ValueError(f"need {path.layers} noise arrays, got {len(noises)}")
    scale = 0.5 * sigma_ini**2
    sigma = np.exp(np.full(path.dim, np.log(sigma_ini)))
    x = np.atleast_2d(np.asarray(start, dtype=np.float64))
    traj = [x]
    for i, xi in enumerate(noises):
        t = path.layers - 1 - i
        drift = np.asarray(path.score(t, x)) * scale
        x = (x + drift) + sigma * np.atleast_2d(xi)
        traj.append(x)
    return traj


@dataclass
class SamplerConfig:
    method: str = "sgld"
    particles: int = 1000
    steps: int = 10_000
    step_size: float = 1e-2
    seed: int = 0
    init: str = "normal"
    init_scale: float = 1.0
    burn_in: float = 0.5
    thin: int = 0

    def __post_init__(self):
        if self.method not in ("sgld", "mala"):
            raise ValueError(f"unknown sampler {self.method!r}")
        if self.particles < 1 or self.steps < 1:
            raise ValueError("particles and steps must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.init not in ("normal", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in must lie in [0, 1)")
        if self.thin < 0:
            raise ValueError("thin must be >= 0")


def run_ground_truth(target, config: SamplerConfig, return_state: bool = False):
    """Run ``config.particles`` parallel chains and return the final particle matrix.

    With ``thin > 0`` the post-burn-in particles are also collected every
    ``thin`` steps and stacked (more samples per chain); with the default
    ``thin = 0`` only the final states are returned.
    """
    rng = np.random.default_rng(config.seed)
    if config.init == "normal":
        X0 = config.init_scale * rng.standard_normal((config.particles, target.dim))
    else:
        X0 = np.zeros((config.particles, target.dim))
    state = ChainState(X0, config.step_size, rng)
    step = sgld_step if config.method == "sgld" else mala_step
    first_kept = int(config.burn_in * config.steps)
    kept = []
    for i in range(config.steps):
        step(state, target)
        if config.thin and i >= first_kept and (i - first_kept) % config.thin == 0:
            kept.append(state.particles.copy())
    out = np.vstack(kept) if kept else state.particles.copy()
    return (out, state) if return_state else out

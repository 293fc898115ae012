"""Semi-implicit variational families with a diagonal Gaussian conditional layer.

A draw is ``x = mu(z) + sigma * xi`` with ``z ~ N(0, I)`` (the mixing
distribution) and ``xi ~ N(0, I)``.  The conditional score at the drawn point
is ``-xi / sigma``, available in closed form without touching the intractable
marginal.  ``sigma = exp(rho)`` does not depend on ``z``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Mlp, Tensor, as_array, exp

__all__ = [
    "Location",
    "SemiImplicitFamily",
    "HierarchicalFamily",
    "marginal_score_reference",
]


class Location:
    """Constant mean ``mu(z) = m`` (a location-scale family when paired with sigma)."""

    def __init__(self, dim: int, init=None):
        m = np.zeros(dim) if init is None else np.asarray(init, dtype=np.float64).reshape(dim)
        self.loc = Tensor(m, requires_grad=True, name="loc")
        self.widths = [0, dim]

    @property
    def parameters(self) -> list[Tensor]:
        return [self.loc]

    def named_parameters(self):
        return [("loc", self.loc)]

    def __call__(self, z):
        n = as_array(z).shape[0]
        return self.loc + np.zeros((n, self.loc.shape[0]))

    def forward_numpy(self, z):
        return np.broadcast_to(self.loc.data, (np.shape(z)[0], self.loc.shape[0])).copy()


class SemiImplicitFamily:
    """``q(x) = int N(x; mu(z), diag(sigma^2)) N(z; 0, I) dz``.

    Parameters
    ----------
    dim : int
        Dimension of ``x``.
    mixing_dim : int
        Dimension of ``z``.
    hidden : sequence of int
        Hidden widths of the mean MLP (``[mixing_dim, *hidden, dim]``).
    init_std : float or array
        Initial ``sigma``; ``rho`` starts at ``log(init_std)``.
    learn_std : bool
        If False, ``sigma`` is frozen and left out of the parameters.
    mean : {"mlp", "identity"} or object
        ``"identity"`` gives ``mu(z) = z`` (requires ``mixing_dim == dim``);
        an object with ``__call__`` and ``parameters`` is used as-is.
    residual_score : callable, optional
        If given, the mean becomes ``z + net(z) + residual_scale * residual_score(z)``
        (the hierarchical layer form); ``z`` is then treated as a constant.
    """

    def __init__(
        self,
        dim: int,
        mixing_dim: int | None = None,
        hidden: Sequence[int] = (50, 50),
        init_std=1.0,
        learn_std: bool = True,
        mean="mlp",
        rng=None,
        zero_init: bool = False,
        residual_score: Callable | None = None,
        residual_scale: float = 0.5,
        log_std: Tensor | None = None,
    ):
        self.dim = int(dim)
        self.mixing_dim = int(dim if mixing_dim is None else mixing_dim)
        self.hidden = tuple(int(h) for h in hidden)
        if isinstance(mean, str):
            if mean == "identity":
                if self.mixing_dim != self.dim:
                    raise ValueError("identity mean needs mixing_dim == dim")
                self.net = None
            elif mean == "mlp":
                self.net = Mlp([self.mixing_dim, *self.hidden, self.dim], rng=rng, zero_last=zero_init)
            else:
                raise ValueError(f"unknown mean kind {mean!r}")
        else:
            self.net = mean
        if log_std is None:
            std = np.broadcast_to(np.asarray(init_std, dtype=np.float64), (self.dim,))
            if np.any(std <= 0):
                raise ValueError("initial std must be positive")
            log_std = Tensor(np.log(std), requires_grad=learn_std, name="log_std")
        self.log_std = log_std
        self.residual_score = residual_score
        self.residual_scale = float(residual_scale)
        if residual_score is not None and self.mixing_dim != self.dim:
            raise ValueError("residual mean needs mixing_dim == dim")

    # -- parameters ------------------------------------------------------
    @property
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.net is not None:
            out += [(f"mean.{n}", p) for n, p in self.net.named_parameters()]
        if self.log_std.requires_grad:
            out.append(("log_std", self.log_std))
        return out

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    @property
    def is_identity(self) -> bool:
        return self.net is None and self.residual_score is None

    def spec(self) -> dict:
        return {
            "kind": "semi_implicit",
            "dim": self.dim,
            "mixing_dim": self.mixing_dim,
            "hidden": list(self.hidden),
            "mean": "identity" if self.net is None else type(self.net).__name__.lower(),
            "learn_std": bool(self.log_std.requires_grad),
            "residual": self.residual_score is not None,
            "residual_scale": self.residual_scale,
        }

    # -- sampling --------------------------------------------------------
    def mean(self, z):
        """``mu(z)`` as a tensor on the tape (``z`` is a constant batch)."""
        z = np.atleast_2d(as_array(z))
        if z.shape[1] != self.mixing_dim:
            raise ValueError(f"mixing sample has width {z.shape[1]}, expected {self.mixing_dim}")
        if self.residual_score is not None:
            drift = np.asarray(self.residual_score(z), dtype=np.float64)
            out = self.net(z) + z if self.net is not None else Tensor(z)
            return out + drift * self.residual_scale
        if self.net is None:
            return Tensor(z)
        return self.net(z)

    def mean_numpy(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.residual_score is not None:
            base = z + self.net.forward_numpy(z) if self.net is not None else z
            return base + np.asarray(self.residual_score(z)) * self.residual_scale
        if self.net is None:
            return z.copy()
        return self.net.forward_numpy(z)

    def draw(self, z, xi):
        """Reparameterized draw: returns ``(x, cond_score)`` as tensors.

        ``x = mu(z) + sigma * xi`` and ``cond_score = -xi / sigma``.
        Single vectors are accepted and give single-row batches.
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        if xi.shape[1] != self.dim or xi.shape[0] != z.shape[0]:
            raise ValueError(f"noise shape {xi.shape} incompatible with {(z.shape[0], self.dim)}")
        sigma = exp(self.log_std)
        x = self.mean(z) + sigma * xi
        cond = (xi / sigma) * -1.0
        return x, cond

    def draw_noise(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Mixing sample then conditional noise, in that order."""
        z = rng.standard_normal((n, self.mixing_dim))
        xi = rng.standard_normal((n, self.dim))
        return z, xi

    def batch_draw(self, n: int, rng, score=None):
        """``n`` i.i.d. reparameterized draws as a :class:`~ksivi.objective.KsdBatch`."""
        from .objective import make_batch

        if n < 1:
            raise ValueError("need at least one draw")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        z, xi = self.draw_noise(n, rng)
        return make_batch(self, z, xi, score)

    def sample(self, n: int, rng=None) -> np.ndarray:
        """``n`` samples from the marginal, without building a tape."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        z, xi = self.draw_noise(n, rng)
        return self.mean_numpy(z) + self.std * xi


def marginal_score_reference(fam: SemiImplicitFamily) -> Callable:
    """Exact marginal score of the identity-mean family: ``-x / (1 + sigma^2)``."""
    if not fam.is_identity:
        raise ValueError("marginal score is only tractable for the identity-mean family")
    var = 1.0 + fam.std**2

    def score(x):
        return -np.asarray(x, dtype=np.float64) / var

    return score


class HierarchicalFamily:
    """Stack of ``layers`` conditional Gaussians with a shared residual network.

    Layer ``t`` maps ``x_{t+1}`` to
    ``x_t = x_{t+1} + net(x_{t+1}) + (sigma_ini^2 / 2) s_t(x_{t+1}) + sigma_t * xi``,
    where ``s_t`` is the annealed score of layer ``t``.  The network's output
    layer starts at zero, so a fresh hierarchy runs annealed Langevin steps.
    ``x_T`` is drawn from ``N(0, I)``.
    """

    def __init__(self, path, hidden: Sequence[int] = (50, 50), sigma_ini: float = 1.0, rng=None):
        self.path = path
        self.dim = path.dim
        self.layers = path.layers
        self.hidden = tuple(int(h) for h in hidden)
        self.sigma_ini = float(sigma_ini)
        if not self.sigma_ini > 0:
            raise ValueError("sigma_ini must be positive")
        self.net = Mlp([self.dim, *self.hidden, self.dim], rng=rng, zero_last=True)
        self.log_stds = [
            Tensor(np.full(self.dim, np.log(self.sigma_ini)), requires_grad=True, name=f"log_std.{t}")
            for t in range(self.layers)
        ]

    def layer(self, t: int) -> SemiImplicitFamily:
        """Conditional of layer ``t`` as a single semi-implicit family (shares parameters)."""
        if not 0 <= t < self.layers:
            raise IndexError(f"layer {t} outside 0..{self.layers - 1}")
        path = self.path
        return SemiImplicitFamily(
            self.dim,
            self.dim,
            hidden=self.hidden,
            mean=self.net,
            residual_score=lambda x, t=t: path.score(t, x),
            residual_scale=0.5 * self.sigma_ini**2,
            log_std=self.log_stds[t],
        )

    @property
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"mean.{n}", p) for n, p in self.net.named_parameters()]
        out += [(f"log_std.{t}", s) for t, s in enumerate(self.log_stds)]
        return out

    def spec(self) -> dict:
        return {
            "kind": "hierarchical",
            "dim": self.dim,
            "layers": self.layers,
            "hidden": list(self.hidden),
            "sigma_ini": self.sigma_ini,
        }

    def hier_draw(self, x_top, noises) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Run the stack from ``x_T`` down to ``x_0`` with the given noise.

        ``noises[i]`` drives layer ``T - 1 - i``.  Returns the trajectory
        ``[x_T, ..., x_0]`` and the conditional score of every layer, in the
        same top-down order.
        """
        if len(noises) != self.layers:
            raise ValueError(f"need {self.layers} noise arrays, got {len(noises)}")
        x = np.atleast_2d(np.asarray(x_top, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"top sample has width {x.shape[1]}, expected {self.dim}")
        traj, scores = [x], []
        for i, xi in enumerate(noises):
            t = self.layers - 1 - i
            xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
            if xi.shape != x.shape:
                raise ValueError(f"layer {t} noise has shape {xi.shape}, expected {x.shape}")
            fam = self.layer(t)
            sigma = fam.std
            x = fam.mean_numpy(x) + sigma * xi
            traj.append(x)
            scores.append(-xi / sigma)
        return traj, scores

    def sample(self, n: int, rng=None, return_trajectory: bool = False):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        x_top = rng.standard_normal((n, self.dim))
        noises = [rng.standard_normal((n, self.dim)) for _ in range(self.layers)]
        traj, _ = self.hier_draw(x_top, noises)
        return traj if return_trajectory else traj[-1]

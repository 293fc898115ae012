"""Sample-based discrepancies and evaluation helpers."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.utils import check_array

from .kernels import GaussianRBF, Kernel, stein_kernel_matrix

__all__ = [
    "SampleSet",
    "mmd_squared",
    "sliced_wasserstein",
    "ksd_metric",
    "mode_coverage",
    "box_truncate",
    "correlation_matrix",
    "MetricRecord",
    "write_metric_csv",
    "read_metric_csv",
]


def _samples(X, name="X", min_rows=1) -> np.ndarray:
    if isinstance(X, SampleSet):
        X = X.values
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return check_array(X, ensure_min_samples=min_rows, input_name=name)


@dataclass
class SampleSet:
    """An ``n x d`` matrix of finite samples with an optional label."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.values = check_array(
            np.atleast_2d(np.asarray(self.values, dtype=np.float64)), ensure_min_samples=0
        )

    def __len__(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def mmd_squared(X, Y, kernel: Kernel | None = None) -> float:
    """Biased (V-statistic) squared MMD; an unset RBF bandwidth uses the median over ``X`` and ``Y``."""
    X = _samples(X, "X")
    Y = _samples(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y disagree on dimension")
    k = (GaussianRBF() if kernel is None else kernel).adapted(np.vstack([X, Y]))
    kxx = k.matrix(X, X).mean()
    kyy = k.matrix(Y, Y).mean()
    kxy = k.matrix(X, Y).mean()
    return float(kxx + kyy - 2.0 * kxy)


def sliced_wasserstein(X, Y, n_projections: int = 128, rng=None) -> float:
    """Mean over random unit directions of the 1-D Wasserstein-1 distance of the projections.

    The larger set is subsampled without replacement to the size of the smaller.
    """
    X = _samples(X, "X")
    Y = _samples(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("X and Y disagree on dimension")
    if n_projections < 1:
        raise ValueError("need at least one projection")
    rng = np.random.default_rng(rng)
    n = min(len(X), len(Y))
    if len(X) > n:
        X = X[rng.choice(len(X), n, replace=False)]
    if len(Y) > n:
        Y = Y[rng.choice(len(Y), n, replace=False)]
    U = rng.standard_normal((X.shape[1], n_projections))
    U /= np.linalg.norm(U, axis=0, keepdims=True)
    px = np.sort(X @ U, axis=0)
    py = np.sort(Y @ U, axis=0)
    return float(np.mean(np.abs(px - py)))


def ksd_metric(X, target, kernel: Kernel | None = None, block: int = 2048) -> float:
    """U-statistic KSD^2 of the samples against ``target`` via the Stein kernel."""
    X = _samples(X, "X", min_rows=2)
    n = len(X)
    k = (GaussianRBF() if kernel is None else kernel).adapted(X)
    if not k.twice_differentiable:
        raise ValueError(f"{k.tag} is not twice differentiable; KSD metric undefined")
    S = np.asarray(target.score(X), dtype=np.float64)
    total = 0.0
    for a in range(0, n, block):
        Xa, Sa = X[a : a + block], S[a : a + block]
        H = stein_kernel_matrix(k, Xa, Sa, X, S)
        # drop the diagonal terms that fall inside this block
        idx = np.arange(len(Xa))
        total += H.sum() - H[idx, a + idx].sum()
    return float(total / (n * (n - 1)))


def mode_coverage(X, means, radius: float) -> np.ndarray:
    """Fraction of samples whose nearest mean lies within ``radius``, per mode."""
    X = _samples(X, "X", min_rows=0)
    M = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if M.shape[0] == 0:
        raise ValueError("need at least one mode")
    if not radius > 0:
        raise ValueError("radius must be positive")
    if len(X) == 0:
        return np.zeros(len(M))
    D = ((X[:, None, :] - M[None, :, :]) ** 2).sum(axis=-1)
    nearest = np.argmin(D, axis=1)
    inside = D[np.arange(len(X)), nearest] <= radius**2
    counts = np.bincount(nearest[inside], minlength=len(M))
    return counts / len(X)


def box_truncate(X, edge: float) -> SampleSet:
    """Keep the rows whose coordinates all lie in ``[-edge, edge]``."""
    if not edge > 0:
        raise ValueError("edge must be positive")
    label = X.label if isinstance(X, SampleSet) else ""
    X = _samples(X, "X", min_rows=0)
    keep = np.all(np.abs(X) <= edge, axis=1)
    return SampleSet(X[keep].reshape(-1, X.shape[1]), label)


def correlation_matrix(X) -> np.ndarray:
    """Pearson correlation between every pair of columns."""
    X = _samples(X, "X", min_rows=3)
    C = X - X.mean(axis=0)
    scale = np.sqrt(np.sum(C * C, axis=0))
    if np.any(scale == 0):
        bad = int(np.flatnonzero(scale == 0)[0])
        raise ValueError(f"column {bad} has zero variance")
    R = (C.T @ C) / np.outer(scale, scale)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


@dataclass
class MetricRecord:
    metric: str
    value: float
    n_x: int
    n_y: int
    kernel: str = ""
    bandwidth: float = float("nan")
    seed: int = 0


METRIC_COLUMNS = ["metric", "value", "n_x", "n_y", "kernel", "bandwidth", "seed"]


def write_metric_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([r.metric, repr(float(r.value)), r.n_x, r.n_y, r.kernel, repr(float(r.bandwidth)), r.seed])


def read_metric_csv(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(
            r["metric"], float(r["value"]), int(r["n_x"]), int(r["n_y"]), r["kernel"], float(r["bandwidth"]), int(r["seed"])
        )
        for r in rows
    ]

"""Kernel Stein discrepancy objective for semi-implicit families.

With ``f = s_p(x) - s_{q(.|z)}(x) = s_p(x) + xi / sigma`` the squared KSD of
the marginal is ``E k(x, x') <f, f'>`` over independent draws, which only
needs the conditional score.  Two unbiased gradient estimators follow:
a two-batch ("vanilla") double sum, and a single-batch U-statistic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .kernels import Kernel
from .tensor import Tensor, as_array, backward, flatten

__all__ = [
    "KsdBatch",
    "GradientEstimate",
    "NonFiniteGradient",
    "make_batch",
    "ksd_value",
    "ksd_value_ustat",
    "ksd_loss",
    "ksd_loss_ustat",
    "witness",
    "grad_vanilla",
    "grad_ustat",
    "pair_gradient",
    "masked_loss",
    "estimate_zetas",
    "predicted_variances",
    "variance_diagnostic",
    "write_variance_csv",
]


class NonFiniteGradient(FloatingPointError):
    """A gradient estimate contained NaN or infinity."""


@dataclass
class KsdBatch:
    """Reparameterized draws and their score differences.

    ``x``, ``cond_score`` and ``f`` are tensors (row batches) when built on the
    tape; plain arrays are accepted for value-only use.
    """

    z: np.ndarray
    xi: np.ndarray
    x: Tensor | np.ndarray
    cond_score: Tensor | np.ndarray
    f: Tensor | np.ndarray
    source: str = ""

    @property
    def n(self) -> int:
        return as_array(self.x).shape[0]

    @property
    def x_np(self) -> np.ndarray:
        return as_array(self.x)

    @property
    def f_np(self) -> np.ndarray:
        return as_array(self.f)


@dataclass
class GradientEstimate:
    vector: np.ndarray
    estimator: str
    batch_size: int
    loss: float = float("nan")
    bandwidth: float | None = None
    arrays: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.vector)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def make_batch(family, z, xi, score) -> KsdBatch:
    """Draw ``x`` from ``family`` for fixed noise and attach ``f = s_p(x) + xi / sigma``."""
    x, cond = family.draw(z, xi)
    if score is None:
        return KsdBatch(z, xi, x, cond, None)
    s = score(x)
    f = s + np.atleast_2d(xi) / tn.exp(family.log_std)
    return KsdBatch(z, xi, x, cond, f, source=type(family).__name__)


def _check_pair(A: KsdBatch, B: KsdBatch):
    if A.n == 0 or B.n == 0:
        raise ValueError("empty batch")
    if A.x_np.shape[1] != B.x_np.shape[1]:
        raise ValueError("batches disagree on dimension")


def _resolve(kernel: Kernel, *xs) -> Kernel:
    return kernel.adapted(np.vstack([as_array(x) for x in xs]))


def ksd_value(kernel: Kernel, A: KsdBatch, B: KsdBatch) -> float:
    """Two-batch estimate ``mean_ij k(x_i, x'_j) <f_i, f'_j>``."""
    _check_pair(A, B)
    k = _resolve(kernel, A.x_np, B.x_np)
    K = k.matrix(A.x_np, B.x_np)
    # correctly rounded sum: independent of term order, so swapping batches is exact
    return math.fsum((K * (A.f_np @ B.f_np.T)).ravel()) / (A.n * B.n)


def ksd_value_ustat(kernel: Kernel, batch: KsdBatch) -> float:
    """U-statistic ``2 / (N (N - 1)) sum_{i<j} k(x_i, x_j) <f_i, f_j>``."""
    n = batch.n
    if n < 2:
        raise ValueError("U-statistic needs at least two draws")
    k = _resolve(kernel, batch.x_np)
    H = k.matrix(batch.x_np, batch.x_np) * (batch.f_np @ batch.f_np.T)
    H[np.diag_indices(n)] = 0.0
    return math.fsum(H.ravel()) / (n * (n - 1))


def ksd_loss(kernel: Kernel, A: KsdBatch, B: KsdBatch) -> Tensor:
    """Tape version of :func:`ksd_value`; ``kernel`` must be fully resolved."""
    _check_pair(A, B)
    K = kernel.matrix(A.x, B.x)
    G = A.f @ tn.transpose(B.f)
    return tn.sum(K * G) * (1.0 / (A.n * B.n))


def ksd_loss_ustat(kernel: Kernel, batch: KsdBatch) -> Tensor:
    """Tape version of :func:`ksd_value_ustat`; ``kernel`` must be fully resolved."""
    n = batch.n
    if n < 2:
        raise ValueError("U-statistic needs at least two draws")
    K = kernel.matrix(batch.x, batch.x)
    G = batch.f @ tn.transpose(batch.f)
    off = 1.0 - np.eye(n)
    return tn.sum(K * G * off) * (1.0 / (n * (n - 1)))


def witness(kernel: Kernel, batch: KsdBatch, probe) -> np.ndarray:
    """Monte Carlo optimal test function ``(1/N) sum_i k(x0, x_i) f_i``.

    ``probe`` may be one point or a row batch of points.
    """
    if batch.n == 0:
        raise ValueError("empty batch")
    k = _resolve(kernel, batch.x_np)
    P = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    out = k.matrix(P, batch.x_np) @ batch.f_np / batch.n
    return out[0] if np.ndim(probe) == 1 else out


def _estimate(loss: Tensor, params, tag: str, n: int, bandwidth) -> GradientEstimate:
    if loss.requires_grad:
        grads = backward(loss)
        arrays = [grads.get(p, np.zeros_like(p.data)) for p in params]
    else:
        arrays = [np.zeros_like(p.data) for p in params]
    vec = flatten(arrays)
    if not np.all(np.isfinite(vec)):
        raise NonFiniteGradient(f"{tag} gradient is not finite")
    return GradientEstimate(vec, tag, n, float(loss.data), bandwidth, arrays)


def _bandwidth(k: Kernel):
    return getattr(k, "bandwidth", None)


def _score_fn(target):
    return target if callable(target) and not hasattr(target, "score") else target.score


def grad_vanilla(kernel: Kernel, family, target, n: int, rng) -> GradientEstimate:
    """Two independent batches of ``n`` draws; all ``n^2`` cross pairs."""
    if n < 1:
        raise ValueError("need n >= 1")
    score = _score_fn(target)
    A = family.batch_draw(n, rng, score)
    B = family.batch_draw(n, rng, score)
    k = _resolve(kernel, A.x_np, B.x_np)
    return _estimate(ksd_loss(k, A, B), family.parameters, "vanilla", n, _bandwidth(k))


def grad_ustat(kernel: Kernel, family, target, n: int, rng) -> GradientEstimate:
    """One batch of ``n`` draws; all unordered distinct pairs."""
    if n < 2:
        raise ValueError("U-statistic needs n >= 2")
    score = _score_fn(target)
    A = family.batch_draw(n, rng, score)
    k = _resolve(kernel, A.x_np)
    return _estimate(ksd_loss_ustat(k, A), family.parameters, "u-stat", n, _bandwidth(k))


def pair_gradient(kernel: Kernel, family, score, theta1, theta2) -> np.ndarray:
    """``h(theta1, theta2) = grad_phi k(x1, x2) <f1, f2>`` for one pair of draws.

    ``theta2`` may hold several rows, in which case the result is the
    average of ``h`` over them (the inner conditional mean).
    """
    z1, xi1 = theta1
    z2, xi2 = theta2
    A = make_batch(family, np.atleast_2d(z1), np.atleast_2d(xi1), score)
    B = make_batch(family, np.atleast_2d(z2), np.atleast_2d(xi2), score)
    return _estimate(ksd_loss(kernel, A, B), family.parameters, "pair", 1, None).vector


class _Moments:
    """Streaming per-coordinate mean and variance (Welford), without storing rows."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self._m2 = None

    def add(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if self.mean is None:
            self.mean = np.zeros_like(vec)
            self._m2 = np.zeros_like(vec)
        self.count += 1
        delta = vec - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (vec - self.mean)

    @property
    def var(self) -> np.ndarray:
        """Unbiased per-coordinate variance."""
        return self._m2 / (self.count - 1)

    @property
    def trace(self) -> float:
        """Trace of the covariance: the variance of a vector estimator."""
        return float(np.sum(self.var))


def masked_loss(kernel: Kernel, A: KsdBatch, B: KsdBatch, mask: np.ndarray) -> Tensor:
    """``sum_ij mask_ij k(a_i, b_j) <f_i, f_j>`` on the tape.

    With a block-diagonal ``mask`` this is the sum of independent copies of
    an estimator, so one backward pass yields their summed gradients.
    """
    _check_pair(A, B)
    return tn.sum(kernel.matrix(A.x, B.x) * (A.f @ tn.transpose(B.f)) * mask)


def _block_layout(count: int, block: int) -> tuple[int, int]:
    """Copies per tape pass and number of passes; at least two passes."""
    m = max(1, min(int(block), count // 2))
    return m, count // m


def _copies(blocks: int, pattern: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(blocks), pattern)


def variance_diagnostic(
    kernel: Kernel,
    family,
    target,
    sizes,
    replications: int | dict,
    rng,
    outer: int = 1000,
    inner: int = 200,
    pairs: int | None = None,
    block: int = 32,
) -> list[dict]:
    """Empirical vs predicted variance of both estimators across batch sizes.

    The kernel bandwidth is fixed once from a pilot sample so that every
    estimate targets the same objective.  Three estimators are replicated
    with shared draws: the U-statistic on ``N`` draws, the two-batch
    estimator with batches of ``N/2`` (same sample budget ``N``), and the
    two-batch estimator with two full batches of ``N``.  ``zeta1`` and
    ``zeta2`` come from nested Monte Carlo over single-pair gradients.

    ``replications`` is a count for every size or a mapping from size to
    count.  Up to ``block`` independent replications share one tape pass.  The
    summed gradient ``S`` of ``m`` copies has ``Var(S / sqrt(m))`` equal to
    the single-copy variance, which is what gets accumulated.  Moments are
    streamed, so memory does not grow with ``replications``.
    """
    sizes = [int(n) for n in sizes]
    counts = {n: int(replications[n] if isinstance(replications, dict) else replications) for n in sizes}
    if min(counts.values(), default=100) < 100:
        raise ValueError("need at least 100 replications")
    if block < 1:
        raise ValueError("block must be >= 1")
    if not sizes or min(sizes) < 3:
        raise ValueError("batch sizes must be >= 3")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    score = _score_fn(target)
    pilot = family.sample(2000, rng)
    k = kernel.adapted(pilot)

    zeta1, zeta2 = estimate_zetas(k, family, score, rng, outer=outer, inner=inner, pairs=pairs, block=block)

    rows = []
    params = family.parameters
    for n in sizes:
        # cap the stacked batch at 512 rows; the mask is dense
        m, passes = _block_layout(counts[n], max(1, min(block, 256 // n)))
        h = n // 2
        # one copy owns 2n rows: the first n feed the U-statistic and the
        # budget split, all 2n feed the full two-batch estimator
        pat_u = np.zeros((2 * n, 2 * n))
        pat_u[:n, :n] = (1.0 - np.eye(n)) / (n * (n - 1))
        pat_vb = np.zeros((2 * n, 2 * n))
        pat_vb[:h, h : 2 * h] = 1.0 / h**2
        pat_vf = np.zeros((2 * n, 2 * n))
        pat_vf[:n, n:] = 1.0 / n**2
        scale = 1.0 / math.sqrt(m)
        masks = [_copies(m, p) * scale for p in (pat_u, pat_vb, pat_vf)]
        u, v_budget, v_full = _Moments(), _Moments(), _Moments()
        for _ in range(passes):
            z, xi = family.draw_noise(2 * n * m, rng)
            A = make_batch(family, z, xi, score)
            for acc, mask in zip((u, v_budget, v_full), masks):
                acc.add(_estimate(masked_loss(k, A, A, mask), params, "block", n, None).vector)
        pred = predicted_variances(n, zeta1, zeta2)
        var_u, var_vb, var_vf = u.trace, v_budget.trace, v_full.trace
        rows.append(
            {
                "N": n,
                "var_vanilla_emp": var_vf,
                "var_ustat_emp": var_u,
                "var_vanilla_pred": pred["vanilla_full"],
                "var_ustat_pred": pred["ustat"],
                "diff_emp": var_u - var_vb,
                "diff_pred": pred["diff"],
                "var_vanilla_budget_emp": var_vb,
                "var_vanilla_budget_pred": pred["vanilla_budget"],
                "zeta1": zeta1,
                "zeta2": zeta2,
                "mean_ustat": u.mean * scale,
                "mean_vanilla": v_full.mean * scale,
                "coord_var_ustat": u.var,
                "coord_var_vanilla": v_full.var,
                "replications": m * passes,
            }
        )
    return rows


def estimate_zetas(
    kernel: Kernel, family, score, rng, outer: int = 1000, inner: int = 200, pairs: int | None = None, block: int = 32
):
    """Nested Monte Carlo estimates of ``zeta1 = Var E[h | theta1]`` and ``zeta2 = Var h``.

    ``zeta1`` uses ``outer`` conditioning draws, each averaged over ``inner``
    partners; the inner mean inflates its variance by ``(zeta2 - zeta1) / inner``
    and that bias is removed.  ``zeta2`` uses ``pairs`` independent single pairs
    (default ``outer``); ``h`` is heavy tailed, so it usually wants more.
    Independent pairs are batched ``block`` at a time as in
    :func:`variance_diagnostic`; counts are rounded down to whole blocks.
    """
    pairs = outer if pairs is None else int(pairs)
    if outer < 2 or pairs < 2 or inner < 2:
        raise ValueError("need at least two draws at every level")
    params = family.parameters

    m, passes = _block_layout(pairs, block)
    mask = np.eye(m) / math.sqrt(m)
    singles = _Moments()
    for _ in range(passes):
        z, xi = family.draw_noise(2 * m, rng)
        A = make_batch(family, z[:m], xi[:m], score)
        B = make_batch(family, z[m:], xi[m:], score)
        singles.add(_estimate(masked_loss(kernel, A, B, mask), params, "pair", 1, None).vector)

    m, passes = _block_layout(outer, block)
    mask = _copies(m, np.ones((1, inner))) / (inner * math.sqrt(m))
    means = _Moments()
    for _ in range(passes):
        z1, xi1 = family.draw_noise(m, rng)
        zi, xii = family.draw_noise(m * inner, rng)
        A = make_batch(family, z1, xi1, score)
        B = make_batch(family, zi, xii, score)
        means.add(_estimate(masked_loss(kernel, A, B, mask), params, "pair", inner, None).vector)

    zeta2 = singles.trace
    zeta1 = (means.trace - zeta2 / inner) / (1.0 - 1.0 / inner)
    return zeta1, zeta2


def predicted_variances(n: int, zeta1: float, zeta2: float) -> dict:
    """Variance formulas for sample budget ``n`` (vanilla splits it into two halves)."""
    return {
        "vanilla_budget": 4.0 * (n - 2) * zeta1 / n**2 + 4.0 * zeta2 / n**2,
        "vanilla_full": (2.0 * (n - 1) * zeta1 + zeta2) / n**2,
        "ustat": 4.0 * (n - 2) * zeta1 / (n * (n - 1)) + 2.0 * zeta2 / (n * (n - 1)),
        "diff": 2.0 * (n - 2) * (2.0 * zeta1 - zeta2) / (n**2 * (n - 1)),
    }


VARIANCE_COLUMNS = [
    "N",
    "var_vanilla_emp",
    "var_ustat_emp",
    "var_vanilla_pred",
    "var_ustat_pred",
    "diff_emp",
    "diff_pred",
]


def write_variance_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VARIANCE_COLUMNS)
        for r in rows:
            w.writerow([r["N"]] + [repr(float(r[c])) for c in VARIANCE_COLUMNS[1:]])

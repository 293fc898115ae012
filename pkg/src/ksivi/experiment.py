"""Build objects from a config, run training, and evaluate against ground truth."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import targets as tg
from .config import ExperimentConfig, emit_config
from .family import HierarchicalFamily, SemiImplicitFamily
from .io import (
    checkpoint_from_run,
    load_checkpoint,
    load_waveform,
    read_sample_csv,
    restore_parameters,
    save_checkpoint,
    write_sample_csv,
    write_trace_csv,
)
from .kernels import make_kernel
from .mcmc import SamplerConfig, run_ground_truth
from .metrics import (
    MetricRecord,
    box_truncate,
    correlation_matrix,
    ksd_metric,
    mmd_squared,
    mode_coverage,
    sliced_wasserstein,
    write_metric_csv,
)
from .objective import variance_diagnostic, write_variance_csv
from .train import HkSchedule, TrainSchedule, train_hksivi, train_ksivi

__all__ = [
    "OutputLock",
    "build_target",
    "build_family",
    "build_kernel",
    "build_schedule",
    "ground_truth",
    "evaluate_samples",
    "run_experiment",
    "run_ground_truth_only",
    "run_evaluate",
    "run_variance_diag",
    "run_sample",
]

TRACE = "trace.csv"
SAMPLES = "samples.csv"
CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.csv"
SUMMARY = "summary.json"
GROUND_TRUTH = "ground_truth.csv"
CONFIG = "config.txt"
OBSERVATIONS = "observations.json"
VARIANCE = "variance.csv"


class OutputLock:
    """Exclusive lock file inside an output directory."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.path.parent} is locked by another run ({self.path} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _params(spec, allowed, path="target.params"):
    unknown = set(spec.params) - set(allowed)
    if unknown:
        raise ValueError(f"{path}.{sorted(unknown)[0]}: unknown parameter")
    return {k: spec.params[k] for k in allowed if k in spec.params}


def build_target(cfg: ExperimentConfig, out_dir=None):
    """Instantiate the configured target (diffusion observations are stored in ``out_dir``)."""
    spec = cfg.target
    kind = spec.kind
    if kind == "banana":
        return tg.Banana(**_params(spec, ["cov"]))
    if kind == "normal":
        return tg.StandardNormal(**_params(spec, ["dim"]))
    if kind == "multimodal":
        _params(spec, [])
        return tg.multimodal()
    if kind == "x_shaped":
        _params(spec, [])
        return tg.x_shaped()
    if kind == "eight_gaussians":
        return tg.eight_gaussians(**_params(spec, ["radius", "std"]))
    if kind == "student_t":
        return tg.StudentTProduct(**_params(spec, ["nu", "dim"]))
    if kind == "logreg":
        p = _params(spec, ["data", "n", "features", "alpha", "data_seed", "positive"])
        data = p.get("data", "synthetic")
        alpha = p.get("alpha", 0.01)
        if data == "synthetic":
            return tg.synthesize_logreg(p.get("n", 400), p.get("features", 21), p.get("data_seed", 0), alpha)
        ds = load_waveform(data, features=p.get("features", 21), positive=tuple(p.get("positive", (1, 2))))
        return tg.LogisticRegression(ds.covariates, ds.labels, alpha)
    if kind == "diffusion":
        p = _params(spec, ["dim", "dt", "obs_every", "obs_std", "drift", "data_seed", "observations"])
        dim = p.get("dim", 100)
        kw = {k: p[k] for k in ("dt", "obs_every", "obs_std", "drift") if k in p}
        if "observations" in p:
            target = tg.ConditionedDiffusion(np.asarray(p["observations"], dtype=np.float64), dim=dim, **kw)
        else:
            target = tg.ConditionedDiffusion.simulate(dim, seed=p.get("data_seed", 0), **kw)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            with open(Path(out_dir) / OBSERVATIONS, "w") as fh:
                json.dump({"observations": [float(v) for v in target.observations], "dt": target.dt}, fh)
        return target
    raise ValueError(f"target.kind: unknown target {kind!r}")


def build_family(cfg: ExperimentConfig, target, path=None):
    fam = cfg.family
    rng = np.random.default_rng([cfg.seed, 1])
    if fam.layers == 0:
        return SemiImplicitFamily(
            target.dim,
            fam.mixing_dim,
            tuple(fam.hidden),
            init_std=float(np.sqrt(fam.init_var)),
            learn_std=fam.learn_std,
            rng=rng,
        )
    path = tg.AnnealedPath(target, fam.layers) if path is None else path
    return HierarchicalFamily(path, tuple(fam.hidden), fam.sigma_ini, rng=rng)


def build_kernel(cfg: ExperimentConfig):
    k = cfg.kernel
    if k.name == "rbf":
        return make_kernel("rbf", bandwidth=k.bandwidth, heuristic=k.heuristic)
    if k.name == "imq":
        return make_kernel("imq", c=k.c, beta=k.beta)
    return make_kernel(k.name, order=k.order, eps=k.eps)


def build_schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    common = dict(
        iterations=s.iterations,
        batch_size=s.batch_size,
        estimator=s.estimator,
        lr=s.lr,
        optimizer=s.optimizer,
        clip=s.clip,
        ema_decay=s.ema_decay,
        temperature_start=s.temperature_start,
        temperature_fraction=s.temperature_fraction,
        log_every=s.log_every,
        log_batch=s.log_batch,
        seed=cfg.seed,
        timing=s.timing,
    )
    if cfg.family.layers == 0:
        return TrainSchedule(**common)
    common.pop("temperature_start")
    common.pop("temperature_fraction")
    return HkSchedule(**common, layers=cfg.family.layers, sigma_ini=cfg.family.sigma_ini)


def ground_truth(cfg: ExperimentConfig, target, out_dir=None) -> np.ndarray:
    """Reference samples: exact draws if configured, else parallel Langevin chains.

    Cached as ``ground_truth.csv`` in ``out_dir``.
    """
    cache = None if out_dir is None else Path(out_dir) / GROUND_TRUTH
    if cache is not None and cache.exists():
        X, _ = read_sample_csv(cache)
        return X
    g = cfg.ground_truth
    if g.exact:
        X = target.sample(g.particles, np.random.default_rng(g.seed))
        meta = {"source": "exact", "seed": g.seed}
    else:
        sc = SamplerConfig(g.method, g.particles, g.steps, g.step_size, g.seed, g.init, g.init_scale, g.burn_in, g.thin)
        X = run_ground_truth(target, sc)
        meta = {"source": g.method, "seed": g.seed, "steps": g.steps, "step_size": g.step_size}
    if cache is not None:
        write_sample_csv(cache, X, {"experiment": cfg.experiment, **meta})
    return X


def evaluate_samples(cfg: ExperimentConfig, target, X, reference) -> list[MetricRecord]:
    """Compute every configured metric of ``X`` against ``reference`` samples."""
    ev = cfg.evaluation
    rng = np.random.default_rng([cfg.seed, 3])
    out = []
    nx, ny = len(X), len(reference)
    for name in ev.metrics:
        if name == "mmd":
            from .kernels import GaussianRBF

            k = GaussianRBF().adapted(np.vstack([X, reference]))
            out.append(MetricRecord("mmd", mmd_squared(X, reference, k), nx, ny, "rbf", k.bandwidth, cfg.seed))
        elif name == "ksd":
            from .kernels import GaussianRBF

            k = GaussianRBF().adapted(X)
            out.append(MetricRecord("ksd", ksd_metric(X, target, k), nx, 0, "rbf", k.bandwidth, cfg.seed))
        elif name == "sliced_wd":
            v = sliced_wasserstein(X, reference, ev.n_projections, rng)
            out.append(MetricRecord("sliced_wd", v, nx, ny, "", float("nan"), cfg.seed))
        elif name == "sliced_wd_box":
            a = box_truncate(X, ev.box_edge).values
            b = box_truncate(reference, ev.box_edge).values
            v = sliced_wasserstein(a, b, ev.n_projections, rng)
            out.append(MetricRecord(f"sliced_wd_box{ev.box_edge:g}", v, len(a), len(b), "", float("nan"), cfg.seed))
        elif name == "mode_coverage":
            cov = mode_coverage(X, target.means, ev.mode_radius)
            out.append(MetricRecord("mode_coverage_min", float(cov.min()), nx, 0, "", float("nan"), cfg.seed))
            for i, c in enumerate(cov):
                out.append(MetricRecord(f"mode_coverage_{i}", float(c), nx, 0, "", float("nan"), cfg.seed))
        elif name == "correlation_mae":
            iu = np.triu_indices(X.shape[1], 1)
            v = np.mean(np.abs(correlation_matrix(X)[iu] - correlation_matrix(reference)[iu]))
            out.append(MetricRecord("correlation_mae", float(v), nx, ny, "", float("nan"), cfg.seed))
        elif name == "std_ratio":
            r = X.std(axis=0, ddof=1) / reference.std(axis=0, ddof=1)
            out.append(MetricRecord("std_ratio_max_dev", float(np.max(np.abs(r - 1.0))), nx, ny, "", float("nan"), cfg.seed))
        elif name == "mean_in_band":
            lo, hi = np.quantile(reference, [0.025, 0.975], axis=0)
            m = X.mean(axis=0)
            v = float(np.mean((m >= lo) & (m <= hi)))
            out.append(MetricRecord("mean_in_band", v, nx, ny, "", float("nan"), cfg.seed))
        else:
            raise ValueError(f"evaluation.metrics: unknown metric {name!r}")
    return out


def _sample_family(family, n, seed, ema=None):
    rng = np.random.default_rng([seed, 2])
    if ema is None:
        return family.sample(n, rng)
    params = family.parameters
    saved = [p.data for p in params]
    try:
        for p, e in zip(params, ema):
            p.data = e
        return family.sample(n, rng)
    finally:
        for p, s in zip(params, saved):
            p.data = s


def _summary(out: Path, cfg, records, extra):
    summary = {"experiment": cfg.experiment, "seed": cfg.seed, **extra}
    summary["metrics"] = {r.metric: r.value for r in records}
    with open(out / SUMMARY, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir=None, evaluate: bool = True) -> dict:
    """Train, then write trace, samples, checkpoint, metrics and summary to ``out_dir``."""
    out = Path(out_dir or cfg.out)
    with OutputLock(out):
        (out / CONFIG).write_text(emit_config(cfg))
        target = build_target(cfg, out)
        kernel = build_kernel(cfg)
        schedule = build_schedule(cfg)
        if cfg.family.layers == 0:
            family = build_family(cfg, target)
            result = train_ksivi(family, target, kernel, schedule)
        else:
            path = tg.AnnealedPath(target, cfg.family.layers)
            family = build_family(cfg, target, path)
            result = train_hksivi(family, path, kernel, schedule)
        write_trace_csv(out / TRACE, result.trace)
        save_checkpoint(out / CHECKPOINT, checkpoint_from_run(family, result.state, {"experiment": cfg.experiment}))
        ema = result.state.ema if cfg.evaluation.use_ema else None
        X = _sample_family(family, cfg.evaluation.n_samples, cfg.seed, ema)
        write_sample_csv(out / SAMPLES, X, {"experiment": cfg.experiment, "seed": cfg.seed, "source": "model"})
        records = []
        if evaluate and cfg.evaluation.metrics:
            ref = ground_truth(cfg, target, out)
            records = evaluate_samples(cfg, target, X, ref)
        write_metric_csv(records, out / METRICS)
        return _summary(out, cfg, records, {"iterations": result.state.iteration, "train_seconds": result.elapsed})


def run_ground_truth_only(cfg: ExperimentConfig, out_dir=None) -> np.ndarray:
    out = Path(out_dir or cfg.out)
    with OutputLock(out):
        target = build_target(cfg, out)
        return ground_truth(cfg, target, out)


def run_evaluate(cfg: ExperimentConfig, out_dir=None, samples_path=None) -> dict:
    out = Path(out_dir or cfg.out)
    with OutputLock(out):
        target = build_target(cfg, out)
        X, _ = read_sample_csv(samples_path or out / SAMPLES)
        ref = ground_truth(cfg, target, out)
        records = evaluate_samples(cfg, target, X, ref)
        write_metric_csv(records, out / METRICS)
        return _summary(out, cfg, records, {})


def run_variance_diag(
    cfg: ExperimentConfig, out_dir=None, sizes=(8, 16, 32), replications=1000, outer=1000, inner=200, pairs=None
) -> list[dict]:
    """Variance table of both gradient estimators at the family's initialization."""
    out = Path(out_dir or cfg.out)
    with OutputLock(out):
        target = build_target(cfg, out)
        family = build_family(cfg, target)
        rows = variance_diagnostic(
            build_kernel(cfg),
            family,
            target,
            sizes,
            replications,
            np.random.default_rng([cfg.seed, 4]),
            outer=outer,
            inner=inner,
            pairs=pairs,
        )
        write_variance_csv(rows, out / VARIANCE)
        return rows


def run_sample(cfg: ExperimentConfig, out_dir=None, n=None, checkpoint=None) -> np.ndarray:
    """Reload the checkpoint and write ``n`` fresh samples."""
    out = Path(out_dir or cfg.out)
    with OutputLock(out):
        target = build_target(cfg, out)
        family = build_family(cfg, target)
        restore_parameters(family, load_checkpoint(checkpoint or out / CHECKPOINT))
        X = _sample_family(family, n or cfg.evaluation.n_samples, cfg.seed)
        write_sample_csv(out / SAMPLES, X, {"experiment": cfg.experiment, "seed": cfg.seed, "source": "checkpoint"})
        return X

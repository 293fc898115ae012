"""Experiment configuration: typed dataclasses, presets, and a flat text format.

The text format is one ``dotted.key = <JSON value>`` per line; ``#`` starts a
comment.  Example::

    experiment = "banana"
    seed = 3
    schedule.iterations = 20000
    kernel.name = "imq"
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields

__all__ = [
    "ConfigError",
    "TargetSpec",
    "FamilySpec",
    "KernelSpec",
    "ScheduleSpec",
    "GroundTruthSpec",
    "EvalSpec",
    "ExperimentConfig",
    "EXPERIMENTS",
    "default_config",
    "parse_config",
    "parse_config_text",
    "emit_config",
    "apply_overrides",
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass
class TargetSpec:
    kind: str = "banana"
    params: dict = field(default_factory=dict)


@dataclass
class FamilySpec:
    mixing_dim: int = 3
    hidden: list = field(default_factory=lambda: [50, 50])
    init_var: float = 1.0
    learn_std: bool = True
    layers: int = 0
    sigma_ini: float = 1.0


@dataclass
class KernelSpec:
    name: str = "rbf"
    bandwidth: float | None = None
    heuristic: str = "svgd"
    c: float = 1.0
    beta: float = -0.5
    order: float = 1.0
    eps: float = 1e-3


@dataclass
class ScheduleSpec:
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
    timing: bool = False


@dataclass
class GroundTruthSpec:
    method: str = "sgld"
    particles: int = 2000
    steps: int = 20_000
    step_size: float = 1e-2
    seed: int = 12345
    init: str = "normal"
    init_scale: float = 1.0
    burn_in: float = 0.5
    thin: int = 0
    exact: bool = False


@dataclass
class EvalSpec:
    metrics: list = field(default_factory=lambda: ["mmd", "ksd"])
    n_samples: int = 2000
    n_projections: int = 128
    mode_radius: float = 3.0
    box_edge: float = 5.0
    use_ema: bool = False


@dataclass
class ExperimentConfig:
    experiment: str = "banana"
    seed: int = 0
    out: str = "runs"
    target: TargetSpec = field(default_factory=TargetSpec)
    family: FamilySpec = field(default_factory=FamilySpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    ground_truth: GroundTruthSpec = field(default_factory=GroundTruthSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    "target": TargetSpec,
    "family": FamilySpec,
    "kernel": KernelSpec,
    "schedule": ScheduleSpec,
    "ground_truth": GroundTruthSpec,
    "evaluation": EvalSpec,
}

# Per-experiment defaults layered over the dataclass defaults.
EXPERIMENTS: dict[str, dict] = {
    "banana": {
        "target.kind": "banana",
        "family.init_var": 0.25,
    },
    "multimodal": {
        "target.kind": "multimodal",
        "schedule.temperature_start": 5.0,
        "evaluation.metrics": ["mmd", "ksd", "mode_coverage"],
    },
    "x_shaped": {
        "target.kind": "x_shaped",
    },
    "logreg": {
        "target.kind": "logreg",
        "target.params": {"data": "synthetic", "n": 400, "features": 21, "alpha": 0.01, "data_seed": 0},
        "family.mixing_dim": 10,
        "family.hidden": [100, 100],
        "family.init_var": math.exp(-5.0),
        "kernel.heuristic": "median",
        "schedule.iterations": 40_000,
        "schedule.batch_size": 100,
        "ground_truth.particles": 1000,
        "ground_truth.steps": 400_000,
        "ground_truth.step_size": 1e-4,
        "ground_truth.init_scale": 0.1,
        "evaluation.metrics": ["sliced_wd", "correlation_mae", "std_ratio"],
        "evaluation.n_samples": 1000,
    },
    "diffusion": {
        "target.kind": "diffusion",
        "target.params": {"dim": 100, "dt": 0.01, "obs_every": 5, "obs_std": 0.1, "data_seed": 0},
        "family.mixing_dim": 100,
        "family.hidden": [128, 128],
        "family.init_var": math.exp(-2.0),
        "kernel.heuristic": "median",
        "schedule.iterations": 100_000,
        "schedule.batch_size": 128,
        "schedule.lr": 2e-4,
        "ground_truth.particles": 1000,
        "ground_truth.steps": 100_000,
        "ground_truth.step_size": 1e-4,
        "ground_truth.init": "zeros",
        "evaluation.metrics": ["sliced_wd", "mean_in_band"],
        "evaluation.n_samples": 1000,
    },
    "student_t": {
        "target.kind": "student_t",
        "target.params": {"nu": 2.0},
        "kernel.name": "anchored_riesz",
        "ground_truth.exact": True,
        "evaluation.metrics": ["sliced_wd_box"],
        "evaluation.n_samples": 1000,
    },
    "eight_gaussians": {
        "target.kind": "eight_gaussians",
        "family.mixing_dim": 2,
        "family.layers": 5,
        "family.sigma_ini": 1.0,
        "schedule.iterations": 20_000,
        "ground_truth.exact": True,
        "evaluation.metrics": ["mmd", "mode_coverage"],
        "evaluation.n_samples": 5000,
    },
}

TARGET_KINDS = ("banana", "multimodal", "x_shaped", "logreg", "diffusion", "student_t", "eight_gaussians", "normal")


def _set(cfg: ExperimentConfig, key: str, value, *, strict: bool = True) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        names = {"experiment", "seed", "out"}
        if key not in names:
            raise ConfigError(f"{key}: unknown key")
        setattr(cfg, key, value)
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"{key}: unknown key")
    section = getattr(cfg, parts[0])
    if parts[1] not in {f.name for f in fields(section)}:
        raise ConfigError(f"{key}: unknown key")
    setattr(section, parts[1], copy.deepcopy(value))


def default_config(experiment: str = "banana") -> ExperimentConfig:
    """Full default bundle for a named experiment."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown experiment {experiment!r} (choose from {sorted(EXPERIMENTS)})")
    cfg = ExperimentConfig(experiment=experiment)
    for key, value in EXPERIMENTS[experiment].items():
        _set(cfg, key, value)
    return cfg


def _check_type(path: str, value, expected) -> None:
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "list": isinstance(value, list),
        "dict": isinstance(value, dict),
    }[expected]
    if not ok:
        raise ConfigError(f"{path}: expected {expected}, got {type(value).__name__} {value!r}")




def _annot(section_cls, name):
    hint = {f.name: f.type for f in fields(section_cls)}[name]
    # annotations are strings under postponed evaluation
    optional = "None" in str(hint)
    base = str(hint).split("|")[0].strip()
    return base, optional


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Type and range checks; raises :class:`ConfigError` naming the field."""
    _check_type("experiment", cfg.experiment, "str")
    _check_type("seed", cfg.seed, "int")
    _check_type("out", cfg.out, "str")
    if cfg.seed < 0:
        raise ConfigError("seed: must be >= 0")
    for sec_name, sec_cls in SECTIONS.items():
        section = getattr(cfg, sec_name)
        for f in fields(sec_cls):
            value = getattr(section, f.name)
            base, optional = _annot(sec_cls, f.name)
            if value is None:
                if not optional:
                    raise ConfigError(f"{sec_name}.{f.name}: required value is missing")
                continue
            _check_type(f"{sec_name}.{f.name}", value, base)
    s, fam, gt, ev, ker = cfg.schedule, cfg.family, cfg.ground_truth, cfg.evaluation, cfg.kernel
    positive = {
        "schedule.iterations": s.iterations,
        "schedule.batch_size": s.batch_size,
        "schedule.lr": s.lr,
        "schedule.log_every": s.log_every,
        "schedule.log_batch": s.log_batch,
        "family.mixing_dim": fam.mixing_dim,
        "family.init_var": fam.init_var,
        "family.sigma_ini": fam.sigma_ini,
        "ground_truth.particles": gt.particles,
        "ground_truth.steps": gt.steps,
        "ground_truth.step_size": gt.step_size,
        "evaluation.n_samples": ev.n_samples,
        "evaluation.n_projections": ev.n_projections,
        "evaluation.mode_radius": ev.mode_radius,
        "evaluation.box_edge": ev.box_edge,
    }
    for path, value in positive.items():
        if not value > 0:
            raise ConfigError(f"{path}: must be positive, got {value!r}")
    if s.clip is not None and not s.clip > 0:
        raise ConfigError(f"schedule.clip: must be positive, got {s.clip!r}")
    if s.ema_decay is not None and not 0.0 <= s.ema_decay < 1.0:
        raise ConfigError(f"schedule.ema_decay: must lie in [0, 1), got {s.ema_decay!r}")
    if s.temperature_start is not None and s.temperature_start < 1.0:
        raise ConfigError(f"schedule.temperature_start: must be >= 1, got {s.temperature_start!r}")
    if s.estimator not in ("vanilla", "u-stat"):
        raise ConfigError(f"schedule.estimator: must be 'vanilla' or 'u-stat', got {s.estimator!r}")
    if s.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"schedule.optimizer: must be 'adam' or 'sgd', got {s.optimizer!r}")
    if fam.layers < 0:
        raise ConfigError("family.layers: must be >= 0")
    if any(not isinstance(h, int) or h < 1 for h in fam.hidden):
        raise ConfigError(f"family.hidden: widths must be positive integers, got {fam.hidden!r}")
    if ker.heuristic not in ("median", "svgd"):
        raise ConfigError(f"kernel.heuristic: must be median or svgd, got {ker.heuristic!r}")
    if ker.name not in ("rbf", "imq", "riesz", "anchored_riesz"):
        raise ConfigError(f"kernel.name: must be rbf, imq, riesz or anchored_riesz, got {ker.name!r}")
    if cfg.target.kind not in TARGET_KINDS:
        raise ConfigError(f"target.kind: unknown target {cfg.target.kind!r}")
    if gt.method not in ("sgld", "mala"):
        raise ConfigError(f"ground_truth.method: must be sgld or mala, got {gt.method!r}")
    if not 0.0 <= gt.burn_in < 1.0:
        raise ConfigError(f"ground_truth.burn_in: must lie in [0, 1), got {gt.burn_in!r}")
    return cfg


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse the flat ``key = value`` format; the experiment preset is applied first."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: {source}:{lineno}: value is not valid JSON ({exc.msg})") from None
        entries.append((key, parsed))
    keys = [k for k, _ in entries]
    dupes = {k for k in keys if keys.count(k) > 1}
    if dupes:
        raise ConfigError(f"{sorted(dupes)[0]}: given more than once")
    values = dict(entries)
    if "experiment" not in values:
        raise ConfigError("experiment: required key is missing")
    _check_type("experiment", values["experiment"], "str")
    cfg = default_config(values.pop("experiment"))
    for key, value in values.items():
        _set(cfg, key, value)
    return validate(cfg)


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def emit_config(cfg: ExperimentConfig) -> str:
    """Write every field, so the text fully determines the experiment."""
    lines = [f"experiment = {json.dumps(cfg.experiment)}", f"seed = {json.dumps(cfg.seed)}", f"out = {json.dumps(cfg.out)}"]
    for sec_name in SECTIONS:
        section = getattr(cfg, sec_name)
        for f in fields(section):
            lines.append(f"{sec_name}.{f.name} = {json.dumps(getattr(section, f.name), sort_keys=True)}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key overrides (``None`` values are skipped)."""
    out = copy.deepcopy(cfg)
    for key, value in overrides.items():
        if value is not None:
            _set(out, key.replace("__", "."), value)
    return validate(out)

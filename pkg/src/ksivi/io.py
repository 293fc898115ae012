"""Checkpoints, CSV artifacts and the waveform loader."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_run",
    "restore_parameters",
    "restore_state",
    "write_sample_csv",
    "read_sample_csv",
    "write_trace_csv",
    "read_trace_csv",
    "LabeledDataset",
    "MalformedRow",
    "load_waveform",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = "KSIVI-CHECKPOINT"


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    family_spec: dict
    parameters: dict
    iteration: int = 0
    optimizer: dict = field(default_factory=dict)
    moments_m: list = field(default_factory=list)
    moments_v: list = field(default_factory=list)
    ema: list | None = None
    rng_state: dict | None = None
    bad_streak: int = 0
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _tensor_records(ckpt: Checkpoint):
    for name, arr in ckpt.parameters.items():
        yield f"param/{name}", arr
    for i, arr in enumerate(ckpt.moments_m):
        yield f"adam_m/{i}", arr
    for i, arr in enumerate(ckpt.moments_v):
        yield f"adam_v/{i}", arr
    for i, arr in enumerate(ckpt.ema or []):
        yield f"ema/{i}", arr


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Header, JSON metadata line, then ``name shape nbytes`` + raw little-endian float64 per tensor."""
    records = list(_tensor_records(ckpt))
    meta = {
        "family_spec": ckpt.family_spec,
        "iteration": ckpt.iteration,
        "optimizer": ckpt.optimizer,
        "has_ema": ckpt.ema is not None,
        "rng_state": ckpt.rng_state,
        "bad_streak": ckpt.bad_streak,
        "extra": ckpt.extra,
        "n_tensors": len(records),
    }
    with open(path, "wb") as fh:
        fh.write(f"{_MAGIC} {ckpt.version}\n".encode())
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for name, arr in records:
            arr = np.asarray(arr, dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            fh.write(f"{name} {shape or '-'} {arr.nbytes}\n".encode())
            fh.write(arr.tobytes())
        fh.write(b"END\n")


def _readline(fh, what: str) -> str:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    try:
        return line[:-1].decode()
    except UnicodeDecodeError:
        raise CheckpointError(f"checkpoint corrupt at {what}") from None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        head = _readline(fh, "header").split()
        if len(head) != 2 or head[0] != _MAGIC:
            raise CheckpointError("not a checkpoint file (bad header)")
        if head[1] != str(CHECKPOINT_VERSION):
            raise CheckpointError(f"unsupported checkpoint version {head[1]} (expected {CHECKPOINT_VERSION})")
        try:
            meta = json.loads(_readline(fh, "metadata"))
        except json.JSONDecodeError:
            raise CheckpointError("checkpoint metadata is corrupt") from None
        tensors = {}
        for _ in range(int(meta["n_tensors"])):
            parts = _readline(fh, "tensor record").split(" ")
            if len(parts) != 3:
                raise CheckpointError(f"corrupt tensor record {parts!r}")
            name, shape_s, nbytes_s = parts
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            nbytes = int(nbytes_s)
            if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {name}: byte count does not match shape")
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointError(f"checkpoint truncated inside tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        if _readline(fh, "end marker") != "END":
            raise CheckpointError("checkpoint end marker missing")
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint end marker")

    def group(prefix):
        keys = [k for k in tensors if k.startswith(prefix)]
        return keys

    params = {k.split("/", 1)[1]: tensors[k] for k in group("param/")}
    m = [tensors[f"adam_m/{i}"] for i in range(len(group("adam_m/")))]
    v = [tensors[f"adam_v/{i}"] for i in range(len(group("adam_v/")))]
    ema = [tensors[f"ema/{i}"] for i in range(len(group("ema/")))] if meta["has_ema"] else None
    return Checkpoint(
        family_spec=meta["family_spec"],
        parameters=params,
        iteration=meta["iteration"],
        optimizer=meta["optimizer"],
        moments_m=m,
        moments_v=v,
        ema=ema,
        rng_state=meta["rng_state"],
        bad_streak=meta.get("bad_streak", 0),
        extra=meta["extra"],
    )


def checkpoint_from_run(family, state, extra=None) -> Checkpoint:
    """Snapshot a family and its :class:`~ksivi.train.TrainState`."""
    opt = state.optimizer
    return Checkpoint(
        family_spec=family.spec(),
        parameters={n: p.data.copy() for n, p in family.named_parameters()},
        iteration=state.iteration,
        optimizer=opt.state_dict(),
        moments_m=[a.copy() for a in opt.m],
        moments_v=[a.copy() for a in opt.v],
        ema=None if state.ema is None else [a.copy() for a in state.ema],
        rng_state=state.rng.bit_generator.state,
        bad_streak=state.bad_streak,
        extra=dict(extra or {}),
    )


def restore_parameters(family, ckpt: Checkpoint) -> None:
    named = dict(family.named_parameters())
    if set(named) != set(ckpt.parameters):
        missing = sorted(set(named) ^ set(ckpt.parameters))
        raise CheckpointError(f"parameter names differ from the family: {missing}")
    for name, p in named.items():
        arr = ckpt.parameters[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.copy()


def restore_state(ckpt: Checkpoint):
    """Rebuild the optimizer / rng / EMA state saved in ``ckpt``."""
    from .train import OptimizerState, TrainState

    o = ckpt.optimizer
    opt = OptimizerState(o["variant"], o["lr"], o["beta1"], o["beta2"], o["eps"], o["count"])
    opt.m = [a.copy() for a in ckpt.moments_m]
    opt.v = [a.copy() for a in ckpt.moments_v]
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    ema = None if ckpt.ema is None else [a.copy() for a in ckpt.ema]
    return TrainState(ckpt.iteration, opt, rng, ema, ckpt.bad_streak)


# -- CSV ----------------------------------------------------------------------


def write_sample_csv(path, X, metadata: dict | None = None) -> None:
    """One row per sample, columns ``x0..x{d-1}``, 17 significant digits."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(metadata or {}, sort_keys=True) + "\n")
        fh.write(",".join(f"x{j}" for j in range(X.shape[1])) + "\n")
        for row in X:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_sample_csv(path) -> tuple[np.ndarray, dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing metadata line")
        meta = json.loads(first[2:])
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    X = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    return X, meta


def _cell(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_trace_csv(path, trace: list[dict]) -> None:
    columns = []
    for row in trace:
        for k in row:
            if k not in columns:
                columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in trace:
            w.writerow([_cell(row[c]) if c in row else "" for c in columns])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append(
                {k: (int(v) if k == "iteration" else float(v)) for k, v in row.items() if v != ""}
            )
        return out


# -- waveform -------------------------------------------------------------------


class MalformedRow(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass
class LabeledDataset:
    """Covariates with a leading intercept column and binary labels."""

    covariates: np.ndarray
    labels: np.ndarray
    rows_in: int = 0
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.labels) and not np.all(self.covariates[:, 0] == 1.0):
            raise ValueError("first covariate column must be the intercept (all ones)")
        if not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValueError("labels must be binary")

    @property
    def rows_parsed(self) -> int:
        return len(self.labels)

    @property
    def rows_rejected(self) -> int:
        return len(self.rejected)


def load_waveform(path, features: int = 21, positive=(1, 2), strict: bool = True) -> LabeledDataset:
    """Read ``features`` comma-separated covariates plus an integer class per line.

    Classes in ``positive`` map to 1 and every other class to 0, so a file
    that is already binary loads unchanged.  With ``strict=False`` malformed
    rows are skipped and logged with their line number instead of raising.
    """
    width = features + 1
    X, y, rejected, rows_in = [], [], [], 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            rows_in += 1
            parts = line.split(",")
            try:
                if len(parts) != width:
                    raise MalformedRow(lineno, f"expected {width} fields, found {len(parts)}")
                try:
                    vals = [float(p) for p in parts]
                except ValueError:
                    raise MalformedRow(lineno, "non-numeric field") from None
                if not np.all(np.isfinite(vals)):
                    raise MalformedRow(lineno, "non-finite field")
                cls = vals[-1]
                if cls != int(cls):
                    raise MalformedRow(lineno, f"class label {parts[-1]!r} is not an integer")
            except MalformedRow as exc:
                if strict:
                    raise
                log.warning("rejected %s", exc)
                rejected.append((exc.line, exc.reason))
                continue
            X.append([1.0] + vals[:-1])
            y.append(1.0 if int(cls) in positive else 0.0)
    cov = np.asarray(X, dtype=np.float64).reshape(-1, width)
    return LabeledDataset(cov, np.asarray(y), rows_in, rejected)

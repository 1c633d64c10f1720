"""Run configuration files, binary checkpoints and CSV output."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .metrics import MetricsReport
from .trainer import TrainConfig, TrainState, init_state

MAGIC = b"CKGN"
FORMAT_VERSION = 1
OUT_ROOT_ENV = "CKGAN_OUT_ROOT"
METRICS_HEADER = ["iter", "modes", "hq", "kl", "loss_d", "loss_g",
                  "xi_1", "xi_2", "xi_3", "xi_4", "xi_5", "xi_6", "seconds"]

# keys a run config may carry besides the TrainConfig fields
RUN_DEFAULTS: dict[str, Any] = {"out_dir": "run", "checkpoint_every": None}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# config


def _train_fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name == "batch_size":
        if value in (None, "full"):
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {name!r}: expected an integer, 'full' or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {name!r}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {name!r}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {name!r}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"field {name!r}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {name!r}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(doc: dict[str, Any]) -> tuple[TrainConfig, dict[str, Any]]:
    """Split a flat document into a validated TrainConfig and run options.

    Unknown keys are rejected; missing keys take the defaults.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    fields = _train_fields()
    defaults = TrainConfig()
    unknown = sorted(set(doc) - set(fields) - set(RUN_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        if name in fields:
            kwargs[name] = _coerce(name, value, getattr(defaults, name))
    extras = dict(RUN_DEFAULTS)
    for name in RUN_DEFAULTS:
        if name in doc:
            extras[name] = doc[name]
    if extras["checkpoint_every"] is not None and (
            isinstance(extras["checkpoint_every"], bool) or not isinstance(extras["checkpoint_every"], int)
            or extras["checkpoint_every"] < 1):
        raise ConfigError("field 'checkpoint_every': expected a positive integer or null")
    if not isinstance(extras["out_dir"], str):
        raise ConfigError("field 'out_dir': expected a string")
    cfg = TrainConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, extras


def load_config(path: str | os.PathLike) -> tuple[TrainConfig, dict[str, Any]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def config_to_dict(cfg: TrainConfig, extras: dict[str, Any] | None = None) -> dict[str, Any]:
    doc = dataclasses.asdict(cfg)
    for k, v in doc.items():
        if isinstance(v, tuple):
            doc[k] = list(v)
    doc.update(extras or {})
    return doc


def resolve_out(path: str | os.PathLike) -> Path:
    """Relative output paths live under $CKGAN_OUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# --------------------------------------------------------------------------
# CSV


def fmt(value: Any) -> str:
    """Locale-independent text with 12 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        return format(v, ".12g")
    return str(value)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def write_points(path: str | os.PathLike, points: np.ndarray) -> None:
    write_csv(path, ["x", "y"], np.asarray(points).tolist())


def read_points(path: str | os.PathLike) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, 2)


class MetricsWriter:
    """Appends MetricsReport rows to a CSV file as they arrive."""

    def __init__(self, path: str | os.PathLike, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_bytes((",".join(METRICS_HEADER) + "\n").encode("utf-8"))

    def write(self, report: MetricsReport) -> None:
        with self.path.open("ab") as fh:
            fh.write((",".join(fmt(v) for v in report.row()) + "\n").encode("utf-8"))


# --------------------------------------------------------------------------
# checkpoints


def _tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for tag, params in (("G", state.G), ("D", state.D)):
        for k, v in params.weights.items():
            out[f"{tag}/{k}"] = v
        for k, v in params.buffers.items():
            out[f"{tag}.buf/{k}"] = v
    if state.logits is not None:
        out["xi"] = state.logits
    for tag, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d), ("opt_xi", state.opt_xi)):
        for k, v in opt.accum.items():
            out[f"{tag}/{k}"] = v
    return out


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path: str | os.PathLike, state: TrainState) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    tensors = _tensors(state)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.tobytes())
    buf.write(struct.pack("<QQ", state.iteration, state.xi_updates))
    buf.write(struct.pack("<ddd", state.last_loss_d, state.last_loss_g, state.elapsed))
    for blob in (json.dumps({k: _rng_state(r) for k, r in state.rngs.items()}),
                 json.dumps(config_to_dict(state.config))):
        raw = blob.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def _read(fh: io.BytesIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Raw tensor table and metadata of a checkpoint file."""
    try:
        fh = io.BytesIO(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {str(path)!r}: {exc.strerror}") from None
    if _read(fh, 4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", _read(fh, 4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack("<I", _read(fh, 4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    iteration, xi_updates = struct.unpack("<QQ", _read(fh, 16))
    loss_d, loss_g, elapsed = struct.unpack("<ddd", _read(fh, 24))
    blobs = []
    for _ in range(2):
        (blen,) = struct.unpack("<I", _read(fh, 4))
        blobs.append(json.loads(_read(fh, blen).decode("utf-8")))
    meta = {"iteration": iteration, "xi_updates": xi_updates, "last_loss_d": loss_d,
            "last_loss_g": loss_g, "elapsed": elapsed, "rngs": blobs[0], "config": blobs[1]}
    return tensors, meta


def load_checkpoint(path: str | os.PathLike, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState; ``config`` overrides the stored one but must
    describe the same architecture."""
    tensors, meta = read_checkpoint(path)
    stored, _ = config_from_dict({k: v for k, v in meta["config"].items() if k not in RUN_DEFAULTS})
    cfg = config or stored
    state = init_state(dataclasses.replace(cfg))
    expected = _tensors(state)
    for name, arr in expected.items():
        if name.startswith("opt_"):
            continue
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r} (architecture mismatch?)")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tensors[name].shape}, architecture expects {arr.shape}")
    extra = sorted(n for n in tensors if not n.startswith("opt_") and n not in expected)
    if extra:
        raise CheckpointError(f"checkpoint has tensors the architecture lacks: {', '.join(extra[:5])}")
    for name, arr in tensors.items():
        tag, _, key = name.partition("/")
        if tag in ("G", "D"):
            getattr(state, tag).weights[key] = arr.copy()
        elif tag in ("G.buf", "D.buf"):
            getattr(state, tag[0]).buffers[key] = arr.copy()
        elif name == "xi":
            state.kernel.logits = arr.copy()
        elif tag in ("opt_g", "opt_d", "opt_xi"):
            getattr(state, tag).accum[key] = arr.copy()
    state.iteration = meta["iteration"]
    state.xi_updates = meta["xi_updates"]
    state.last_loss_d = meta["last_loss_d"]
    state.last_loss_g = meta["last_loss_g"]
    state.elapsed = meta["elapsed"]
    for k, st in meta["rngs"].items():
        state.rngs[k].bit_generator.state = st
    return state


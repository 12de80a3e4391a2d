"""On-disk formats: checkpoints, CSV tables and schema-checked JSON, all written atomically."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .autograd import Tensor
from .config import ExperimentConfig
from .data import TaskInfo
from .model import ArchSpec, MultiTaskModel, build
from .train import Adam, History, OptimConfig, param_groups

CHECKPOINT_MAGIC = b"MTLNCKPT"
CHECKPOINT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


# ------------------------------------------------------------------ writing


def atomic_write(path, data: bytes | str) -> Path:
    """Write to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def schema(name: str) -> dict:
    text = resources.files("mtlnorm").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj, schema_name: str | None = None) -> Path:
    if schema_name is not None:
        jsonschema.validate(obj, schema(schema_name))
    return atomic_write(path, dumps(obj))


HISTORY_HEADER = ["epoch", "task", "split", "loss", "metric"]


def write_history(path, history: History, task_names: list[str]) -> Path:
    rows = ([r["epoch"], task_names[r["task"]], r["split"], r["loss"], r["metric"]] for r in history.rows)
    return write_csv(path, HISTORY_HEADER, rows)


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: MultiTaskModel
    config: ExperimentConfig
    tasks: list[TaskInfo]
    optimizer: Adam | None = None

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]


def _arrays(model: MultiTaskModel, optimizer: Adam | None) -> list[tuple[str, np.ndarray]]:
    out = [(f"param:{n}", p.data) for n, p in model.named_parameters()]
    for name, st in model.named_norm_states():
        if st.beta is not None and st.beta_frozen:
            out.append((f"frozen:{name}.beta", st.beta.data))
        out.append((f"stats:{name}.running_mean", st.running_mean))
        out.append((f"stats:{name}.running_var", st.running_var))
        out.append((f"stats:{name}.initialized", st.stats_initialized.astype(np.float64)))
    out += [(f"mask:{i}", m) for i, m in enumerate(model.masks)]
    if optimizer is not None:
        for n in sorted(optimizer.m):
            out.append((f"adam_m:{n}", optimizer.m[n]))
            out.append((f"adam_v:{n}", optimizer.v[n]))
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    model, opt = ckpt.model, ckpt.optimizer
    arrays = _arrays(model, opt)
    header = {
        "format": "mtlnorm-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config_hash": ckpt.config.hash(),
        "config": ckpt.config.to_dict(),
        "arch": model.spec.to_dict(),
        "mode": model.mode,
        "model_seed": model.seed,
        "tasks": [asdict(t) for t in ckpt.tasks],
        "norms": [
            {"name": n, "variant": st.variant, "beta_frozen": st.beta_frozen, "momentum": st.momentum, "eps": st.eps}
            for n, st in model.named_norm_states()
        ],
        "optimizer": None if opt is None else {"step_count": opt.step_count, "lr_scale": opt.lr_scale},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    parts += [np.ascontiguousarray(a, dtype=_LE_F64).tobytes() for _, a in arrays]
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, checkpoint_bytes(ckpt))


def read_header(path) -> tuple[dict, memoryview]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    return header, memoryview(blob)[16 + hlen :]


def load_checkpoint(path, expect_config: ExperimentConfig | None = None, force: bool = False) -> Checkpoint:
    """Rebuild model, optimizer state and config.

    If ``expect_config`` is given its hash must match the one stored in the file,
    unless ``force`` is set.
    """
    header, payload = read_header(path)
    config = ExperimentConfig(header["config"], str(path))
    if config.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its recorded hash")
    if expect_config is not None and expect_config.hash() != header["config_hash"] and not force:
        raise ConfigMismatch(
            f"{path}: checkpoint was trained under config {header['config_hash'][:12]}, "
            f"given config hashes to {expect_config.hash()[:12]} (use --force to override)"
        )
    spec = ArchSpec.from_dict(header["arch"])
    model = build(spec, header["mode"], header["model_seed"])
    states = dict(model.named_norm_states())
    for meta in header["norms"]:
        st = states[meta["name"]]
        if meta["beta_frozen"]:
            st.beta = Tensor(np.zeros_like(st.gamma.data))
            st.beta_frozen = True
    params = dict(model.named_parameters())
    opt = None
    if header["optimizer"] is not None:
        opt = Adam(param_groups(model, OptimConfig(**config["optim"])), OptimConfig(**config["optim"]))
        opt.step_count = int(header["optimizer"]["step_count"])
        opt.lr_scale = float(header["optimizer"]["lr_scale"])

    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(payload[offset : offset + n], dtype=_LE_F64).reshape(shape).astype(np.float64)
        offset += n
        kind, _, name = entry["name"].partition(":")
        if kind == "param":
            params[name].data[...] = arr
        elif kind == "frozen":
            states[name.rsplit(".", 1)[0]].beta.data[...] = arr
        elif kind == "stats":
            base, field = name.rsplit(".", 1)
            st = states[base]
            if field == "initialized":
                st.stats_initialized[...] = arr.astype(bool)
            else:
                getattr(st, field)[...] = arr
        elif kind == "mask":
            model.masks[int(name)][...] = arr
        elif kind in ("adam_m", "adam_v") and opt is not None:
            (opt.m if kind == "adam_m" else opt.v)[name][...] = arr
        else:
            raise CheckpointError(f"{path}: unknown array {entry['name']!r}")
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing bytes")
    tasks = [TaskInfo(**t) for t in header["tasks"]]
    return Checkpoint(model, config, tasks, opt)

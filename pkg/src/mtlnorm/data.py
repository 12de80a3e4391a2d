"""Single-domain multi-task datasets.

Synthetic images are generated from a uniform latent vector; every task reads a
subset of the latent coordinates, so overlapping subsets give related tasks.
Also provides the noisy-duplicate task family, an IDX (MNIST-style) reader and
a small binary container for caching generated datasets.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed binary input; the message carries the byte offset."""


class UnsupportedTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskInfo:
    name: str
    kind: str  # "classification" or "regression"
    num_classes: int = 0

    @property
    def loss_kind(self) -> str:
        return "cross_entropy" if self.kind == "classification" else "mse"

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.kind == "classification" else 1


class MultiTaskDataset:
    """Inputs shared by all tasks, one target vector per task, and a split tag per row."""

    def __init__(self, inputs, targets, tasks, split):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.targets = [np.asarray(t, dtype=np.float64) for t in targets]
        self.tasks = list(tasks)
        self.split = np.asarray(split, dtype=np.int8)
        n = self.inputs.shape[0]
        if len(self.targets) != len(self.tasks):
            raise ValueError("one target vector per task is required")
        for info, t in zip(self.tasks, self.targets):
            if t.shape != (n,):
                raise ValueError(f"task {info.name!r} has {t.shape[0]} targets for {n} inputs")
        if self.split.shape != (n,) or not np.isin(self.split, (0, 1, 2)).all():
            raise ValueError("split must tag every input with 0 (train), 1 (val) or 2 (test)")
        for arr in (self.inputs, self.split, *self.targets):
            arr.setflags(write=False)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(split))

    def part(self, split: str) -> tuple[np.ndarray, list[np.ndarray]]:
        idx = self.indices(split)
        return self.inputs[idx], [t[idx] for t in self.targets]

    def batches(self, split: str, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = True):
        """Yield ``(x, [y_t])`` mini-batches; shuffled when ``rng`` is given."""
        idx = self.indices(split)
        if rng is not None:
            idx = idx[rng.permutation(idx.size)]
        stop = idx.size - (idx.size % batch_size if drop_last else 0)
        for lo in range(0, stop, batch_size):
            b = idx[lo : lo + batch_size]
            yield self.inputs[b], [t[b] for t in self.targets]

    def with_tasks(self, keep: list[int]) -> "MultiTaskDataset":
        return MultiTaskDataset(
            self.inputs, [self.targets[i] for i in keep], [self.tasks[i] for i in keep], self.split
        )


# ------------------------------------------------------------------- synth


@dataclass
class TaskDef:
    latent: list[int]
    kind: str = "classification"
    num_classes: int = 2
    noise: float = 0.0
    name: str = ""


@dataclass
class SynthSpec:
    latent_dim: int = 8
    num_samples: int = 2000
    image_size: tuple[int, int, int] = (1, 16, 16)
    tasks: list[TaskDef] = field(default_factory=list)
    pixel_noise: float = 0.05
    pattern_smoothing: float = 1.5
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["tasks"] = [TaskDef(**t) for t in d.get("tasks", [])]
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


def reference_spec(num_samples: int = 2000, seed: int = 0, label_noise: float = 1.0) -> SynthSpec:
    """Three tasks: two overlapping classifications and a regression on the remaining latents.

    ``label_noise`` is added to the classification scores before thresholding,
    so the Bayes accuracy of those tasks stays below one (about 0.75 at 1.0).
    """
    return SynthSpec(
        latent_dim=8,
        num_samples=num_samples,
        image_size=(1, 16, 16),
        tasks=[
            TaskDef([0, 1, 2, 3], "classification", 2, label_noise, "cls_a"),
            TaskDef([2, 3, 4, 5], "classification", 2, label_noise, "cls_b"),
            TaskDef([4, 5, 6, 7], "regression", 0, name="reg"),
        ],
        seed=seed,
    )


def _split_tags(n: int, fractions, rng: np.random.Generator) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not np.isclose(f.sum(), 1.0):
        raise ValueError("split_fractions must be three non-negative numbers summing to 1")
    n_train = int(round(f[0] * n))
    n_val = int(round(f[1] * n))
    tags = np.full(n, 2, dtype=np.int8)
    perm = rng.permutation(n)
    tags[perm[:n_train]] = 0
    tags[perm[n_train : n_train + n_val]] = 1
    return tags


def synth_generate(spec: SynthSpec) -> MultiTaskDataset:
    if spec.latent_dim < 1 or spec.num_samples < 1:
        raise ValueError("latent_dim and num_samples must be positive")
    if not spec.tasks:
        raise ValueError("at least one task definition is required")
    for t in spec.tasks:
        if not t.latent:
            raise ValueError(f"task {t.name!r} has an empty latent subset")
        if any(not 0 <= j < spec.latent_dim for j in t.latent):
            raise ValueError(f"task {t.name!r} reads latents outside [0, {spec.latent_dim})")
        if t.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {t.kind!r}")
        if t.kind == "classification" and t.num_classes < 2:
            raise ValueError("classification tasks need at least two classes")

    rng = np.random.default_rng(spec.seed)
    n, d = spec.num_samples, spec.latent_dim
    c, h, w = spec.image_size
    z = rng.uniform(-1.0, 1.0, (n, d))
    basis = rng.normal(0.0, 1.0, (d, c, h, w))
    if spec.pattern_smoothing > 0:
        basis = gaussian_filter(basis, sigma=(0, 0, spec.pattern_smoothing, spec.pattern_smoothing), mode="wrap")
    # each pattern has std sqrt(3/d), so the latent mixture has unit variance per pixel
    basis /= basis.reshape(d, -1).std(axis=1).reshape(d, 1, 1, 1)
    basis *= np.sqrt(3.0 / d)
    images = np.tanh(np.tensordot(z, basis, axes=1))
    images = images + spec.pixel_noise * rng.normal(0.0, 1.0, images.shape)
    split = _split_tags(n, spec.split_fractions, rng)

    targets, infos = [], []
    for k, t in enumerate(spec.tasks):
        score = z[:, t.latent].sum(axis=1) / np.sqrt(len(t.latent) / 3.0)
        if t.noise > 0:
            score = score + t.noise * np.random.default_rng([spec.seed, k]).normal(0.0, 1.0, n)
        if t.kind == "regression":
            y = score
        elif t.num_classes == 2:
            y = (score > 0).astype(np.float64)
        else:
            edges = np.quantile(score, np.linspace(0, 1, t.num_classes + 1)[1:-1])
            y = np.digitize(score, edges).astype(np.float64)
        targets.append(y)
        infos.append(TaskInfo(t.name or f"task{k}", t.kind, t.num_classes if t.kind == "classification" else 0))
    return MultiTaskDataset(images, targets, infos, split)


def noisy_duplicate(dataset: MultiTaskDataset, source_task: int, xi: float, seed: int = 0) -> MultiTaskDataset:
    """Append a copy of a regression task corrupted by N(0, xi * var_train(source))."""
    src = dataset.tasks[source_task]
    if src.kind != "regression":
        raise UnsupportedTaskError("noisy duplicates are defined for regression tasks only")
    if xi < 0:
        raise ValueError("xi must be non-negative")
    y = dataset.targets[source_task]
    var = float(np.var(y[dataset.indices("train")]))
    if xi == 0:
        noisy = y.copy()
    else:
        noisy = y + np.random.default_rng(seed).normal(0.0, np.sqrt(xi * var), y.shape)
    info = TaskInfo(f"{src.name}_noisy", "regression", 0)
    return MultiTaskDataset(dataset.inputs, [*dataset.targets, noisy], [*dataset.tasks, info], dataset.split)


def noisy_family(base: MultiTaskDataset, xi: float, keep: int = 0, source: int = 2, seed: int = 0) -> MultiTaskDataset:
    """Three-task variant: task ``keep``, regression ``source`` and its noisy copy."""
    return noisy_duplicate(base.with_tasks([keep, source]), 1, xi, seed)


# --------------------------------------------------------------------- IDX

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    payload = int(np.prod(dims))
    have = len(raw) - header_end
    if have != payload:
        raise FormatError(
            f"{path}: header dims {dims} need {payload} payload bytes, found {have} "
            f"(payload starts at byte offset {header_end})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def digit_tasks(labels) -> list[np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    return [labels.astype(np.float64), (labels % 2).astype(np.float64), (labels >= 5).astype(np.float64)]


def idx_load(images_path, labels_path, split_fractions=(0.7, 0.15, 0.15), seed: int = 0) -> MultiTaskDataset:
    """Load an IDX digit corpus as three tasks: class (10), parity (2), label >= 5 (2)."""
    images = _read_idx(images_path, _IDX_IMAGES)
    labels = _read_idx(labels_path, _IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels (byte offset 4)")
    if labels.size and labels.max() > 9:
        raise FormatError("digit labels must lie in 0..9")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    tasks = [
        TaskInfo("digit", "classification", 10),
        TaskInfo("parity", "classification", 2),
        TaskInfo("magnitude", "classification", 2),
    ]
    split = _split_tags(x.shape[0], split_fractions, np.random.default_rng(seed))
    return MultiTaskDataset(x, digit_tasks(labels), tasks, split)


# --------------------------------------------------------------- container

_DATA_MAGIC = b"MTLNDATA"
_DATA_VERSION = 1


def save_dataset(dataset: MultiTaskDataset, path) -> None:
    """Header JSON followed by little-endian float64 arrays (inputs, split, targets)."""
    arrays = [("inputs", dataset.inputs), ("split", dataset.split.astype(np.float64))]
    arrays += [(f"target{k}", t) for k, t in enumerate(dataset.targets)]
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "format": "mtlnorm-dataset",
        "version": _DATA_VERSION,
        "tasks": [asdict(t) for t in dataset.tasks],
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_dataset(path) -> MultiTaskDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _DATA_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    if header.get("version") != _DATA_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {header.get('version')}")
    base = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"]))
        start = base + e["offset"]
        if start + 8 * n > len(raw):
            raise FormatError(f"{path}: array {e['name']} truncated at byte offset {len(raw)}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"])
    tasks = [TaskInfo(**t) for t in header["tasks"]]
    targets = [arrays[f"target{k}"] for k in range(len(tasks))]
    return MultiTaskDataset(arrays["inputs"], targets, tasks, arrays["split"].astype(np.int8))

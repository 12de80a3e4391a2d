"""Multi-task networks: one shared feature extractor, per-task heads.

The only task-specific parts of the extractor are (optionally) its
normalization layers; which variant is used follows the sharing mode.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .norm import NormState, norm_forward

SHARING_MODES = ("STL", "HPS", "TSBN", "TSSigmaBN")

_MODE_VARIANTS = {
    ("STL", "batch"): "BN",
    ("HPS", "batch"): "BN",
    ("TSBN", "batch"): "TSBN",
    ("TSSigmaBN", "batch"): "TSSigmaBN",
    ("STL", "layer"): "LN",
    ("HPS", "layer"): "LN",
    ("TSBN", "layer"): "TSLN",
    ("TSSigmaBN", "layer"): "TSSigmaLN",
}


class SpecError(ValueError):
    """Architecture specification is invalid."""


@dataclass
class BlockSpec:
    """One extractor block: conv|dense -> norm -> activation [-> mean-pool]."""

    kind: str = "conv"
    width: int = 16
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"
    pool: int = 1


@dataclass
class ArchSpec:
    input_shape: tuple[int, ...]
    blocks: list[BlockSpec]
    # per task: hidden widths followed by the output width
    head_widths: list[list[int]]
    norm: str = "batch"
    hps_variant: str | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.head_widths)

    @property
    def input_kind(self) -> str:
        return "vector" if len(self.input_shape) == 1 else "image"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            blocks=[BlockSpec(**b) for b in d["blocks"]],
            head_widths=[list(map(int, h)) for h in d["head_widths"]],
            norm=d.get("norm", "batch"),
            hps_variant=d.get("hps_variant"),
        )

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise SpecError("at least one task head is required")
        if not self.blocks:
            raise SpecError("at least one extractor block is required")
        if len(self.input_shape) not in (1, 3) or any(int(v) < 1 for v in self.input_shape):
            raise SpecError(f"input_shape must be (F,) or (C, H, W), got {self.input_shape}")
        if self.norm not in ("batch", "layer"):
            raise SpecError(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        image = len(self.input_shape) == 3
        for i, b in enumerate(self.blocks):
            if b.width < 1:
                raise SpecError(f"block {i} has zero width")
            if b.kind not in ("conv", "dense"):
                raise SpecError(f"block {i}: unknown kind {b.kind!r}")
            if b.kind == "conv" and not image:
                raise SpecError(f"block {i}: conv block after vector features")
            if b.activation not in ("relu", "gelu", "none"):
                raise SpecError(f"block {i}: unknown activation {b.activation!r}")
            if b.kind == "dense":
                image = False
            if b.kernel < 1 or b.stride < 1 or b.pool < 1:
                raise SpecError(f"block {i}: kernel, stride and pool must be >= 1")
        for t, widths in enumerate(self.head_widths):
            if not widths or any(w < 1 for w in widths):
                raise SpecError(f"head {t} has an empty or zero-width layer")


def reference_arch(task_outputs=(2, 2, 1), norm: str = "batch") -> ArchSpec:
    """1x16x16 images, conv widths 16/32/32 with 2x2 pooling after the first two."""
    return ArchSpec(
        input_shape=(1, 16, 16),
        blocks=[
            BlockSpec("conv", 16, 3, 1, "relu", 2),
            BlockSpec("conv", 32, 3, 1, "relu", 2),
            BlockSpec("conv", 32, 3, 1, "relu", 1),
        ],
        head_widths=[[64, int(k)] for k in task_outputs],
        norm=norm,
    )


@dataclass
class Census:
    shared_count: int
    per_task_norm_count: int
    norm_count: int
    head_count: int
    frozen_count: int
    total: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Trunk:
    weights: list[Tensor] = field(default_factory=list)
    norms: list[NormState] = field(default_factory=list)


class MultiTaskModel:
    def __init__(self, spec: ArchSpec, mode: str, seed: int = 0):
        spec.validate()
        if mode not in SHARING_MODES:
            raise SpecError(f"unknown sharing mode {mode!r}")
        self.spec = spec
        self.mode = mode
        self.seed = int(seed)
        variant = _MODE_VARIANTS[(mode, spec.norm)]
        if mode == "HPS" and spec.hps_variant:
            variant = spec.hps_variant
        self.norm_variant = variant
        rng = np.random.default_rng(self.seed)
        T = spec.num_tasks
        n_trunks = T if mode == "STL" else 1
        norm_tasks = 1 if mode == "STL" else T
        self.trunks: list[_Trunk] = []
        for _ in range(n_trunks):
            trunk = _Trunk()
            shape = tuple(spec.input_shape)
            for b in spec.blocks:
                if b.kind == "conv":
                    fan_in = shape[0] * b.kernel * b.kernel
                    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (b.width, shape[0], b.kernel, b.kernel))
                    pad = b.kernel // 2
                    h = (shape[1] + 2 * pad - b.kernel) // b.stride + 1
                    wd = (shape[2] + 2 * pad - b.kernel) // b.stride + 1
                    shape = (b.width, h // b.pool, wd // b.pool)
                else:
                    fan_in = int(np.prod(shape))
                    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (b.width, fan_in))
                    shape = (b.width,)
                trunk.weights.append(Tensor(w, requires_grad=True))
                trunk.norms.append(NormState(variant, norm_tasks, b.width))
            self.trunks.append(trunk)
        self.feature_shape = shape
        feat = int(np.prod(shape))
        self.heads: list[list[tuple[Tensor, Tensor]]] = []
        for widths in spec.head_widths:
            layers = []
            fin = feat
            for j, fout in enumerate(widths):
                last = j == len(widths) - 1
                scale = np.sqrt((1.0 if last else 2.0) / fin)
                layers.append(
                    (
                        Tensor(rng.normal(0.0, scale, (fout, fin)), requires_grad=True),
                        Tensor(np.zeros(fout), requires_grad=True),
                    )
                )
                fin = fout
            self.heads.append(layers)
        self.masks = [np.ones(b.width) for b in spec.blocks]

    # ------------------------------------------------------------ structure

    @property
    def num_tasks(self) -> int:
        return self.spec.num_tasks

    @property
    def num_filters(self) -> int:
        return int(sum(b.width for b in self.spec.blocks))

    def trunk_for(self, task: int) -> _Trunk:
        if not 0 <= task < self.num_tasks:
            raise IndexError(f"task {task} out of range for {self.num_tasks} tasks")
        return self.trunks[task if self.mode == "STL" else 0]

    def norm_task(self, task: int) -> int:
        return 0 if self.mode == "STL" else task

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order."""
        out = []
        for k, trunk in enumerate(self.trunks):
            for i, w in enumerate(trunk.weights):
                out.append((f"trunk{k}.block{i}.weight", w))
            for i, st in enumerate(trunk.norms):
                out.append((f"trunk{k}.norm{i}.gamma", st.gamma))
                if st.beta is not None and not st.beta_frozen:
                    out.append((f"trunk{k}.norm{i}.beta", st.beta))
        for t, layers in enumerate(self.heads):
            for j, (w, b) in enumerate(layers):
                out.append((f"head{t}.layer{j}.weight", w))
                out.append((f"head{t}.layer{j}.bias", b))
        return out

    def named_norm_states(self) -> list[tuple[str, NormState]]:
        return [
            (f"trunk{k}.norm{i}", st)
            for k, trunk in enumerate(self.trunks)
            for i, st in enumerate(trunk.norms)
        ]

    def trunk_weights(self) -> list[Tensor]:
        return [w for trunk in self.trunks for w in trunk.weights]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def clone(self) -> "MultiTaskModel":
        return copy.deepcopy(self)

    # -------------------------------------------------------------- forward

    def features(self, x, task: int, mode: str = "train", update_stats: bool = True) -> Tensor:
        """Flattened output of the shared extractor as seen by ``task``."""
        trunk = self.trunk_for(task)
        nt = self.norm_task(task)
        h = ag.as_tensor(x)
        for b, w, st, mask in zip(self.spec.blocks, trunk.weights, trunk.norms, self.masks):
            if b.kind == "conv":
                h = ag.conv2d(h, w, stride=b.stride, padding=b.kernel // 2)
            else:
                if h.data.ndim != 2:
                    h = ag.flatten(h)
                h = ag.dense(h, w)
            h = norm_forward(h, st, nt, mode=mode, update_stats=update_stats)
            if not np.all(mask == 1.0):
                shape = (1, -1) + (1,) * (h.data.ndim - 2)
                h = ag.mul(h, Tensor(mask.reshape(shape)))
            if b.activation == "relu":
                h = ag.relu(h)
            elif b.activation == "gelu":
                h = ag.gelu(h)
            if b.pool > 1:
                h = ag.mean_pool(h, b.pool)
        if h.data.ndim != 2:
            h = ag.flatten(h)
        return h

    def head(self, h: Tensor, task: int) -> Tensor:
        layers = self.heads[task]
        for j, (w, bias) in enumerate(layers):
            h = ag.dense(h, w, bias)
            if j < len(layers) - 1:
                h = ag.relu(h)
        return h

    def forward(self, x, task: int, mode: str = "train", update_stats: bool = True) -> Tensor:
        return self.head(self.features(x, task, mode, update_stats), task)


def build(spec: ArchSpec, mode: str, seed: int = 0) -> MultiTaskModel:
    """Deterministically initialise a model for ``spec`` under a sharing mode."""
    return MultiTaskModel(spec, mode, seed)


def forward_task(model: MultiTaskModel, x, task: int, mode: str = "train", update_stats: bool = True) -> Tensor:
    return model.forward(x, task, mode=mode, update_stats=update_stats)


def parameter_census(model: MultiTaskModel) -> Census:
    """Exact trainable-parameter counts split into extractor, task norms and heads."""
    shared = sum(w.data.size for w in model.trunk_weights())
    per_task_norm = 0
    norm_total = 0
    frozen = 0
    for _, st in model.named_norm_states():
        count = sum(p.data.size for p in st.trainable())
        if st.beta is not None and st.beta_frozen:
            frozen += st.beta.data.size
        if model.mode == "STL" or st.is_shared:
            shared += count
        else:
            norm_total += count
            per_task_norm += count // st.num_tasks
    heads = sum(w.data.size + b.data.size for layers in model.heads for w, b in layers)
    return Census(
        shared_count=int(shared),
        per_task_norm_count=int(per_task_norm),
        norm_count=int(norm_total),
        head_count=int(heads),
        frozen_count=int(frozen),
        total=int(shared + norm_total + heads),
    )

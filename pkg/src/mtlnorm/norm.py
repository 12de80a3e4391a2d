"""Batch/layer normalization variants with optional per-task parameters.

Variants
--------
``BN``, ``TSBN``            affine ``gamma * xhat + beta`` (shared / per task)
``SigmaBN``, ``TSSigmaBN``  bounded scale ``sigmoid(gamma) * xhat`` (shared / per task)
``LN``, ``TSLN``            layer-norm analogues of the affine pair
``SigmaLN``, ``TSSigmaLN``  layer-norm analogues of the sigmoid pair

Per-task ("TS") variants keep one parameter row and one running-statistics
row per task; shared variants keep a single row used by every task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError, Tensor, _make

VARIANTS = ("BN", "TSBN", "SigmaBN", "TSSigmaBN", "LN", "TSLN", "SigmaLN", "TSSigmaLN")
SIGMA_VARIANTS = frozenset({"SigmaBN", "TSSigmaBN", "SigmaLN", "TSSigmaLN"})
LAYER_VARIANTS = frozenset({"LN", "TSLN", "SigmaLN", "TSSigmaLN"})
SHARED_VARIANTS = frozenset({"BN", "SigmaBN", "LN", "SigmaLN"})

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class DegenerateBatchError(ValueError):
    """Fewer than two values contribute to a statistic."""


class UninitializedStatisticsError(RuntimeError):
    """Eval-mode normalization requested before any running-stat update."""


_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the scale strictly inside (0, 1) even where float64 would round
    return np.clip(out, _TINY, _ONE_MINUS)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    var: np.ndarray
    count: int


def _batch_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _layer_axes(ndim: int) -> tuple[int, ...]:
    return (1,) if ndim == 2 else (1, 2, 3)


def batch_stats(x) -> BatchStats:
    """Per-channel mean and biased variance over every non-channel axis."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim not in (2, 4):
        raise DimensionError(f"expected (N, F) or (N, F, H, W) input, got {data.shape}")
    axes = _batch_axes(data.ndim)
    count = int(np.prod([data.shape[a] for a in axes]))
    if count < 2:
        raise DegenerateBatchError(f"batch statistics need >= 2 values per channel, got {count}")
    mean = data.mean(axis=axes)
    shape = [1] * data.ndim
    shape[1] = -1
    var = ((data - mean.reshape(shape)) ** 2).mean(axis=axes)
    return BatchStats(mean=mean, var=var, count=count)


class NormState:
    """Parameters and running statistics of one normalization site."""

    def __init__(
        self,
        variant: str,
        num_tasks: int,
        num_features: int,
        momentum: float = DEFAULT_MOMENTUM,
        eps: float = DEFAULT_EPS,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown norm variant {variant!r}")
        if num_tasks < 1 or num_features < 1:
            raise ValueError("num_tasks and num_features must be positive")
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.variant = variant
        self.num_tasks = num_tasks
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        rows = self.num_rows
        if self.is_sigma:
            # sigmoid(0) = 0.5
            self.gamma = Tensor(np.zeros((rows, num_features)), requires_grad=True)
            self.beta: Tensor | None = None
        else:
            self.gamma = Tensor(np.ones((rows, num_features)), requires_grad=True)
            self.beta = Tensor(np.zeros((rows, num_features)), requires_grad=True)
        self.beta_frozen = False
        self.running_mean = np.zeros((rows, num_features))
        self.running_var = np.ones((rows, num_features))
        self.stats_initialized = np.zeros(rows, dtype=bool)

    @property
    def is_sigma(self) -> bool:
        return self.variant in SIGMA_VARIANTS

    @property
    def is_layer(self) -> bool:
        return self.variant in LAYER_VARIANTS

    @property
    def is_shared(self) -> bool:
        return self.variant in SHARED_VARIANTS

    @property
    def num_rows(self) -> int:
        return 1 if self.is_shared else self.num_tasks

    def row(self, task: int) -> int:
        if not 0 <= task < self.num_tasks:
            raise IndexError(f"task {task} out of range for {self.num_tasks} tasks")
        return 0 if self.is_shared else task

    def effective_scale(self, task: int) -> np.ndarray:
        g = self.gamma.data[self.row(task)]
        return sigmoid(g) if self.is_sigma else g.copy()

    def trainable(self) -> list[Tensor]:
        params = [self.gamma]
        if self.beta is not None and not self.beta_frozen:
            params.append(self.beta)
        return params

    def load_pretrained(self, gamma_pre, beta_pre, clamp_delta: float = 1e-4) -> int:
        """Initialise every row from a pretrained affine BN layer; returns the clamp count.

        For sigmoid variants the scales are mapped through the inverse sigmoid and
        the biases are copied and frozen.  Affine variants copy both as trainable.
        """
        gamma_pre = np.asarray(gamma_pre, dtype=np.float64)
        beta_pre = np.asarray(beta_pre, dtype=np.float64)
        if gamma_pre.shape != (self.num_features,) or beta_pre.shape != (self.num_features,):
            raise DimensionError("pretrained vectors must have one entry per feature")
        if not self.is_sigma:
            self.gamma.data[:] = gamma_pre
            self.beta.data[:] = beta_pre
            return 0
        gamma_raw, beta, clamped = convert_pretrained(gamma_pre, beta_pre, clamp_delta)
        self.gamma.data[:] = gamma_raw
        self.beta = Tensor(np.broadcast_to(beta, (self.num_rows, self.num_features)).copy())
        self.beta_frozen = True
        return clamped


def convert_pretrained(gamma_pre, beta_pre, clamp_delta: float = 1e-4):
    """Map pretrained affine BN parameters to sigmoid-BN raw scales.

    Returns ``(gamma_raw, beta, clamped_count)`` where
    ``gamma_raw = logit(clip(gamma_pre, clamp_delta, 1 - clamp_delta))``.
    """
    if not 0.0 < clamp_delta < 0.5:
        raise ValueError("clamp_delta must lie in (0, 0.5)")
    gamma_pre = np.asarray(gamma_pre, dtype=np.float64)
    clipped = np.clip(gamma_pre, clamp_delta, 1.0 - clamp_delta)
    clamped = int(np.count_nonzero(clipped != gamma_pre))
    return logit(clipped), np.array(beta_pre, dtype=np.float64), clamped


def update_running_stats(state: NormState, task: int, stats: BatchStats) -> NormState:
    """Exponential moving average of the task's statistics (unbiased variance)."""
    r = state.row(task)
    m = state.momentum
    var = stats.var * (stats.count / (stats.count - 1))
    state.running_mean[r] = (1.0 - m) * state.running_mean[r] + m * stats.mean
    state.running_var[r] = (1.0 - m) * state.running_var[r] + m * var
    state.stats_initialized[r] = True
    return state


def norm_forward(
    x: Tensor,
    state: NormState,
    task: int,
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """Normalize ``x`` with the task's statistics and scale/shift parameters.

    ``update_stats=False`` leaves the running estimates untouched in train mode
    (used by the gradient-interference probe).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    data = x.data
    if data.ndim not in (2, 4) or data.shape[1] != state.num_features:
        raise DimensionError(
            f"norm expects channel dim {state.num_features}, got input of shape {data.shape}"
        )
    r = state.row(task)
    cshape = [1] * data.ndim
    cshape[1] = -1

    if state.is_layer:
        axes = _layer_axes(data.ndim)
        count = int(np.prod([data.shape[a] for a in axes]))
        mean = data.mean(axis=axes, keepdims=True)
        var = ((data - mean) ** 2).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        batch_mode = True
    elif mode == "train":
        axes = _batch_axes(data.ndim)
        stats = batch_stats(data)
        count = stats.count
        mean = stats.mean.reshape(cshape)
        inv_std = 1.0 / np.sqrt(stats.var.reshape(cshape) + state.eps)
        batch_mode = True
        if update_stats:
            update_running_stats(state, task, stats)
    else:
        if not state.stats_initialized[r]:
            raise UninitializedStatisticsError(
                f"no running statistics recorded for task {task}; run a train-mode pass first"
            )
        axes = _batch_axes(data.ndim)
        mean = state.running_mean[r].reshape(cshape)
        inv_std = 1.0 / np.sqrt(state.running_var[r].reshape(cshape) + state.eps)
        batch_mode = False

    xhat = (data - mean) * inv_std
    graw = state.gamma.data[r]
    if state.is_sigma:
        s = sigmoid(graw)
        dscale_dg = s * (1.0 - s)
    else:
        s = graw
        dscale_dg = np.ones_like(graw)
    out = xhat * s.reshape(cshape)
    beta = state.beta
    if beta is not None:
        out = out + beta.data[r].reshape(cshape)
    beta_trainable = beta is not None and not state.beta_frozen
    gamma = state.gamma
    red_axes = _batch_axes(data.ndim)

    def backward(g):
        if gamma.requires_grad:
            gg = np.zeros_like(gamma.data)
            gg[r] = (g * xhat).sum(axis=red_axes) * dscale_dg
            gamma._accumulate(gg)
        if beta_trainable and beta.requires_grad:
            gb = np.zeros_like(beta.data)
            gb[r] = g.sum(axis=red_axes)
            beta._accumulate(gb)
        if x.requires_grad:
            dxhat = g * s.reshape(cshape)
            if batch_mode:
                dx = (
                    inv_std
                    / count
                    * (
                        count * dxhat
                        - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                dx = dxhat * inv_std
            x._accumulate(dx)

    parents = [x, gamma]
    if beta_trainable:
        parents.append(beta)
    return _make(out, parents, backward, f"norm[{state.variant}]")

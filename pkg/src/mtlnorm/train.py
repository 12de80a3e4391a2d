"""Joint multi-task training with discriminative learning rates, evaluation and sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import MultiTaskDataset, TaskInfo
from .model import ArchSpec, MultiTaskModel, build
from .norm import sigmoid

log = logging.getLogger(__name__)

HIST_BINS = 20


class NumericalAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, task: int | None = None):
        where = f"epoch {epoch}, batch {batch}" + ("" if task is None else f", task {task}")
        super().__init__(f"non-finite loss at {where}")
        self.epoch, self.batch, self.task = epoch, batch, task


class GroupAuditError(RuntimeError):
    pass


class ZeroBaselineError(ZeroDivisionError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    alpha_sigma_bn: float = 100.0
    alpha_ln: float = 10.0
    # multiplier for affine (non-sigmoid) BN parameters, e.g. TSBN
    alpha_bn: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    loss_weights: list[float] | None = None
    # halve every lr after this many epochs (0 = constant)
    lr_halve_every: int = 0
    seed: int = 0

    def validate(self, num_tasks: int | None = None) -> None:
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        for name in ("alpha_sigma_bn", "alpha_ln", "alpha_bn"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.loss_weights is not None:
            if any(w <= 0 for w in self.loss_weights):
                raise ValueError("loss weights must be positive")
            if num_tasks is not None and len(self.loss_weights) != num_tasks:
                raise ValueError(f"{len(self.loss_weights)} loss weights for {num_tasks} tasks")

    def weights(self, num_tasks: int) -> list[float]:
        return [1.0] * num_tasks if self.loss_weights is None else [float(w) for w in self.loss_weights]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamGroup:
    name: str
    lr: float
    params: list[tuple[str, ag.Tensor]]


def param_groups(model: MultiTaskModel, cfg: OptimConfig) -> list[ParamGroup]:
    """Split trainable tensors into base / sigmoid-norm / layer-norm / affine-norm groups."""
    norm_kind: dict[int, str] = {}
    for _, st in model.named_norm_states():
        kind = "layer_norm" if st.is_layer else ("sigma_norm" if st.is_sigma else "affine_norm")
        for p in st.trainable():
            norm_kind[id(p)] = kind
    lrs = {
        "base": cfg.base_lr,
        "sigma_norm": cfg.base_lr * cfg.alpha_sigma_bn,
        "layer_norm": cfg.base_lr * cfg.alpha_ln,
        "affine_norm": cfg.base_lr * cfg.alpha_bn,
    }
    groups = {k: ParamGroup(k, lr, []) for k, lr in lrs.items()}
    seen: set[int] = set()
    for name, p in model.named_parameters():
        if id(p) in seen:
            raise GroupAuditError(f"parameter {name} assigned to two groups")
        seen.add(id(p))
        groups[norm_kind.get(id(p), "base")].params.append((name, p))
    return list(groups.values())


class Adam:
    """Adam over named parameter groups; moments are keyed by parameter name."""

    def __init__(self, groups: list[ParamGroup], cfg: OptimConfig):
        self.groups = groups
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.lr_scale = 1.0
        for g in groups:
            for name, p in g.params:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for g in self.groups:
            lr = g.lr * self.lr_scale
            for name, p in g.params:
                if p.grad is None:
                    continue
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad**2
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ metrics


@dataclass(frozen=True)
class Metric:
    name: str
    higher_is_better: bool


def default_metrics(tasks: list[TaskInfo]) -> list[Metric]:
    return [
        Metric("accuracy", True) if t.kind == "classification" else Metric("mse", False)
        for t in tasks
    ]


def _metric_value(metric: Metric, pred: np.ndarray, y: np.ndarray) -> float:
    if metric.name == "accuracy":
        return float(np.mean(pred.argmax(axis=1) == y))
    if metric.name == "mse":
        return float(np.mean((pred.reshape(-1) - y) ** 2))
    if metric.name == "mae":
        return float(np.mean(np.abs(pred.reshape(-1) - y)))
    raise ValueError(f"unknown metric {metric.name!r}")


def delta_m(values, baseline, higher_is_better) -> float:
    """Mean signed relative change (percent) versus a baseline; improvements are positive."""
    values = np.asarray(values, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    hib = np.asarray(higher_is_better, dtype=bool)
    if np.any(baseline == 0):
        raise ZeroBaselineError("baseline metric of zero makes the relative change undefined")
    sign = np.where(hib, 1.0, -1.0)
    return float(np.mean(sign * (values - baseline) / baseline) * 100.0)


@dataclass
class EvalReport:
    task_names: list[str]
    metric_names: list[str]
    higher_is_better: list[bool]
    metrics: list[float]
    losses: list[float]
    delta_m_percent: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def predict(model: MultiTaskModel, x: np.ndarray, task: int, batch_size: int = 256) -> np.ndarray:
    out = [
        model.forward(x[lo : lo + batch_size], task, mode="eval").data
        for lo in range(0, x.shape[0], batch_size)
    ]
    return np.concatenate(out, axis=0)


def evaluate(
    model: MultiTaskModel,
    dataset: MultiTaskDataset,
    metrics: list[Metric] | None = None,
    baseline: EvalReport | None = None,
    split: str = "test",
) -> EvalReport:
    metrics = metrics or default_metrics(dataset.tasks)
    if len(metrics) != dataset.num_tasks:
        raise ValueError("one metric per task is required")
    x, ys = dataset.part(split)
    values, losses = [], []
    for t, (info, metric) in enumerate(zip(dataset.tasks, metrics)):
        pred = predict(model, x, t)
        values.append(_metric_value(metric, pred, ys[t]))
        losses.append(ag.loss(ag.Tensor(pred), ys[t], info.loss_kind).item())
    report = EvalReport(
        task_names=dataset.task_names,
        metric_names=[m.name for m in metrics],
        higher_is_better=[m.higher_is_better for m in metrics],
        metrics=values,
        losses=losses,
    )
    if baseline is not None:
        report.delta_m_percent = delta_m(values, baseline.metrics, report.higher_is_better)
    return report


# ----------------------------------------------------------------- training


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    sigma_histograms: list[list[int]] = field(default_factory=list)

    def losses(self, task: int, split: str) -> list[float]:
        return [r["loss"] for r in self.rows if r["task"] == task and r["split"] == split]


@dataclass
class TrainResult:
    model: MultiTaskModel
    history: History
    optimizer: Adam


def sigma_values(model: MultiTaskModel) -> np.ndarray:
    vals = [sigmoid(st.gamma.data).ravel() for _, st in model.named_norm_states() if st.is_sigma]
    return np.concatenate(vals) if vals else np.zeros(0)


def sigma_histogram(values: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(values, bins=HIST_BINS, range=(0.0, 1.0))
    return counts


def multitask_loss(model: MultiTaskModel, x, ys, tasks: list[TaskInfo], weights, mode="train"):
    """Weighted sum of the per-task losses (one forward per task) plus the individual values."""
    total = None
    parts = []
    for t, info in enumerate(tasks):
        lt = ag.loss(model.forward(x, t, mode=mode), ys[t], info.loss_kind)
        parts.append(lt)
        term = lt if weights[t] == 1.0 else ag.mul(lt, weights[t])
        total = term if total is None else ag.add(total, term)
    return total, parts


def train_run(
    model: MultiTaskModel,
    dataset: MultiTaskDataset,
    cfg: OptimConfig,
    metrics: list[Metric] | None = None,
    validate: bool = True,
    on_epoch=None,
) -> TrainResult:
    """Adam on sum_t w_t * L_t; deterministic given ``cfg.seed`` and the model's init.

    ``on_epoch(epoch, model)`` is called after each epoch when given.
    """
    if dataset.num_tasks != model.num_tasks:
        raise ValueError(f"dataset has {dataset.num_tasks} tasks, model has {model.num_tasks}")
    cfg.validate(model.num_tasks)
    weights = cfg.weights(model.num_tasks)
    metrics = metrics or default_metrics(dataset.tasks)
    opt = Adam(param_groups(model, cfg), cfg)
    rng = np.random.default_rng(cfg.seed)
    history = History()
    has_val = validate and dataset.indices("val").size > 0
    for epoch in range(cfg.epochs):
        if cfg.lr_halve_every and epoch and epoch % cfg.lr_halve_every == 0:
            opt.lr_scale *= 0.5
        sums = np.zeros(model.num_tasks)
        nb = 0
        for b, (x, ys) in enumerate(dataset.batches("train", cfg.batch_size, rng)):
            model.zero_grad()
            total, parts = multitask_loss(model, x, ys, dataset.tasks, weights)
            vals = np.array([p.item() for p in parts])
            if not np.all(np.isfinite(vals)):
                bad = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise NumericalAbort(epoch, b, bad)
            ag.backward(total)
            opt.step()
            sums += vals
            nb += 1
        for t in range(model.num_tasks):
            history.rows.append(
                {"epoch": epoch, "task": t, "split": "train", "loss": sums[t] / max(nb, 1), "metric": float("nan")}
            )
        if has_val:
            rep = evaluate(model, dataset, metrics, split="val")
            for t in range(model.num_tasks):
                history.rows.append(
                    {"epoch": epoch, "task": t, "split": "val", "loss": rep.losses[t], "metric": rep.metrics[t]}
                )
        sv = sigma_values(model)
        if sv.size:
            history.sigma_histograms.append(sigma_histogram(sv).tolist())
        log.debug("epoch %d train losses %s", epoch, sums / max(nb, 1))
        if on_epoch is not None:
            on_epoch(epoch, model)
    return TrainResult(model, history, opt)


def train_and_evaluate(spec: ArchSpec, mode: str, dataset, cfg: OptimConfig, metrics=None, baseline=None, model_seed=None):
    model = build(spec, mode, cfg.seed if model_seed is None else model_seed)
    res = train_run(model, dataset, cfg, metrics, validate=False)
    return res, evaluate(res.model, dataset, metrics, baseline)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class PerturbationResult:
    factors: list[float]
    delta_m: np.ndarray  # (T, len(factors))
    variance: float
    reference: EvalReport


def perturbation_sweep(
    spec: ArchSpec,
    mode: str,
    factors,
    cfg: OptimConfig,
    dataset: MultiTaskDataset,
    metrics=None,
    workers: int = 1,
) -> PerturbationResult:
    """Retrain with one task's loss weight scaled by each factor; Δm% versus the unscaled run."""
    factors = [float(f) for f in factors]
    if not factors:
        raise ValueError("factors must be non-empty")
    T = spec.num_tasks
    base_cfg = OptimConfig(**{**cfg.to_dict(), "loss_weights": [1.0] * T})
    _, reference = train_and_evaluate(spec, mode, dataset, base_cfg, metrics)

    def run(job):
        t, f = job
        w = [1.0] * T
        w[t] = f
        c = OptimConfig(**{**cfg.to_dict(), "loss_weights": w})
        return train_and_evaluate(spec, mode, dataset, c, metrics, baseline=reference)[1].delta_m_percent

    jobs = [(t, f) for t in range(T) for f in factors]
    out = np.array(_map(run, jobs, workers)).reshape(T, len(factors))
    return PerturbationResult(factors, out, float(np.var(out)), reference)


def stl_baseline(spec: ArchSpec, dataset, cfg: OptimConfig, metrics=None) -> EvalReport:
    """Independent single-task extractors trained with the same optimizer settings."""
    return train_and_evaluate(spec, "STL", dataset, cfg, metrics)[1]


@dataclass
class MultiplierResult:
    alpha: float
    histogram: list[int]
    values: np.ndarray
    delta_m: float
    report: EvalReport

    def fraction_within(self, lo: float, hi: float, closed: bool = True) -> float:
        v = self.values
        inside = (v >= lo) & (v <= hi) if closed else (v > lo) & (v < hi)
        return float(np.mean(inside))


def lr_multiplier_sweep(
    spec: ArchSpec,
    multipliers,
    cfg: OptimConfig,
    dataset: MultiTaskDataset,
    mode: str = "TSSigmaBN",
    baseline: EvalReport | None = None,
    metrics=None,
    workers: int = 1,
) -> list[MultiplierResult]:
    """Train one model per norm learning-rate multiplier and record the final sigma(gamma) spread."""
    multipliers = [float(a) for a in multipliers]
    if any(a <= 0 for a in multipliers):
        raise ValueError("multipliers must be positive")
    if baseline is None:
        baseline = stl_baseline(spec, dataset, cfg, metrics)
    if spec.norm == "layer":
        key = "alpha_ln"
    else:
        key = "alpha_sigma_bn" if mode == "TSSigmaBN" else "alpha_bn"

    def run(alpha):
        c = OptimConfig(**{**cfg.to_dict(), key: alpha})
        res, rep = train_and_evaluate(spec, mode, dataset, c, metrics, baseline)
        if mode == "TSSigmaBN":
            vals = sigma_values(res.model)
        else:
            vals = np.concatenate([st.gamma.data.ravel() for _, st in res.model.named_norm_states()])
        return MultiplierResult(alpha, sigma_histogram(vals).tolist(), vals, rep.delta_m_percent, rep)

    return _map(run, multipliers, workers)

"""Interpretability tools built on the task-filter importance matrix sigma(gamma).

Covers capacity (total, shared, independent), task similarity and its
stability across runs, co-occurrence clustering, filter specialization,
pruning validation, gradient interference and a linear representation
projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .data import MultiTaskDataset
from .model import MultiTaskModel
from .norm import sigmoid
from .train import Metric, default_metrics, evaluate

INTERFERENCE_BINS = 40


class UnsupportedVariantError(TypeError):
    """The model's normalization layers carry no bounded importances."""


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class ImportanceMatrix:
    values: np.ndarray  # (T, F)
    task_names: list[str]
    filter_index: list[tuple[int, int]]  # (layer, channel) per column

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    @property
    def num_filters(self) -> int:
        return self.values.shape[1]

    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.filter_index})

    def layer_columns(self, layer: int) -> np.ndarray:
        return np.array([i for i, (l, _) in enumerate(self.filter_index) if l == layer], dtype=int)

    def select_layers(self, layers) -> "ImportanceMatrix":
        cols = np.concatenate([self.layer_columns(l) for l in layers])
        return ImportanceMatrix(self.values[:, cols], self.task_names, [self.filter_index[c] for c in cols])

    def to_dict(self) -> dict:
        return {
            "task_names": list(self.task_names),
            "filter_index": [list(p) for p in self.filter_index],
            "values": self.values.tolist(),
        }


def importance_matrix(model: MultiTaskModel, task_names: list[str] | None = None) -> ImportanceMatrix:
    """sigma(gamma_raw) for every task and every norm channel, in network order."""
    if model.mode == "STL" or not model.trunks[0].norms[0].is_sigma or model.trunks[0].norms[0].is_shared:
        raise UnsupportedVariantError(
            f"importance matrices need task-specific sigmoid norms, model uses {model.norm_variant}"
        )
    rows, index = [], []
    for layer, st in enumerate(model.trunks[0].norms):
        rows.append(sigmoid(st.gamma.data))
        index.extend((layer, c) for c in range(st.num_features))
    names = task_names or [f"task{t}" for t in range(model.num_tasks)]
    return ImportanceMatrix(np.concatenate(rows, axis=1), list(names), index)


def _values(I) -> np.ndarray:
    return I.values if isinstance(I, ImportanceMatrix) else np.asarray(I, dtype=np.float64)


# ---------------------------------------------------------------- capacity


def total_capacity(I, t: int) -> float:
    v = _values(I)
    return float(v[t].mean())


@dataclass
class Decomposition:
    total: float
    shared: float
    indep: float
    degenerate: bool = False

    @property
    def pythagorean_residual(self) -> float:
        return abs(self.total**2 - (self.shared**2 + self.indep**2))


def project_onto_others(I, t: int) -> np.ndarray:
    """Orthogonal projection of row ``t`` onto the span of the other rows (min-norm lstsq)."""
    v = _values(I)
    A = np.delete(v, t, axis=0).T  # (F, T-1)
    coef, *_ = np.linalg.lstsq(A, v[t], rcond=None)
    return A @ coef


def decompose_capacity(I, t: int) -> Decomposition:
    """Split C_t into the part explained by other tasks' importances and the orthogonal rest."""
    v = _values(I)
    if v.shape[0] < 2:
        raise ValueError("capacity decomposition needs at least two tasks")
    ct = float(v[t].mean())
    norm = float(np.linalg.norm(v[t]))
    if norm == 0.0:
        return Decomposition(ct, 0.0, 0.0, degenerate=True)
    shared_vec = project_onto_others(v, t)
    indep_vec = v[t] - shared_vec
    return Decomposition(
        total=ct,
        shared=float(np.linalg.norm(shared_vec)) / norm * ct,
        indep=float(np.linalg.norm(indep_vec)) / norm * ct,
    )


@dataclass
class CapacityReport:
    task_names: list[str]
    entries: list[Decomposition]

    def to_dict(self) -> dict:
        return {
            "tasks": [
                {
                    "task": name,
                    "total": d.total,
                    "shared": d.shared,
                    "indep": d.indep,
                    "pythagorean_residual": d.pythagorean_residual,
                    "degenerate": d.degenerate,
                }
                for name, d in zip(self.task_names, self.entries)
            ]
        }


def capacity_report(I: ImportanceMatrix) -> CapacityReport:
    return CapacityReport(list(I.task_names), [decompose_capacity(I, t) for t in range(I.num_tasks)])


# -------------------------------------------------------------- similarity


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    task_names: list[str]
    zero_rows: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"task_names": list(self.task_names), "values": self.values.tolist(), "zero_rows": self.zero_rows}


def similarity_matrix(I, task_names: list[str] | None = None) -> SimilarityMatrix:
    """Pairwise cosine similarity of the task importance vectors."""
    v = _values(I)
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    unit = v / safe[:, None]
    s = unit @ unit.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    names = task_names or (list(I.task_names) if isinstance(I, ImportanceMatrix) else [f"task{t}" for t in range(v.shape[0])])
    return SimilarityMatrix(s, names, [int(i) for i in np.flatnonzero(zero)])


def _upper(m) -> np.ndarray:
    v = m.values if isinstance(m, SimilarityMatrix) else np.asarray(m)
    iu = np.triu_indices(v.shape[0], k=1)
    return v[iu]


def spearman(a, b) -> float:
    """Spearman's rho with average ranks for ties."""
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        raise UndefinedCorrelationError("rank correlation undefined for constant input")
    return float((ra * rb).sum() / denom)


def spearman_stability(matrices) -> float:
    """Mean pairwise Spearman correlation of the strictly-upper triangles."""
    if len(matrices) < 2:
        raise ValueError("need at least two similarity matrices")
    sizes = {(m.values if isinstance(m, SimilarityMatrix) else np.asarray(m)).shape for m in matrices}
    if len(sizes) != 1:
        raise ValueError("similarity matrices have different shapes")
    T = sizes.pop()[0]
    if T < 3:
        raise UndefinedCorrelationError("need T >= 3 tasks (at least two off-diagonal pairs)")
    ups = [_upper(m) for m in matrices]
    return float(np.mean([spearman(a, b) for a, b in combinations(ups, 2)]))


# -------------------------------------------------------------- clustering


def average_linkage(distance: np.ndarray, k: int) -> np.ndarray:
    """Agglomerative average-linkage clustering stopped at ``k`` clusters.

    Ties between candidate merges go to the lexicographically smallest pair of
    clusters (ordered by their smallest member).  Labels are numbered in order
    of each cluster's smallest member.
    """
    d = np.asarray(distance, dtype=np.float64)
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    clusters = [[i] for i in range(n)]
    while len(clusters) > k:
        best, pair = np.inf, None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                dist = d[np.ix_(clusters[a], clusters[b])].mean()
                if dist < best - 1e-12:
                    best, pair = dist, (a, b)
        a, b = pair
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        clusters.sort(key=lambda c: c[0])
    labels = np.empty(n, dtype=int)
    for lab, members in enumerate(sorted(clusters, key=lambda c: c[0])):
        labels[members] = lab
    return labels


@dataclass
class ClusterResult:
    k: int
    run_labels: list[list[int]]
    cooccurrence: np.ndarray  # counts over runs
    labels: list[int]
    task_names: list[str]

    def clusters(self) -> list[list[str]]:
        groups: dict[int, list[str]] = {}
        for name, lab in zip(self.task_names, self.labels):
            groups.setdefault(lab, []).append(name)
        return [groups[k] for k in sorted(groups)]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "task_names": list(self.task_names),
            "run_labels": self.run_labels,
            "cooccurrence": self.cooccurrence.astype(int).tolist(),
            "labels": list(self.labels),
            "clusters": self.clusters(),
        }


def cluster_tasks(matrices, k: int) -> ClusterResult:
    """Cluster each run on 1 - S, count co-assignments, then cluster the co-occurrence rates."""
    if k < 2:
        raise ValueError("k must be >= 2")
    mats = [m.values if isinstance(m, SimilarityMatrix) else np.asarray(m) for m in matrices]
    if not mats:
        raise ValueError("need at least one similarity matrix")
    T = mats[0].shape[0]
    if k > T:
        raise ValueError(f"k={k} exceeds the number of tasks {T}")
    names = matrices[0].task_names if isinstance(matrices[0], SimilarityMatrix) else [f"task{t}" for t in range(T)]
    co = np.zeros((T, T), dtype=np.int64)
    runs = []
    for s in mats:
        lab = average_linkage(1.0 - s, k)
        runs.append(lab.tolist())
        co += lab[:, None] == lab[None, :]
    final = average_linkage(1.0 - co / len(mats), k)
    return ClusterResult(k, runs, co, final.tolist(), list(names))


# ---------------------------------------------------------- specialization


@dataclass
class SpecializationReport:
    tau: float
    flags: np.ndarray  # (T, F) bool
    owner: np.ndarray  # (F,) task index or -1
    layer_percent: dict[int, float]
    layer_task_percent: dict[int, list[float]]

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "owner": self.owner.tolist(),
            "layer_percent": {str(k): v for k, v in self.layer_percent.items()},
            "layer_task_percent": {str(k): v for k, v in self.layer_task_percent.items()},
        }


def specialized_filters(I: ImportanceMatrix, tau: float = 0.5) -> SpecializationReport:
    """Filter i is specialized for task t if I[t, i] / sum_s I[s, i] > tau."""
    v = _values(I)
    T = v.shape[0]
    if not (1.0 / T <= tau < 1.0):
        raise ValueError(f"tau must lie in [1/T, 1) = [{1.0 / T:.4g}, 1)")
    col = v.sum(axis=0)
    safe = np.where(col == 0, 1.0, col)
    ratio = np.where(col == 0, 0.0, v / safe)
    flags = ratio > tau
    owner = np.where(flags.any(axis=0), ratio.argmax(axis=0), -1)
    index = I.filter_index if isinstance(I, ImportanceMatrix) else [(0, i) for i in range(v.shape[1])]
    layers = sorted({l for l, _ in index})
    layer_of = np.array([l for l, _ in index])
    lp, ltp = {}, {}
    for l in layers:
        cols = layer_of == l
        lp[l] = float(100.0 * np.mean(owner[cols] >= 0))
        ltp[l] = [float(100.0 * np.mean(owner[cols] == t)) for t in range(T)]
    return SpecializationReport(float(tau), flags, owner, lp, ltp)


def default_prune_k(num_filters: int) -> int:
    return max(1, int(round(0.05 * num_filters)))


def _relative_drop(base: float, pruned: float, higher_is_better: bool) -> float:
    if base == 0:
        return 0.0 if pruned == base else float("inf")
    change = (base - pruned) if higher_is_better else (pruned - base)
    return change / abs(base)


def prune_and_measure(
    model: MultiTaskModel,
    dataset: MultiTaskDataset,
    metrics: list[Metric] | None = None,
    k: int | None = None,
    split: str = "test",
) -> np.ndarray:
    """Row r: zero task r's top-k filters for every task; column c: relative drop of task c.

    A positive entry means task c got worse.  The model's masks are restored afterwards.
    """
    I = importance_matrix(model)
    F = I.num_filters
    k = default_prune_k(F) if k is None else int(k)
    if not 0 <= k <= F:
        raise ValueError(f"k={k} must lie in [0, {F}]")
    metrics = metrics or default_metrics(dataset.tasks)
    T = model.num_tasks
    drops = np.zeros((T, T))
    if k == 0:
        return drops
    base = evaluate(model, dataset, metrics, split=split)
    saved = [m.copy() for m in model.masks]
    try:
        for r in range(T):
            # stable sort: ties resolved by network order
            top = np.argsort(-I.values[r], kind="stable")[:k]
            for col in top:
                layer, ch = I.filter_index[col]
                model.masks[layer][ch] = 0.0
            rep = evaluate(model, dataset, metrics, split=split)
            for c in range(T):
                drops[r, c] = _relative_drop(base.metrics[c], rep.metrics[c], metrics[c].higher_is_better)
            for layer, m in enumerate(saved):
                model.masks[layer] = m.copy()
    finally:
        model.masks = saved
    return drops


def diagonal_dominance(drops: np.ndarray) -> tuple[float, float]:
    """(mean of the diagonal, mean of the off-diagonal entries)."""
    T = drops.shape[0]
    off = ~np.eye(T, dtype=bool)
    return float(np.mean(np.diag(drops))), float(np.mean(drops[off]))


# ------------------------------------------------------------ interference


@dataclass
class InterferenceReport:
    pairs: list[tuple[int, int]]
    edges: np.ndarray
    histograms: dict[tuple[int, int], np.ndarray]
    samples: dict[tuple[int, int], list[float]]
    skipped: int

    def mean(self, pair) -> float:
        return float(np.mean(self.samples[pair]))

    def variance(self, pair) -> float:
        return float(np.var(self.samples[pair]))

    def pooled_variance(self) -> float:
        vals = [v for p in self.pairs if p[0] != p[1] for v in self.samples[p]]
        return float(np.var(vals))

    def to_dict(self, task_names=None) -> dict:
        name = (lambda t: task_names[t]) if task_names else (lambda t: f"task{t}")
        return {
            "bin_edges": self.edges.tolist(),
            "skipped": self.skipped,
            "pairs": [
                {
                    "a": name(a),
                    "b": name(b),
                    "mean": self.mean((a, b)),
                    "variance": self.variance((a, b)),
                    "count": len(self.samples[(a, b)]),
                    "histogram": self.histograms[(a, b)].astype(int).tolist(),
                }
                for a, b in self.pairs
            ],
        }


def shared_gradient(model: MultiTaskModel, x, y, task: int, loss_kind: str) -> np.ndarray:
    """Flattened gradient of one task's loss w.r.t. the shared extractor weights.

    Running statistics are not updated.
    """
    model.zero_grad()
    out = model.forward(x, task, mode="train", update_stats=False)
    ag.backward(ag.loss(out, y, loss_kind))
    grads = [np.zeros(w.data.size) if w.grad is None else w.grad.ravel() for w in model.trunk_for(task).weights]
    model.zero_grad()
    return np.concatenate(grads)


def interference_histogram(
    model: MultiTaskModel,
    batches,
    tasks,
    pairs=None,
    include_self: bool = False,
) -> InterferenceReport:
    """Cosine similarity between per-task gradients on the shared weights, per batch."""
    if model.mode == "STL":
        raise UnsupportedVariantError("single-task models have no shared extractor")
    T = model.num_tasks
    if pairs is None:
        pairs = [(a, b) for a in range(T) for b in range(a if include_self else a + 1, T)]
    pairs = [tuple(p) for p in pairs]
    edges = np.linspace(-1.0, 1.0, INTERFERENCE_BINS + 1)
    samples = {p: [] for p in pairs}
    skipped = 0
    n_batches = 0
    for x, ys in batches:
        n_batches += 1
        g = [shared_gradient(model, x, ys[t], t, tasks[t].loss_kind) for t in range(T)]
        norms = [np.linalg.norm(v) for v in g]
        for a, b in pairs:
            if norms[a] == 0 or norms[b] == 0:
                skipped += 1
                continue
            c = float(g[a] @ g[b] / (norms[a] * norms[b]))
            samples[(a, b)].append(min(1.0, max(-1.0, c)))
    if n_batches == 0:
        raise ValueError("no batches supplied")
    hists = {p: np.histogram(samples[p], bins=edges)[0] for p in pairs}
    return InterferenceReport(pairs, edges, hists, samples, skipped)


# -------------------------------------------------------------- projection


@dataclass
class Projection:
    coords: np.ndarray  # (n_inputs * T, 2)
    input_index: np.ndarray
    task_index: np.ndarray
    explained_variance: np.ndarray  # top-2 eigenvalues of the pooled covariance
    total_variance: float


def representation_projection(model: MultiTaskModel, inputs, tasks=None, mode: str = "eval") -> Projection:
    """Project each task's extractor features onto the top-2 principal directions of the pooled set."""
    tasks = list(range(model.num_tasks)) if tasks is None else list(tasks)
    inputs = np.asarray(inputs, dtype=np.float64)
    feats = [model.features(inputs, t, mode=mode, update_stats=False).data for t in tasks]
    X = np.concatenate(feats, axis=0)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples to project")
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = Xc @ comps.T
    n = inputs.shape[0]
    var = s**2 / (X.shape[0] - 1)
    return Projection(
        coords=coords,
        input_index=np.tile(np.arange(n), len(tasks)),
        task_index=np.repeat(np.array(tasks), n),
        explained_variance=var[:2],
        total_variance=float(var.sum()),
    )

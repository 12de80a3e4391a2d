"""SVG figures rendered from the CSV/JSON files a run directory already holds."""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .persist import atomic_write, read_csv  # noqa: E402

# fixed ids and no timestamp, so reruns produce identical bytes
plt.rcParams["svg.hashsalt"] = "mtlnorm"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def history_figure(csv_path, out: Path) -> Path:
    _, rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for epoch, task, split, loss, _ in rows:
        series.setdefault((task, split), []).append((int(epoch), float(loss)))
    for (task, split), pts in sorted(series.items()):
        e, l = zip(*pts)
        ax.plot(e, l, "-" if split == "train" else "--", marker="o", ms=3, label=f"{task} ({split})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, out)


def sigma_figure(csv_path, out: Path) -> Path:
    _, rows = read_csv(csv_path)
    last = max(int(r[0]) for r in rows)
    sel = [r for r in rows if int(r[0]) == last]
    lo = np.array([float(r[1]) for r in sel])
    width = np.array([float(r[2]) for r in sel]) - lo
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(lo, [int(r[3]) for r in sel], width=width, align="edge", edgecolor="black")
    ax.set_xlabel("sigma(gamma)")
    ax.set_ylabel("channels")
    ax.set_title(f"epoch {last}")
    return _save(fig, out)


def _heatmap(matrix, labels_rows, labels_cols, title, out: Path, xlabel="", ylabel="") -> Path:
    m = np.asarray(matrix, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.2 * m.shape[1] + 2, 1.0 * m.shape[0] + 1.5))
    im = ax.imshow(m, cmap="viridis")
    ax.set_xticks(range(m.shape[1]), labels_cols, rotation=45, ha="right")
    ax.set_yticks(range(m.shape[0]), labels_rows)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", color="white", fontsize=8)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, out)


def similarity_figure(json_path, out: Path) -> Path:
    doc = json.loads(Path(json_path).read_text())
    return _heatmap(doc["values"], doc["task_names"], doc["task_names"], "importance similarity", out)


def prune_figure(json_path, out: Path) -> Path:
    doc = json.loads(Path(json_path).read_text())
    names = doc["task_names"]
    return _heatmap(doc["drops"], names, names, f"relative drop, k={doc['k']}", out, "measured task", "pruned for")


def interference_figure(json_path, out: Path) -> Path:
    doc = json.loads(Path(json_path).read_text())
    modes = sorted(doc["modes"])
    fig, axes = plt.subplots(1, len(modes), figsize=(4.5 * len(modes), 3.2), squeeze=False, sharey=True)
    for ax, mode in zip(axes[0], modes):
        rep = doc["modes"][mode]
        edges = np.asarray(rep["bin_edges"])
        for p in rep["pairs"]:
            ax.stairs(p["histogram"], edges, label=f"{p['a']}/{p['b']}")
        ax.set_title(f"{mode}  pooled var {rep['pooled_variance']:.4f}")
        ax.set_xlabel("gradient cosine")
        ax.legend(fontsize=7)
    axes[0][0].set_ylabel("batches")
    return _save(fig, out)


def capacity_sweep_figure(json_path, out: Path) -> Path:
    doc = json.loads(Path(json_path).read_text())
    xi = doc["xi"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xi, doc["median"]["similarity"], marker="o", label="similarity to source")
    ax.plot(xi, doc["median"]["indep"], marker="s", label="independent capacity")
    ax.set_xlabel("xi")
    ax.set_title(f"trend: {doc['trend']['verdict']}")
    ax.legend(fontsize=8)
    return _save(fig, out)


FIGURES = [
    ("history.csv", "history.svg", history_figure),
    ("sigma-histograms.csv", "sigma.svg", sigma_figure),
    ("similarity.json", "similarity.svg", similarity_figure),
    ("prune.json", "prune.svg", prune_figure),
    ("interference.json", "interference.svg", interference_figure),
    ("capacity-sweep.json", "capacity-sweep.svg", capacity_sweep_figure),
]


def render(run_dir, out_dir=None) -> list[Path]:
    """Render every figure whose source file exists in ``run_dir``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    made = []
    for src, dst, fn in FIGURES:
        if (run_dir / src).is_file():
            made.append(fn(run_dir / src, out_dir / dst))
    return made

"""Reference protocols for the trend studies run by the CLI and the acceptance suite.

Every study trains small models on the reference synthetic dataset and returns
plain per-seed numbers; verdicts compare medians over seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    diagonal_dominance,
    importance_matrix,
    interference_histogram,
    decompose_capacity,
    prune_and_measure,
    similarity_matrix,
    specialized_filters,
)
from .data import MultiTaskDataset, noisy_family, reference_spec, synth_generate
from .model import build, reference_arch
from .train import OptimConfig, TrainResult, perturbation_sweep, sigma_values, train_run

XI_GRID = (0.0, 0.5, 1.0, 2.0, 3.0)
ALPHA_GRID = (1.0, 10.0, 100.0, 1000.0)
LOSS_SCALES = (0.5, 1.5, 2.0)


@dataclass(frozen=True)
class Protocol:
    num_samples: int = 2000
    batch_size: int = 32
    epochs: int = 10

    def optim(self, seed: int, **overrides) -> OptimConfig:
        base = {"epochs": self.epochs, "batch_size": self.batch_size, "seed": seed}
        return OptimConfig(**{**base, **overrides})


REFERENCE = Protocol()
# each sweep point is ten training runs, so the loss-scale study trains for fewer epochs
PERTURBATION = Protocol(epochs=5)


def reference_dataset(seed: int, protocol: Protocol = REFERENCE) -> MultiTaskDataset:
    return synth_generate(reference_spec(protocol.num_samples, seed))


def train_reference(
    mode: str,
    seed: int,
    protocol: Protocol = REFERENCE,
    dataset: MultiTaskDataset | None = None,
    **overrides,
) -> TrainResult:
    ds = dataset if dataset is not None else reference_dataset(seed, protocol)
    outputs = [t.output_dim for t in ds.tasks]
    model = build(reference_arch(outputs), mode, seed)
    return train_run(model, ds, protocol.optim(seed, **overrides), validate=False)


def median(values) -> np.ndarray:
    return np.median(np.asarray(values, dtype=np.float64), axis=0)


def count_inversions(values, increasing: bool) -> int:
    """Adjacent steps that go against the expected direction."""
    d = np.diff(np.asarray(values, dtype=np.float64))
    return int(np.count_nonzero(d < 0 if increasing else d > 0))


# ------------------------------------------------------------- studies


def pruning_and_depth(seeds, protocol: Protocol = REFERENCE, k: int | None = None) -> dict:
    """Pruning drop matrices and first/last block specialization of trained TSσBN models."""
    drops, dominance, first, last = [], [], [], []
    for seed in seeds:
        ds = reference_dataset(seed, protocol)
        model = train_reference("TSSigmaBN", seed, protocol, ds).model
        drop = prune_and_measure(model, ds, k=k)
        drops.append(drop)
        dominance.append(diagonal_dominance(drop))
        spec = specialized_filters(importance_matrix(model))
        layers = sorted(spec.layer_percent)
        first.append(spec.layer_percent[layers[0]])
        last.append(spec.layer_percent[layers[-1]])
    diag, off = median([d[0] for d in dominance]), median([d[1] for d in dominance])
    return {
        "drop_matrices": drops,
        "dominance": dominance,
        "first_block_percent": first,
        "final_block_percent": last,
        "pruning_pass": bool(diag > off),
        "depth_pass": bool(median(last) >= median(first)),
    }


def interference_study(seeds, protocol: Protocol = REFERENCE, modes=("HPS", "TSSigmaBN")) -> dict:
    """Pooled gradient-cosine variance after one epoch of training, per mode and seed."""
    out = {m: [] for m in modes}
    for seed in seeds:
        ds = reference_dataset(seed, protocol)
        for mode in modes:
            model = train_reference(mode, seed, protocol, ds, epochs=1).model
            batches = ds.batches("train", protocol.batch_size, np.random.default_rng(seed))
            out[mode].append(interference_histogram(model, batches, ds.tasks).pooled_variance())
    return {"variance": out, "pass": bool(median(out["TSSigmaBN"]) < median(out["HPS"]))}


def capacity_sweep(seeds, xis=XI_GRID, protocol: Protocol = REFERENCE) -> dict:
    """Similarity and independent capacity of the noisy regression copy across noise levels."""
    sims, indep = [], []
    for seed in seeds:
        base = reference_dataset(seed, protocol)
        s_row, c_row = [], []
        for xi in xis:
            ds = noisy_family(base, xi, seed=seed)
            I = importance_matrix(train_reference("TSSigmaBN", seed, protocol, ds).model)
            s_row.append(float(similarity_matrix(I).values[1, 2]))
            c_row.append(decompose_capacity(I, 2).indep)
        sims.append(s_row)
        indep.append(c_row)
    ms, mc = median(sims), median(indep)
    return {
        "xi": list(xis),
        "similarity": sims,
        "indep": indep,
        "similarity_inversions": count_inversions(ms, increasing=False),
        "indep_inversions": count_inversions(mc, increasing=True),
        "pass": bool(count_inversions(ms, False) <= 1 and count_inversions(mc, True) <= 1),
    }


def multiplier_study(seeds, alphas=ALPHA_GRID, protocol: Protocol = REFERENCE) -> dict:
    """Final sigma(gamma) values per norm learning-rate multiplier, pooled over seeds."""
    values = {}
    for alpha in alphas:
        vals = [
            sigma_values(train_reference("TSSigmaBN", seed, protocol, alpha_sigma_bn=alpha).model)
            for seed in seeds
        ]
        values[alpha] = np.concatenate(vals)
    return values


def perturbation_study(seeds, factors=LOSS_SCALES, protocol: Protocol = REFERENCE, modes=("HPS", "TSSigmaBN")) -> dict:
    """Variance of Δm% over single-task loss rescalings, per mode and seed."""
    out = {m: [] for m in modes}
    for seed in seeds:
        ds = reference_dataset(seed, protocol)
        arch = reference_arch([t.output_dim for t in ds.tasks])
        for mode in modes:
            res = perturbation_sweep(arch, mode, factors, protocol.optim(seed), ds)
            out[mode].append(res.variance)
    return {"variance": out, "pass": bool(median(out["TSSigmaBN"]) < median(out["HPS"]))}


def scaled(protocol: Protocol = REFERENCE, **changes) -> Protocol:
    return replace(protocol, **changes)

"""``mtlnorm`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical abort,
4 analysis unsupported for the model's normalization variant.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import persist, report
from .analysis import (
    UndefinedCorrelationError,
    UnsupportedVariantError,
    capacity_report,
    cluster_tasks,
    decompose_capacity,
    default_prune_k,
    diagonal_dominance,
    importance_matrix,
    interference_histogram,
    prune_and_measure,
    representation_projection,
    similarity_matrix,
    spearman,
    specialized_filters,
)
from .config import ConfigError, ExperimentConfig
from .autograd import ContractError, DimensionError
from .data import SPLITS, FormatError, UnsupportedTaskError, noisy_family
from .experiments import count_inversions
from .model import SpecError, build, parameter_census
from .norm import SHARED_VARIANTS, SIGMA_VARIANTS
from .train import NumericalAbort, train_run

log = logging.getLogger("mtlnorm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_UNSUPPORTED = 0, 2, 3, 4
OUT_ENV = "MTLNORM_OUT"
CHECKPOINT_NAME = "checkpoint.mtlck"
SWEEP_HEADER = ["seed", "xi", "task", "total", "shared", "indep", "similarity_source_noisy"]


class UsageError(Exception):
    pass


class Unsupported(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.defaults()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(**{"optim.seed": args.seed, "data.seed": args.seed})
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None, verb: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV]) / verb
    if cfg is not None and cfg["output"]["dir"]:
        return Path(cfg["output"]["dir"])
    return Path("mtlnorm-out") / verb


def _threads(args) -> int:
    n = getattr(args, "threads", None) or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _echo_config(out: Path, verb: str, cfg: ExperimentConfig, **derived) -> None:
    doc = {"command": verb, "config": cfg.to_dict(), "config_hash": cfg.hash(), "derived": derived}
    persist.write_json(out / "resolved-config.json", doc, "resolved-config")


def _require_sigma(variant: str, what: str) -> None:
    if variant not in SIGMA_VARIANTS or variant in SHARED_VARIANTS:
        raise Unsupported(f"{what} needs task-specific sigmoid norms; this model uses {variant}")


def _mode_list(text: str | None, default: str) -> list[str]:
    if not text:
        return [default]
    try:
        return [cfgmod.parse_mode(m) for m in text.split(",") if m.strip()]
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _open_checkpoint(args) -> persist.Checkpoint:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    expect = cfgmod.load(args.config) if args.config else None
    return persist.load_checkpoint(path, expect, force=args.force)


def _analysis_config(args, ckpt: persist.Checkpoint) -> ExperimentConfig:
    # analysis settings come from --config when given, otherwise from the checkpoint
    return cfgmod.load(args.config) if args.config else ckpt.config


def _train(cfg: ExperimentConfig, dataset, mode: str | None = None, epochs: int | None = None):
    mode = mode or cfg.mode
    model = build(cfg.arch(dataset), mode, cfg["optim"]["seed"])
    opt = cfg.optim()
    if epochs is not None:
        opt.epochs = epochs
    return train_run(model, dataset, opt)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.mode:
        cfg = cfg.with_overrides(**{"mode.sharing": _mode_list(args.mode, cfg.mode)[0]})
    out = _out_dir(args, cfg, "train")
    ds = cfg.dataset()
    model = build(cfg.arch(ds), cfg.mode, cfg["optim"]["seed"])
    census = parameter_census(model)
    ratio = census.per_task_norm_count / census.total
    log.info(
        "census: %d shared, %d task-specific norm, %d head parameters; norm overhead %.4f%%",
        census.shared_count, census.per_task_norm_count, census.head_count, 100 * ratio,
    )
    res = train_run(model, ds, cfg.optim())
    ckpt = persist.Checkpoint(res.model, cfg, list(ds.tasks), res.optimizer)
    persist.save_checkpoint(out / CHECKPOINT_NAME, ckpt)
    persist.write_history(out / "history.csv", res.history, ds.task_names)
    persist.write_json(out / "census.json", {**census.as_dict(), "norm_overhead_ratio": ratio}, "census")
    if res.history.sigma_histograms:
        edges = np.linspace(0.0, 1.0, len(res.history.sigma_histograms[0]) + 1)
        rows = (
            [e, lo, hi, c]
            for e, counts in enumerate(res.history.sigma_histograms)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)
        )
        persist.write_csv(out / "sigma-histograms.csv", ["epoch", "bin_low", "bin_high", "count"], rows)
    _echo_config(out, "train", cfg, mode=cfg.mode, norm_variant=model.norm_variant, num_filters=model.num_filters)
    log.info("wrote %s", out / CHECKPOINT_NAME)
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt = _open_checkpoint(args)
    cfg = _analysis_config(args, ckpt)
    out = _out_dir(args, cfg, "analyze")
    _require_sigma(ckpt.model.norm_variant, "importance analysis")
    want = {k for k in ("capacity", "similarity", "specialization", "project") if getattr(args, k)}
    want = want or {"capacity", "similarity", "specialization", "project"}
    names = ckpt.task_names
    I = importance_matrix(ckpt.model, names)
    persist.write_csv(
        out / "importance.csv",
        ["layer", "channel", *names],
        ([l, c, *I.values[:, j]] for j, (l, c) in enumerate(I.filter_index)),
    )
    if "capacity" in want:
        rep = capacity_report(I)
        persist.write_json(out / "capacity.json", rep.to_dict(), "capacity")
        persist.write_csv(
            out / "capacity.csv",
            ["task", "total", "shared", "indep", "pythagorean_residual", "degenerate"],
            ([n, d.total, d.shared, d.indep, d.pythagorean_residual, int(d.degenerate)] for n, d in zip(names, rep.entries)),
        )
    if "similarity" in want:
        S = similarity_matrix(I, names)
        persist.write_json(out / "similarity.json", S.to_dict(), "similarity")
        persist.write_csv(
            out / "similarity.csv",
            ["task_a", "task_b", "similarity"],
            ([a, b, S.values[i, j]] for i, a in enumerate(names) for j, b in enumerate(names)),
        )
    if "specialization" in want:
        tau = args.tau if args.tau is not None else cfg["analysis"]["tau"]
        try:
            spec = specialized_filters(I, tau)
        except ValueError as e:
            raise UsageError(f"--tau: {e}") from None
        persist.write_json(out / "specialization.json", {**spec.to_dict(), "task_names": names}, "specialization")
        rows = []
        for layer in sorted(spec.layer_percent):
            rows.append([layer, "any", spec.layer_percent[layer]])
            rows += [[layer, n, p] for n, p in zip(names, spec.layer_task_percent[layer])]
        persist.write_csv(out / "specialization.csv", ["layer", "task", "percent"], rows)
    if "project" in want:
        ds = ckpt.config.dataset()
        idx = ds.indices("test")[: args.samples]
        proj = representation_projection(ckpt.model, ds.inputs[idx])
        persist.write_csv(
            out / "projection.csv",
            ["sample", "task", "pc1", "pc2"],
            ([int(idx[i]), names[t], x, y] for i, t, (x, y) in zip(proj.input_index, proj.task_index, proj.coords)),
        )
        persist.write_json(
            out / "projection.json",
            {"explained_variance": proj.explained_variance.tolist(), "total_variance": proj.total_variance, "samples": int(idx.size)},
            "projection",
        )
    _echo_config(out, "analyze", cfg, checkpoint=str(args.checkpoint), analyses=sorted(want), checkpoint_config_hash=ckpt.config.hash())
    return EXIT_OK


def cmd_prune_eval(args) -> int:
    ckpt = _open_checkpoint(args)
    cfg = _analysis_config(args, ckpt)
    out = _out_dir(args, cfg, "prune-eval")
    _require_sigma(ckpt.model.norm_variant, "importance pruning")
    F = ckpt.model.num_filters
    k = args.k if args.k is not None else cfg["analysis"]["k_prune"]
    k = default_prune_k(F) if k is None else k
    if not 0 <= k <= F:
        raise UsageError(f"k={k} out of range [0, {F}]")
    ds = ckpt.config.dataset()
    if [t.name for t in ds.tasks] != ckpt.task_names:
        raise UsageError("dataset tasks differ from the checkpoint's tasks")
    drops = prune_and_measure(ckpt.model, ds, k=k, split=args.split)
    diag, off = diagonal_dominance(drops)
    names = ckpt.task_names
    doc = {
        "k": k,
        "num_filters": F,
        "split": args.split,
        "task_names": names,
        "drops": drops.tolist(),
        "diagonal_mean": diag,
        "off_diagonal_mean": off,
        "diagonal_dominant": bool(diag > off),
    }
    persist.write_json(out / "prune.json", doc, "prune")
    persist.write_csv(
        out / "prune.csv",
        ["pruned_task", "measured_task", "relative_drop"],
        ([a, b, drops[i, j]] for i, a in enumerate(names) for j, b in enumerate(names)),
    )
    _echo_config(out, "prune-eval", cfg, checkpoint=str(args.checkpoint), k=k, split=args.split)
    return EXIT_OK


def cmd_interference(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "interference")
    modes = _mode_list(args.mode, cfg.mode)
    if "STL" in modes:
        raise Unsupported("interference needs a shared extractor; STL has none")
    epochs = args.epochs if args.epochs is not None else cfg["analysis"]["interference_epochs"]
    if epochs < 0:
        raise UsageError("--epochs must be >= 0")
    ds = cfg.dataset()
    seed, bs = cfg["optim"]["seed"], cfg["optim"]["batch_size"]

    def run(mode):
        model = _train(cfg, ds, mode, epochs).model
        batches = ds.batches("train", bs, np.random.default_rng(seed))
        return interference_histogram(model, batches, ds.tasks, include_self=args.include_self)

    with ThreadPoolExecutor(_threads(args)) as pool:
        reports = dict(zip(modes, pool.map(run, modes)))
    doc = {"epochs": epochs, "modes": {}}
    rows = []
    for mode, rep in reports.items():
        pooled = rep.pooled_variance()
        doc["modes"][mode] = {**rep.to_dict(ds.task_names), "pooled_variance": pooled}
        for a, b in rep.pairs:
            rows.append([mode, ds.task_names[a], ds.task_names[b], rep.mean((a, b)), rep.variance((a, b)), len(rep.samples[(a, b)])])
        n = sum(len(rep.samples[p]) for p in rep.pairs if p[0] != p[1])
        rows.append([mode, "*", "*", float("nan"), pooled, n])
    if len(modes) > 1:
        doc["lowest_variance_mode"] = min(modes, key=lambda m: doc["modes"][m]["pooled_variance"])
    persist.write_json(out / "interference.json", doc, "interference")
    persist.write_csv(out / "interference.csv", ["mode", "task_a", "task_b", "mean", "variance", "count"], rows)
    _echo_config(out, "interference", cfg, modes=modes, epochs=epochs, include_self=args.include_self)
    return EXIT_OK


def cmd_capacity_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "capacity-sweep")
    xis = _floats(args.xi, "--xi") if args.xi else list(cfg["analysis"]["xi_grid"])
    if not xis or any(x < 0 for x in xis):
        raise UsageError("--xi needs at least one non-negative value")
    seeds = [int(s) for s in _floats(args.seeds, "--seeds")] if args.seeds else list(cfg["analysis"]["seeds"])
    d = cfg["data"]
    if d["source"] not in ("synth", "noisy", "file", "idx"):
        raise UsageError(f"unsupported data source {d['source']!r}")
    probe = build(cfg.arch(cfg.dataset()), cfg.mode)
    _require_sigma(probe.norm_variant, "the capacity sweep")

    def run(job):
        seed, xi = job
        scfg = cfg.with_overrides(**{"optim.seed": seed, "data.seed": seed, "data.source": "synth" if d["source"] == "noisy" else d["source"]})
        try:
            fam = noisy_family(scfg.dataset(), xi, keep=d["noisy_keep"], source=d["noisy_source"], seed=seed)
        except (UnsupportedTaskError, IndexError) as e:
            raise UsageError(f"noisy family: {e}") from None
        I = importance_matrix(_train(scfg, fam).model, fam.task_names)
        sim = float(similarity_matrix(I).values[1, 2])
        decs = [decompose_capacity(I, t) for t in range(I.num_tasks)]
        return sim, decs[2].indep, [[seed, xi, n, d.total, d.shared, d.indep, sim] for n, d in zip(fam.task_names, decs)]

    jobs = [(s, x) for s in seeds for x in xis]
    with ThreadPoolExecutor(_threads(args)) as pool:
        results = list(pool.map(run, jobs))
    sim = np.array([r[0] for r in results]).reshape(len(seeds), len(xis))
    ind = np.array([r[1] for r in results]).reshape(len(seeds), len(xis))
    ms, mi = np.median(sim, axis=0), np.median(ind, axis=0)
    inv_s, inv_i = count_inversions(ms, increasing=False), count_inversions(mi, increasing=True)
    ok = inv_s <= 1 and inv_i <= 1
    doc = {
        "xi": xis,
        "seeds": seeds,
        "median": {"similarity": ms.tolist(), "indep": mi.tolist()},
        "trend": {
            "similarity_inversions": inv_s,
            "indep_inversions": inv_i,
            "max_inversions": 1,
            "verdict": "consistent" if ok else "inconsistent",
        },
    }
    rows = [row for r in results for row in r[2]]
    persist.write_csv(out / "capacity-sweep.csv", SWEEP_HEADER, rows)
    persist.write_json(out / "capacity-sweep.json", doc, "capacity-sweep")
    _echo_config(out, "capacity-sweep", cfg, xi=xis, seeds=seeds)
    log.info("capacity sweep trend %s", doc["trend"]["verdict"])
    return EXIT_OK


def cmd_relate(args) -> int:
    ckpts = []
    for path in args.checkpoints:
        if not Path(path).is_file():
            raise UsageError(f"checkpoint not found: {path}")
        ckpts.append(persist.load_checkpoint(path))
    names = ckpts[0].task_names
    for path, c in zip(args.checkpoints, ckpts):
        if c.task_names != names:
            raise UsageError(f"{path}: task set {c.task_names} differs from {names}")
        _require_sigma(c.model.norm_variant, "relating checkpoints")
    cfg = cfgmod.load(args.config) if args.config else ckpts[0].config
    out = _out_dir(args, cfg, "relate")
    k = args.k if args.k is not None else cfg["analysis"]["k_clusters"]
    if not 2 <= k <= len(names):
        raise UsageError(f"k={k} out of range [2, {len(names)}]")
    mats = [similarity_matrix(importance_matrix(c.model, names), names) for c in ckpts]
    clusters = cluster_tasks(mats, k)
    pairs, mean = [], None
    if len(mats) > 1 and len(names) >= 3:
        iu = np.triu_indices(len(names), 1)
        for i in range(len(mats)):
            for j in range(i + 1, len(mats)):
                try:
                    rho = spearman(mats[i].values[iu], mats[j].values[iu])
                except UndefinedCorrelationError:
                    rho = None
                pairs.append({"a": i, "b": j, "rho": rho})
        vals = [p["rho"] for p in pairs if p["rho"] is not None]
        mean = float(np.mean(vals)) if vals else None
    doc = {
        "checkpoints": [str(p) for p in args.checkpoints],
        "task_names": names,
        "similarity": [m.values.tolist() for m in mats],
        "spearman": {"pairs": pairs, "mean": mean},
        "clustering": clusters.to_dict(),
    }
    persist.write_json(out / "relate.json", doc, "relate")
    persist.write_csv(
        out / "relate.csv",
        ["run", "task", "cluster"],
        ([r, n, lab] for r, labels in enumerate(clusters.run_labels) for n, lab in zip(names, labels)),
    )
    _echo_config(out, "relate", cfg, checkpoints=doc["checkpoints"], k=k)
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    out = Path(args.out) if getattr(args, "out", None) else run_dir
    made = report.render(run_dir, out)
    if not made:
        raise UsageError(f"{run_dir}: no recognized output files to render")
    persist.write_json(out / "report.json", {"run_dir": str(run_dir), "figures": [p.name for p in made]}, "report")
    for p in made:
        log.info("wrote %s", p)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    g = p.add_argument_group("common options")
    if config:
        g.add_argument("--config", help="INI config, or a resolved-config.json from an earlier run")
    g.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>, [output] dir, ./mtlnorm-out/<command>)")
    g.add_argument("--seed", type=int, help="override both the data and the optimizer seed")
    g.add_argument("--threads", type=int, default=1, help="parallel runs for multi-run commands")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlnorm", description="Task-specific normalization experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--mode", help="sharing mode: stl, hps, tsbn, tssbn")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("analyze", cmd_analyze, "importance analyses of a checkpoint"),
        ("prune-eval", cmd_prune_eval, "prune each task's top-k filters and measure every task"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        _common(p)
        p.add_argument("--force", action="store_true", help="accept a checkpoint trained under a different config")
        p.set_defaults(func=func)
        if name == "analyze":
            for flag in ("capacity", "similarity", "specialization", "project"):
                p.add_argument(f"--{flag}", action="store_true")
            p.add_argument("--tau", type=float)
            p.add_argument("--samples", type=int, default=200, help="test inputs used by --project")
        else:
            p.add_argument("--k", type=int, help="filters pruned per task (default: 5%% of all filters)")
            p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("interference", help="gradient-cosine histograms on the shared weights")
    _common(p)
    p.add_argument("--mode", help="comma-separated sharing modes, e.g. hps,tssbn")
    p.add_argument("--epochs", type=int, help="training epochs before measuring")
    p.add_argument("--include-self", action="store_true")
    p.set_defaults(func=cmd_interference)

    p = sub.add_parser("capacity-sweep", help="noisy-duplicate sweep over xi")
    _common(p)
    p.add_argument("--xi", help="comma-separated noise levels")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_capacity_sweep)

    p = sub.add_parser("relate", help="similarity stability and task clusters across checkpoints")
    p.add_argument("checkpoints", nargs="+")
    _common(p)
    p.add_argument("--k", type=int, help="number of clusters")
    p.set_defaults(func=cmd_relate)

    p = sub.add_parser("report", help="render SVG figures for a run directory")
    p.add_argument("run_dir")
    _common(p, config=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, persist.CheckpointError, UsageError, FormatError, SpecError, ContractError, DimensionError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except NumericalAbort as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    except (Unsupported, UnsupportedVariantError) as e:
        log.error("unsupported: %s", e)
        return EXIT_UNSUPPORTED


if __name__ == "__main__":
    sys.exit(main())

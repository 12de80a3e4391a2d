"""Strict sectioned experiment configuration.

The text format is INI-style (``[section]`` headers, ``key = value`` lines,
``#``/``;`` comments).  Unknown sections or keys are errors that carry the line
number.  :func:`resolve` materializes every default; the resolved form can be
written as JSON and read back with :func:`load` to reproduce a run.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .data import MultiTaskDataset, SynthSpec, TaskDef, idx_load, load_dataset, noisy_family, reference_spec, synth_generate
from .norm import SHARED_VARIANTS
from .model import SHARING_MODES, ArchSpec, BlockSpec, reference_arch
from .train import OptimConfig


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set when the problem maps to a source line."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line, self.key = line, key


MODE_ALIASES = {
    "stl": "STL",
    "hps": "HPS",
    "tsbn": "TSBN",
    "tssbn": "TSSigmaBN",
    "tssigmabn": "TSSigmaBN",
}


def parse_mode(text: str) -> str:
    mode = MODE_ALIASES.get(text.strip().lower(), text.strip())
    if mode not in SHARING_MODES:
        raise ConfigError(f"unknown sharing mode {text!r}; expected one of {', '.join(SHARING_MODES)}")
    return mode


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _optional_int(text: str):
    return None if text.strip() in ("", "auto") else int(text)


def _optional_floats(text: str):
    return None if text.strip() in ("", "equal") else _floats(text)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple]] = {
    "arch": {
        "blocks": (str, ""),
        "head_hidden": (_ints, "64"),
        "norm": (str, "batch"),
        "hps_variant": (str, ""),
    },
    "mode": {"sharing": (parse_mode, "TSSigmaBN")},
    "optim": {
        "base_lr": (float, "0.001"),
        "alpha_sigma_bn": (float, "100.0"),
        "alpha_ln": (float, "10.0"),
        "alpha_bn": (float, "1.0"),
        "beta1": (float, "0.9"),
        "beta2": (float, "0.999"),
        "adam_eps": (float, "1e-08"),
        "epochs": (int, "10"),
        "batch_size": (int, "32"),
        "loss_weights": (_optional_floats, ""),
        "lr_halve_every": (int, "0"),
        "seed": (int, "0"),
    },
    "data": {
        "source": (str, "synth"),
        "num_samples": (int, "2000"),
        "latent_dim": (int, "8"),
        "label_noise": (float, "1.0"),
        "pixel_noise": (float, "0.05"),
        "pattern_smoothing": (float, "1.5"),
        "tasks": (str, ""),
        "seed": (int, "0"),
        "images": (str, ""),
        "labels": (str, ""),
        "path": (str, ""),
        "xi": (float, "0.0"),
        "noisy_keep": (int, "0"),
        "noisy_source": (int, "2"),
    },
    "analysis": {
        "tau": (float, "0.5"),
        "k_prune": (_optional_int, ""),
        "k_clusters": (int, "2"),
        "seeds": (_ints, "0,1,2"),
        "xi_grid": (_floats, "0,0.5,1,2,3"),
        "interference_epochs": (int, "1"),
    },
    "output": {"dir": (str, "")},
}

DATA_SOURCES = ("synth", "noisy", "idx", "file")
TRAINING_SECTIONS = ("arch", "mode", "optim", "data")


@dataclass
class ExperimentConfig:
    values: dict[str, dict]
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    # ----------------------------------------------------------------- views

    @property
    def mode(self) -> str:
        return self.values["mode"]["sharing"]

    def optim(self) -> OptimConfig:
        return OptimConfig(**self.values["optim"])

    def arch(self, dataset: MultiTaskDataset) -> ArchSpec:
        a = self.values["arch"]
        heads = [[*a["head_hidden"], t.output_dim] for t in dataset.tasks]
        shape = tuple(int(v) for v in dataset.inputs.shape[1:])
        if a["blocks"]:
            blocks = parse_blocks(a["blocks"])
        else:
            blocks = reference_arch(norm=a["norm"]).blocks
        spec = ArchSpec(shape, blocks, heads, a["norm"], a["hps_variant"] or None)
        spec.validate()
        return spec

    def synth_spec(self) -> SynthSpec:
        d = self.values["data"]
        spec = reference_spec(d["num_samples"], d["seed"], d["label_noise"])
        spec.latent_dim = d["latent_dim"]
        spec.pixel_noise = d["pixel_noise"]
        spec.pattern_smoothing = d["pattern_smoothing"]
        if d["tasks"]:
            spec.tasks = parse_tasks(d["tasks"])
        return spec

    def dataset(self) -> MultiTaskDataset:
        d = self.values["data"]
        src = d["source"]
        if src == "synth":
            return synth_generate(self.synth_spec())
        if src == "noisy":
            base = synth_generate(self.synth_spec())
            return noisy_family(base, d["xi"], keep=d["noisy_keep"], source=d["noisy_source"], seed=d["seed"])
        if src == "idx":
            for key in ("images", "labels"):
                if not d[key] or not Path(d[key]).is_file():
                    raise ConfigError(f"[data] {key}: file not found: {d[key]!r}", key=key)
            return idx_load(d["images"], d["labels"], seed=d["seed"])
        if not d["path"] or not Path(d["path"]).is_file():
            raise ConfigError(f"[data] path: file not found: {d['path']!r}", key="path")
        return load_dataset(d["path"])

    # ---------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.values))

    def hash(self) -> str:
        """SHA-256 of the sections that determine a trained model."""
        body = {k: v for k, v in self.to_dict().items() if k in TRAINING_SECTIONS}
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        values = self.to_dict()
        for dotted, v in changes.items():
            section, key = dotted.split(".")
            values[section][key] = v
        return ExperimentConfig(values, self.source)


def parse_blocks(text: str) -> list[BlockSpec]:
    """``kind width kernel stride activation pool`` per block, blocks separated by ``;``."""
    blocks = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        f = part.split()
        if len(f) != 6:
            raise ValueError(f"block {part!r} needs 6 fields: kind width kernel stride activation pool")
        blocks.append(BlockSpec(f[0], int(f[1]), int(f[2]), int(f[3]), f[4], int(f[5])))
    return blocks


def parse_tasks(text: str) -> list[TaskDef]:
    """``name kind classes latents noise`` per task, e.g. ``a classification 2 0,1,2 0.5``."""
    tasks = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        f = part.split()
        if len(f) != 5:
            raise ValueError(f"task {part!r} needs 5 fields: name kind classes latents noise")
        tasks.append(TaskDef(_ints(f[3]), f[1], int(f[2]), float(f[4]), f[0]))
    return tasks


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_map(text: str) -> dict[tuple[str, str | None], int]:
    lines: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), 1):
        if m := _SECTION.match(raw):
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
        elif section is not None and not raw[:1].isspace() and (m := _KEY.match(raw)):
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def parse_text(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="\x00none", inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno, e.option) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside any [section]", e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", line) from None
    lines = _line_map(text)
    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return _build(raw, lambda s, k=None: lines.get((s, k)), source)


def _build(raw: dict[str, dict], line_of, source: str) -> ExperimentConfig:
    values: dict[str, dict] = {}
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}", line_of(section))
        for key in raw[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; allowed: {', '.join(SCHEMA[section])}",
                    line_of(section, key),
                    key,
                )
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            given = raw.get(section, {}).get(key)
            text = default if given is None else given
            if not isinstance(text, str):
                values[section][key] = text
                continue
            try:
                values[section][key] = conv(text)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"[{section}] {key} = {text!r}: {e}", line_of(section, key), key) from None
    _check(values, line_of)
    return ExperimentConfig(values, source)


def _check(values: dict, line_of) -> None:
    d, a, o = values["data"], values["arch"], values["optim"]
    if d["source"] not in DATA_SOURCES:
        raise ConfigError(f"[data] source must be one of {', '.join(DATA_SOURCES)}", line_of("data", "source"), "source")
    if a["norm"] not in ("batch", "layer"):
        raise ConfigError("[arch] norm must be 'batch' or 'layer'", line_of("arch", "norm"), "norm")
    if a["hps_variant"] and a["hps_variant"] not in SHARED_VARIANTS:
        raise ConfigError(
            f"[arch] hps_variant must be one of {', '.join(sorted(SHARED_VARIANTS))}", line_of("arch", "hps_variant"), "hps_variant"
        )
    if a["blocks"]:
        try:
            parse_blocks(a["blocks"])
        except ValueError as e:
            raise ConfigError(f"[arch] blocks: {e}", line_of("arch", "blocks"), "blocks") from None
    if d["tasks"]:
        try:
            parse_tasks(d["tasks"])
        except ValueError as e:
            raise ConfigError(f"[data] tasks: {e}", line_of("data", "tasks"), "tasks") from None
    try:
        OptimConfig(**o).validate()
    except ValueError as e:
        raise ConfigError(f"[optim] {e}", line_of("optim")) from None
    if values["analysis"]["k_clusters"] < 2:
        raise ConfigError("[analysis] k_clusters must be >= 2", line_of("analysis", "k_clusters"), "k_clusters")
    if not values["analysis"]["seeds"]:
        raise ConfigError("[analysis] seeds must list at least one seed", line_of("analysis", "seeds"), "seeds")


def defaults() -> ExperimentConfig:
    return parse_text("", "<defaults>")


def load(path) -> ExperimentConfig:
    """Read an INI config, or a JSON file holding a resolved config."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e.msg}", e.lineno) from None
        doc = doc.get("config", doc)
        raw = {s: {k: v for k, v in keys.items()} for s, keys in doc.items()}
        return _build(raw, lambda s, k=None: None, str(p))
    return parse_text(text, str(p))

"""Run configuration: one INI document drives every pipeline stage.

The schema mirrors the library's config dataclasses section by section
([task], [model], [train], [beam]) and adds [data], [run], and [paths]
for sizes, stage options, and file locations. Parsing is strict: unknown
sections or keys are errors, and the resolved form (every key, explicit
value) is what reports and manifests embed.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .corpus import SyntheticTaskSpec
from .decode import BeamConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Raised when a run configuration cannot be parsed or validated."""


ENV_SEED = "BRIO_SEED"
ENV_THREADS = "BRIO_THREADS"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(part) for part in text.split(","))


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_render(v) for v in value)
    return str(value)


_PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
}


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


def _mirror(cls, helps: dict[str, str], exclude: tuple[str, ...] = ()) -> dict[str, _Key]:
    """Build schema entries from a config dataclass's fields and defaults."""
    out: dict[str, _Key] = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        type_name = f.type if isinstance(f.type, str) else f.type.__name__
        if type_name not in _PARSERS:
            raise ConfigError(f"unmirrorable field type {type_name} for {f.name}")
        if f.default is dataclasses.MISSING:
            default: Any = 0  # sentinel: resolved from data at use time
        else:
            default = f.default
        out[f.name] = _Key(_PARSERS[type_name], default, helps.get(f.name, ""))
    return out


_TASK_HELP = {
    "n_keywords": "count of always-salient keyword tokens",
    "n_optional": "count of contextually kept keyword tokens",
    "n_fillers": "count of never-salient filler tokens",
    "src_len_min": "minimum source content length",
    "src_len_max": "maximum source content length",
    "p_keyword": "per-position probability of a salient keyword",
    "p_optional": "per-position probability of an optional keyword",
    "max_salient": "maximum reference content length (resampled above)",
    "paraphrase": "substitute partner forms at odd source positions",
}

_MODEL_HELP = {
    "vocab_size": "token count; 0 means derive from the vocabulary file",
    "embed_dim": "embedding width (must divide by n_heads)",
    "n_heads": "attention heads per layer",
    "n_encoder_layers": "encoder depth",
    "n_decoder_layers": "decoder depth",
    "ffn_dim": "feed-forward hidden width",
    "max_source_len": "positional table size, source side",
    "max_target_len": "positional table size, target side",
    "dropout": "dropout rate during training",
}

_TRAIN_HELP = {
    "epochs": "passes over the training split",
    "batch_size": "examples per MLE batch",
    "lr_scale": "peak scale of the warmup/inverse-sqrt schedule",
    "warmup_steps": "steps of linear warmup",
    "lr_mode": "'schedule' or 'constant'",
    "constant_lr": "learning rate when lr_mode = constant",
    "label_smoothing": "probability mass spread off the gold token",
    "margin_lambda": "rank-gap margin unit of the contrastive loss",
    "length_alpha": "length-normalization exponent of sequence scores",
    "gamma": "contrastive weight in the combined objective",
    "quality_metric": "candidate quality: rouge-1, rouge-2, rouge-l, rouge-mean",
    "tie_tolerance": "quality gap under which ordered candidates count as tied",
    "include_reference": "prepend the reference to each candidate set",
}

_BEAM_HELP = {
    "beam_width": "total beam width",
    "max_len": "maximum generated content length",
    "length_penalty": "alpha exponent used while decoding",
    "n_groups": "diversity groups (1 = standard beam search)",
    "diversity_strength": "Hamming penalty between groups",
    "n_candidates": "candidates kept per example",
}


def _schema() -> dict[str, dict[str, _Key]]:
    return {
        "task": _mirror(SyntheticTaskSpec, _TASK_HELP),
        "model": _mirror(ModelConfig, _MODEL_HELP),
        "train": _mirror(TrainConfig, _TRAIN_HELP, exclude=("seed", "beam")),
        "beam": _mirror(BeamConfig, _BEAM_HELP),
        "data": {
            "n_train": _Key(int, 2000, "training examples to synthesize"),
            "n_valid": _Key(int, 200, "validation examples to synthesize"),
            "n_test": _Key(int, 200, "test examples to synthesize"),
        },
        "run": {
            "seed": _Key(int, 0, f"master seed (env {ENV_SEED} overrides)"),
            "brio_mode": _Key(lambda s: s.strip(), "mul",
                              "coordination objective: 'mul' or 'ctr'"),
            "calibration_buckets": _Key(int, 10, "confidence buckets for ECE"),
            "novelty_buckets": _Key(int, 4, "equal-count buckets by reference novelty"),
            "sweep_kind": _Key(lambda s: s.strip(), "gamma",
                               "sweep subcommand target: 'gamma' or 'beam'"),
            "sweep_gammas": _Key(_parse_float_list, (0.0, 0.05, 0.15, 0.5),
                                 "gamma grid; must include 0"),
            "beam_widths": _Key(_parse_int_list, (1, 2, 4, 8),
                                "beam-width grid, ascending"),
            "alpha_sweep": _Key(_parse_float_list, (),
                                "optional alpha grid for scoring-model selection"
                                " (empty = use train.length_alpha)"),
            "loop_rounds": _Key(int, 2, "generation-finetuning rounds"),
            "few_shot_k": _Key(int, 50, "examples per few-shot repeat"),
            "few_shot_repeats": _Key(int, 3, "few-shot repeats to average"),
        },
        "paths": {
            "train_data": _Key(lambda s: s.strip(), "", "training split TSV"),
            "valid_data": _Key(lambda s: s.strip(), "", "validation split TSV"),
            "test_data": _Key(lambda s: s.strip(), "", "test split TSV"),
            "data": _Key(lambda s: s.strip(), "", "single split TSV for split-level stages"),
            "vocab": _Key(lambda s: s.strip(), "", "vocabulary file"),
            "checkpoint": _Key(lambda s: s.strip(), "", "input model checkpoint"),
            "extra_checkpoints": _Key(lambda s: s.strip(), "",
                                      "comma-separated additional checkpoints"),
            "cache": _Key(lambda s: s.strip(), "", "candidate cache JSONL"),
            "out_dir": _Key(lambda s: s.strip(), "", "output directory (must be fresh or empty)"),
        },
    }


SCHEMA = _schema()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one CLI invocation."""

    task: SyntheticTaskSpec
    model_overrides: dict[str, Any]
    train: TrainConfig
    data_sizes: dict[str, int]
    run: dict[str, Any]
    paths: dict[str, str]
    seed: int
    resolved: dict[str, dict[str, str]] = field(repr=False)

    def model_config(self, vocab_size: int) -> ModelConfig:
        """Materialize the model configuration against a known vocabulary."""
        kwargs = dict(self.model_overrides)
        if kwargs.get("vocab_size", 0) == 0:
            kwargs["vocab_size"] = vocab_size
        return ModelConfig(**kwargs)

    def path(self, key: str) -> Path:
        """Return a configured path, erroring if the key was left empty."""
        value = self.paths.get(key, "")
        if not value:
            raise ConfigError(f"paths.{key} is required by this stage but unset")
        return Path(value)


def _parse_sections(parser: configparser.ConfigParser) -> dict[str, dict[str, Any]]:
    values: dict[str, dict[str, Any]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {name: key.default for name, key in keys.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            if name not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{name}")
            try:
                values[section][name] = SCHEMA[section][name].parse(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{name}: {exc}") from exc
    return values


def parse_runconfig(path: str | Path | None = None) -> RunConfig:
    """Parse an INI file (or defaults when ``path`` is None) into a RunConfig.

    Environment: ``BRIO_SEED`` overrides run.seed when set.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"config does not parse: {exc}") from exc
    values = _parse_sections(parser)

    seed = values["run"]["seed"]
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env_seed!r}") from exc
        values["run"]["seed"] = seed

    try:
        task = SyntheticTaskSpec(**values["task"])
        beam = BeamConfig(**values["beam"])
        train = TrainConfig(seed=seed, beam=beam, **values["train"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    resolved = {
        section: {name: _render(values[section][name]) for name in sorted(keys)}
        for section, keys in SCHEMA.items()
    }
    return RunConfig(
        task=task,
        model_overrides=dict(values["model"]),
        train=train,
        data_sizes=dict(values["data"]),
        run=dict(values["run"]),
        paths=dict(values["paths"]),
        seed=seed,
        resolved=resolved,
    )


def help_text() -> str:
    """Every config key with its default, for --help output."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for name, key in keys.items():
            default = _render(key.default)
            shown = default if default != "" else "(unset)"
            lines.append(f"  {name} = {shown}")
            if key.help:
                lines.append(f"      {key.help}")
    return "\n".join(lines)


def thread_limit_from_env() -> int | None:
    """Parse BRIO_THREADS, returning None when unset."""
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_THREADS} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1")
    return n

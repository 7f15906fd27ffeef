"""
Pipeline configuration: a flat YAML file (see sample_config.yaml), environment
overrides loaded through python-dotenv, and command-line overrides on top.
"""

import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import yaml
from dotenv import load_dotenv

from artifacts import config_hash, file_digest
from corpus import DEFAULT_BAD_PATTERNS, DEFAULT_GOOD_PATTERNS, DEFAULT_RATIOS, MODES, NamePatterns
from embedding import CbowParams, SUBSAMPLE_VARIANTS, TRUNCATE_MODES
from errors import ConfigError
from neural import CELLS, ModelConfig
from training import TRAINING_CONFIG, TrainingSchedule

DEFAULT_CONFIG_FILE = "config.yaml"

# Environment variable -> flat config key
ENV_OVERRIDES = {
    "VULNRNN_WORKSPACE": "workspace",
    "VULNRNN_INPUT_DIR": "input_dir",
    "VULNRNN_SEED": "seed",
    "VULNRNN_WORKERS": "workers",
}


@dataclass(frozen=True)
class SelectionConfig:
    min_class_count: int = 500
    min_tokens: int = 300
    excluded_cwes: Tuple[int, ...] = ()
    absent_cwes: Tuple[int, ...] = (615,)
    bad_name_patterns: Tuple[str, ...] = DEFAULT_BAD_PATTERNS
    good_name_patterns: Tuple[str, ...] = DEFAULT_GOOD_PATTERNS
    split_ratios: Tuple[float, float, float] = DEFAULT_RATIOS

    def name_patterns(self):
        if not self.bad_name_patterns and not self.good_name_patterns:
            return None
        return NamePatterns(bad=self.bad_name_patterns, good=self.good_name_patterns)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = TRAINING_CONFIG["batch_size"]
    learning_rate: float = TRAINING_CONFIG["initial_lr"]
    plateau_patience: int = TRAINING_CONFIG["plateau_patience"]
    plateau_factor: float = TRAINING_CONFIG["plateau_factor"]
    early_stop_patience: int = TRAINING_CONFIG["early_stop_patience"]
    max_epochs: int = 200
    class_weighting: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: str = "ir"
    workspace: str = "workspace"
    mode: str = "binary"
    seed: int = 0
    workers: int = 1
    seq_len: int = 1000
    truncate: str = "pre"
    label_map_path: Optional[str] = None
    metadata_overrides: Optional[str] = None
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    cbow: CbowParams = field(default_factory=CbowParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def model_config(self, num_classes):
        return replace(self.model, input_dim=self.cbow.dimension, seq_len=self.seq_len,
                       num_classes=num_classes)

    def training_schedule(self, class_weights=None, seed=0):
        t = self.training
        return TrainingSchedule(
            batch_size=t.batch_size,
            initial_lr=t.learning_rate,
            plateau_patience=t.plateau_patience,
            plateau_factor=t.plateau_factor,
            early_stop_patience=t.early_stop_patience,
            max_epochs=t.max_epochs,
            class_weights=class_weights if t.class_weighting else None,
            seed=seed,
        )


# Flat key -> (section, field, converter)
def _int_tuple(value):
    return tuple(int(v) for v in (value or []))


def _str_tuple(value):
    return tuple(str(v) for v in (value or []))


def _float_tuple(value):
    return tuple(float(v) for v in value)


def _optional_str(value):
    return None if value in (None, "") else str(value)


def _bool(value):
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


CONFIG_KEYS = {
    "input_dir": (None, "input_dir", str),
    "workspace": (None, "workspace", str),
    "mode": (None, "mode", str),
    "seed": (None, "seed", int),
    "workers": (None, "workers", int),
    "seq_len": (None, "seq_len", int),
    "truncate": (None, "truncate", str),
    "label_map_path": (None, "label_map_path", _optional_str),
    "metadata_overrides": (None, "metadata_overrides", _optional_str),
    "min_class_count": ("selection", "min_class_count", int),
    "min_tokens": ("selection", "min_tokens", int),
    "excluded_cwes": ("selection", "excluded_cwes", _int_tuple),
    "absent_cwes": ("selection", "absent_cwes", _int_tuple),
    "bad_name_patterns": ("selection", "bad_name_patterns", _str_tuple),
    "good_name_patterns": ("selection", "good_name_patterns", _str_tuple),
    "split_ratios": ("selection", "split_ratios", _float_tuple),
    "embedding_dimension": ("cbow", "dimension", int),
    "cbow_window": ("cbow", "window", int),
    "cbow_downsample": ("cbow", "downsample", float),
    "cbow_negatives": ("cbow", "negatives", int),
    "cbow_epochs": ("cbow", "epochs", int),
    "cbow_alpha": ("cbow", "alpha", float),
    "cbow_min_alpha": ("cbow", "min_alpha", float),
    "subsample_variant": ("cbow", "subsample_variant", str),
    "cell": ("model", "cell", str),
    "bidirectional": ("model", "bidirectional", _bool),
    "rnn_layers": ("model", "rnn_layers", int),
    "units": ("model", "units", int),
    "batch_size": ("training", "batch_size", int),
    "learning_rate": ("training", "learning_rate", float),
    "plateau_patience": ("training", "plateau_patience", int),
    "plateau_factor": ("training", "plateau_factor", float),
    "early_stop_patience": ("training", "early_stop_patience", int),
    "max_epochs": ("training", "max_epochs", int),
    "class_weighting": ("training", "class_weighting", _bool),
}


def _validate(config):
    problems = []
    sel, cbow, model, t = config.selection, config.cbow, config.model, config.training
    if config.mode not in MODES:
        problems.append(f"mode must be one of {MODES}")
    if config.seed < 0:
        problems.append("seed must be >= 0")
    if config.workers < 1:
        problems.append("workers must be >= 1")
    if config.seq_len < 1:
        problems.append("seq_len must be >= 1")
    if config.truncate not in TRUNCATE_MODES:
        problems.append(f"truncate must be one of {TRUNCATE_MODES}")
    if sel.min_class_count < 1 or sel.min_tokens < 0:
        problems.append("min_class_count must be >= 1 and min_tokens >= 0")
    if len(sel.split_ratios) != 3 or any(r <= 0 for r in sel.split_ratios) \
            or abs(sum(sel.split_ratios) - 1.0) > 1e-9:
        problems.append("split_ratios must be three positive numbers summing to 1")
    if cbow.dimension < 1 or cbow.window < 1 or cbow.negatives < 1 or cbow.epochs < 0:
        problems.append("embedding_dimension, cbow_window, cbow_negatives must be >= 1, cbow_epochs >= 0")
    if cbow.subsample_variant not in SUBSAMPLE_VARIANTS:
        problems.append(f"subsample_variant must be one of {SUBSAMPLE_VARIANTS}")
    if model.cell not in CELLS:
        problems.append(f"cell must be one of {CELLS}")
    if not 1 <= model.rnn_layers <= 3:
        problems.append("rnn_layers must be in 1..3")
    if t.batch_size < 1 or t.learning_rate <= 0 or t.max_epochs < 1:
        problems.append("batch_size and max_epochs must be >= 1, learning_rate > 0")
    if t.plateau_patience < 1 or t.early_stop_patience < 1 or not 0 < t.plateau_factor < 1:
        problems.append("patience values must be >= 1 and plateau_factor in (0, 1)")
    for label, path in (("label_map_path", config.label_map_path),
                        ("metadata_overrides", config.metadata_overrides)):
        if path and not Path(path).is_file():
            problems.append(f"{label} '{path}' does not exist")
    if problems:
        raise ConfigError("Invalid configuration: " + "; ".join(problems))


def build_config(flat):
    """Build a PipelineConfig from a flat key -> value mapping"""
    unknown = sorted(set(flat) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")

    top, sections = {}, {"selection": {}, "cbow": {}, "model": {}, "training": {}}
    for key, value in flat.items():
        section, name, convert = CONFIG_KEYS[key]
        try:
            converted = convert(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Config key '{key}': {exc}") from exc
        (top if section is None else sections[section])[name] = converted

    try:
        config = PipelineConfig(
            selection=SelectionConfig(**sections["selection"]),
            cbow=CbowParams(**sections["cbow"]),
            model=ModelConfig(**sections["model"]),
            training=TrainingConfig(**sections["training"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc
    _validate(config)
    return config


def load_config(path=None, overrides=None):
    """
    Load config: YAML file (if present), then VULNRNN_* environment variables
    (a .env file is honoured), then explicit overrides such as CLI flags.
    """
    load_dotenv()
    flat = {}
    explicit = path is not None
    path = Path(path or DEFAULT_CONFIG_FILE)
    if path.exists():
        with open(path, "r", encoding="utf-8") as stream:
            try:
                flat = yaml.safe_load(stream) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"Cannot parse {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError(f"{path} must hold a flat key: value mapping")
    elif explicit:
        raise ConfigError(f"Config file {path} not found")

    for env_name, key in ENV_OVERRIDES.items():
        value = os.getenv(env_name)
        if value:
            flat[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build_config(flat)


def to_flat(config):
    """Inverse of build_config, used to echo the effective configuration"""
    flat = {}
    for key, (section, name, _) in CONFIG_KEYS.items():
        source = config if section is None else getattr(config, section)
        value = getattr(source, name)
        flat[key] = list(value) if isinstance(value, tuple) else value
    return flat


# Config sections each stage reads, cumulative over its upstream stages
_STAGE_SECTIONS = {
    "normalize": ("metadata_overrides",),
    "select": ("min_class_count", "min_tokens", "excluded_cwes", "absent_cwes",
               "bad_name_patterns", "good_name_patterns", "split_ratios",
               "mode", "label_map_path"),
    "embed": tuple(k for k, v in CONFIG_KEYS.items() if v[0] == "cbow"),
    "encode": ("seq_len", "truncate"),
    "train": tuple(k for k, v in CONFIG_KEYS.items() if v[0] in ("model", "training")),
}
STAGES = ("normalize", "select", "embed", "encode", "train")
_FILE_KEYS = ("metadata_overrides", "label_map_path")


def stage_config_hash(config, stage, corpus_digest=""):
    """
    Hash of the config keys `stage` and all its upstream stages depend on, plus the seed.

    `corpus_digest` identifies the normalised token records (see `records_digest`), so
    re-normalising a different input directory invalidates every downstream artifact.
    Referenced YAML files enter by content.
    """
    flat = to_flat(config)
    keys = []
    for name in STAGES[:STAGES.index(stage) + 1]:
        keys.extend(_STAGE_SECTIONS[name])
    section = {}
    for k in sorted(keys):
        section[k] = {"path": flat[k], "content": file_digest(flat[k])} if k in _FILE_KEYS else flat[k]
    section["seed"] = config.seed
    section["corpus"] = corpus_digest
    return config_hash(section)


def derive_seed(seed, stage):
    """Per-stage seed derived from the top-level seed"""
    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def cbow_params(config, seed):
    return replace(config.cbow, seed=seed, workers=config.workers)


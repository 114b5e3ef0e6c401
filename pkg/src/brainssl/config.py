"""Run configuration: sectioned key=value files, validation, stable hashing.

Everything that affects science lives in the config file; command-line
flags only select modes and paths. Unknown sections or keys are rejected,
referenced paths must resolve at validation time, and the config hash is
invariant to key order so artifacts from one configuration can be
recognized regardless of file formatting.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from pathlib import Path

from .augment import PIPELINE_NAMES, AugmentSpec, build_pipeline, spec_from_lines
from .evaluation import BUILTIN_TASKS, EvalRunConfig
from .mae import ViTConfig
from .sampling import FRACTION_LADDER
from .simclr import EncoderConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "BRAINSSL_OUTPUT_ROOT"
THREADS_ENV = "BRAINSSL_THREADS"

ALLOWED_KEYS = {
    "data": {"manifest"},
    "augment": {"pipeline", "transforms"},
    "model": {
        "kind",
        "widths",
        "input_shape",
        "projection_dim",
        "projection_hidden",
        "temperature",
        "embed_dim",
        "depth",
        "num_heads",
        "decoder_embed_dim",
        "decoder_depth",
        "decoder_heads",
        "patch_dims",
        "mlp_ratio",
    },
    "train": {
        "objective",
        "epochs",
        "effective_batch_size",
        "learning_rate",
        "weight_decay",
        "schedule",
        "warmup_epochs",
        "seed",
        "device_count",
        "mask_ratio",
    },
    "eval": {
        "task",
        "mode",
        "epochs",
        "learning_rate",
        "weight_decay",
        "batch_size",
        "seeds",
        "supervised_epochs",
    },
    "output": {"root"},
}

MODEL_KINDS = ("resnet18_3d", "vit_tiny")


class ConfigError(ValueError):
    pass


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected integer, got {text!r}") from exc


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: expected number, got {text!r}") from exc


def _parse_int_tuple(text: str, where: str) -> tuple[int, ...]:
    try:
        return tuple(int(x.strip()) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{where}: expected comma-separated integers, got {text!r}") from exc


class RunConfig:
    def __init__(self, sections: dict[str, dict[str, str]], source: Path | None = None):
        self.sections = {s: dict(kv) for s, kv in sections.items()}
        self.source = source
        for section, keys in self.sections.items():
            if section not in ALLOWED_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            for key in keys:
                if key not in ALLOWED_KEYS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        sections = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls(sections, source=path)

    # -- raw access ---------------------------------------------------------

    def get(self, section: str, key: str, default=None) -> str | None:
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str) -> str:
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"missing required config key {section}.{key}")
        return value

    def config_hash(self) -> str:
        lines = []
        for section in sorted(self.sections):
            for key in sorted(self.sections[section]):
                value = " ".join(self.sections[section][key].split())
                lines.append(f"{section}.{key}={value}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    # -- typed views --------------------------------------------------------

    def manifest_path(self) -> Path:
        path = Path(self.require("data", "manifest"))
        if not path.exists():
            raise ConfigError(f"data.manifest does not resolve: {path}")
        return path

    def output_root(self) -> Path:
        env = os.environ.get(OUTPUT_ROOT_ENV)
        if env:
            return Path(env)
        return Path(self.require("output", "root"))

    def model_kind(self) -> str:
        kind = self.require("model", "kind")
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {kind!r}")
        return kind

    def encoder_config(self) -> EncoderConfig:
        kwargs = {}
        if self.get("model", "widths"):
            kwargs["widths"] = _parse_int_tuple(self.get("model", "widths"), "model.widths")
        if self.get("model", "input_shape"):
            kwargs["input_shape"] = _parse_int_tuple(self.get("model", "input_shape"), "model.input_shape")
        if self.get("model", "projection_dim"):
            kwargs["projection_dim"] = _parse_int(self.get("model", "projection_dim"), "model.projection_dim")
        if self.get("model", "projection_hidden"):
            kwargs["projection_hidden"] = _parse_int(self.get("model", "projection_hidden"), "model.projection_hidden")
        if self.get("model", "temperature"):
            kwargs["temperature"] = _parse_float(self.get("model", "temperature"), "model.temperature")
        try:
            return EncoderConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [model] section: {exc}") from exc

    def vit_config(self) -> ViTConfig:
        kwargs = {}
        for key in ("embed_dim", "depth", "num_heads", "decoder_embed_dim", "decoder_depth", "decoder_heads"):
            if self.get("model", key):
                kwargs[key] = _parse_int(self.get("model", key), f"model.{key}")
        if self.get("model", "patch_dims"):
            kwargs["patch_dims"] = _parse_int_tuple(self.get("model", "patch_dims"), "model.patch_dims")
        if self.get("model", "input_shape"):
            kwargs["input_shape"] = _parse_int_tuple(self.get("model", "input_shape"), "model.input_shape")
        if self.get("model", "mlp_ratio"):
            kwargs["mlp_ratio"] = _parse_float(self.get("model", "mlp_ratio"), "model.mlp_ratio")
        try:
            return ViTConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [model] section: {exc}") from exc

    def train_config(self) -> TrainConfig:
        objective = self.require("train", "objective")
        kwargs = {"objective": objective}
        int_keys = ("epochs", "effective_batch_size", "warmup_epochs", "seed", "device_count")
        for key in int_keys:
            if self.get("train", key):
                kwargs[key] = _parse_int(self.get("train", key), f"train.{key}")
        for key in ("learning_rate", "weight_decay", "mask_ratio"):
            if self.get("train", key):
                kwargs[key] = _parse_float(self.get("train", key), f"train.{key}")
        if self.get("train", "schedule"):
            kwargs["schedule"] = self.get("train", "schedule")
        kwargs["augment"] = self.augment_pipeline_name()
        try:
            return TrainConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [train] section: {exc}") from exc

    def augment_pipeline_name(self) -> str:
        name = self.get("augment", "pipeline", "none")
        if name not in PIPELINE_NAMES:
            raise ConfigError(f"augment.pipeline must be one of {PIPELINE_NAMES}, got {name!r}")
        return name

    def augment_spec(self, out_shape) -> AugmentSpec:
        """Explicit transform list if given, else the named pipeline."""
        raw = self.get("augment", "transforms")
        if raw:
            try:
                return spec_from_lines(line for line in raw.splitlines() if line.strip())
            except ValueError as exc:
                raise ConfigError(f"invalid augment.transforms: {exc}") from exc
        return build_pipeline(self.augment_pipeline_name(), out_shape=out_shape)

    def eval_run_config(self) -> EvalRunConfig:
        kwargs = {}
        if self.get("eval", "epochs"):
            kwargs["epochs"] = _parse_int(self.get("eval", "epochs"), "eval.epochs")
        if self.get("eval", "learning_rate"):
            kwargs["learning_rate"] = _parse_float(self.get("eval", "learning_rate"), "eval.learning_rate")
        if self.get("eval", "weight_decay"):
            kwargs["weight_decay"] = _parse_float(self.get("eval", "weight_decay"), "eval.weight_decay")
        if self.get("eval", "batch_size"):
            kwargs["batch_size"] = _parse_int(self.get("eval", "batch_size"), "eval.batch_size")
        try:
            return EvalRunConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [eval] section: {exc}") from exc

    def eval_seeds(self) -> tuple[int, ...]:
        raw = self.get("eval", "seeds", "0,1,2,3,4")
        return _parse_int_tuple(raw, "eval.seeds")

    def eval_task_name(self) -> str:
        name = self.require("eval", "task")
        if name not in BUILTIN_TASKS:
            raise ConfigError(f"eval.task must be one of {sorted(BUILTIN_TASKS)}, got {name!r}")
        return name

    def supervised_epochs(self) -> int:
        raw = self.get("eval", "supervised_epochs")
        return _parse_int(raw, "eval.supervised_epochs") if raw else 300


def parse_fractions(text: str) -> tuple[float, ...]:
    """--fractions argument: "default" or comma-separated values in (0, 1]."""
    if text == "default":
        return FRACTION_LADDER
    try:
        fractions = tuple(float(x.strip()) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"invalid fractions {text!r}") from exc
    if not fractions or any(not (0 < f <= 1) for f in fractions):
        raise ConfigError(f"fractions must be in (0, 1], got {fractions}")
    return fractions


def apply_thread_env() -> None:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        import torch

        torch.set_num_threads(int(threads))

"""Experiment configuration: one bundle, resolved defaults, strict parsing.

A run is fully described by an ExperimentConfig. Parsing from JSON is
strict: unknown keys are rejected with their full key path, derived
fields (encoder.seq_len) are accepted only if consistent, and every
constraint is checked before any computation starts. The canonical JSON
form of a resolved config hashes to a stable identifier used in
manifests and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossConfig
from .prompts import InjectionConfig, PromptConfig, default_insert_layer
from .tasks import TaskConfig
from .training import TrainConfig

TOOL_VERSION = "0.1.0"

_SECTIONS = ("encoder", "task", "prompt", "injection", "loss", "train")


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = EncoderConfig()
    task: TaskConfig = TaskConfig()
    prompt: PromptConfig = PromptConfig()
    injection: InjectionConfig = None
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()

    def resolve(self) -> "ExperimentConfig":
        """Fill derived fields: sequence length and the default insert layer."""
        seq_len = self.prompt.length + self.task.class_token_len + 1
        encoder = dataclasses.replace(self.encoder, seq_len=seq_len)
        injection = self.injection
        if injection is None:
            injection = InjectionConfig(
                layers=(default_insert_layer(encoder.num_layers),),
                fusion_weight=1.0,
            )
        return dataclasses.replace(self, encoder=encoder, injection=injection)

    def validate(self) -> "ExperimentConfig":
        cfg = self.resolve()
        cfg.encoder.validate("encoder")
        cfg.task.validate("task")
        cfg.prompt.validate("prompt")
        cfg.injection.validate(cfg.encoder.num_layers, "injection")
        cfg.loss.validate("loss")
        cfg.train.validate(cfg.loss, "train")
        need = cfg.task.num_classes * cfg.task.class_token_len + cfg.prompt.length + 1
        if need > cfg.encoder.vocab_size:
            raise ConfigError(
                f"encoder.vocab_size={cfg.encoder.vocab_size} cannot host "
                f"{cfg.task.num_classes} classes plus reserved ids ({need} needed)"
            )
        return cfg

    def to_dict(self) -> dict:
        cfg = self.resolve()
        out = {}
        for section in _SECTIONS:
            value = getattr(cfg, section)
            d = dataclasses.asdict(value)
            if section == "injection":
                d["layers"] = list(d["layers"])
            out[section] = d
        return out


def config_from_dict(payload: dict, path: str = "config") -> ExperimentConfig:
    """Strict parse: unknown keys and type mismatches name their key path."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must be a JSON object")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r} under {path}")
    sections = {}
    classes = {
        "encoder": EncoderConfig,
        "task": TaskConfig,
        "prompt": PromptConfig,
        "injection": InjectionConfig,
        "loss": LossConfig,
        "train": TrainConfig,
    }
    for section, cls in classes.items():
        entry = payload.get(section, {})
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}.{section} must be a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key in entry:
            if key not in fields:
                raise ConfigError(f"unknown key {path}.{section}.{key}")
        kwargs = {}
        for key, value in entry.items():
            kwargs[key] = _coerce(value, f"{path}.{section}.{key}")
        if section == "injection":
            if not entry:
                sections[section] = None
                continue
            if "layers" in kwargs:
                kwargs["layers"] = tuple(kwargs["layers"])
            else:
                kwargs["layers"] = None
        try:
            sections[section] = cls(**kwargs)
        except TypeError as err:
            raise ConfigError(f"{path}.{section}: {err}") from err
    if sections["injection"] is not None and sections["injection"].layers is None:
        # fusion weight given without layers: layers take the resolved default
        base = ExperimentConfig(
            encoder=sections["encoder"], task=sections["task"],
            prompt=sections["prompt"], injection=None,
            loss=sections["loss"], train=sections["train"],
        ).resolve()
        sections["injection"] = dataclasses.replace(
            base.injection, fusion_weight=sections["injection"].fusion_weight
        )
    cfg = ExperimentConfig(**sections)
    resolved = cfg.resolve()
    declared_seq = payload.get("encoder", {}).get("seq_len")
    if declared_seq is not None and declared_seq != resolved.encoder.seq_len:
        raise ConfigError(
            f"{path}.encoder.seq_len={declared_seq} inconsistent with "
            f"prompt.length + task.class_token_len + 1 = {resolved.encoder.seq_len}"
        )
    return resolved


def _coerce(value, keypath: str):
    if isinstance(value, list):
        return [_coerce(v, keypath) for v in value]
    if isinstance(value, (int, float, str, bool)) or value is None:
        return value
    raise ConfigError(f"{keypath} has unsupported type {type(value).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()


def load_config_file(path) -> ExperimentConfig:
    try:
        text = open(path).read()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    return config_from_dict(payload)

"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Unknown keys are rejected at every level so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class CohortSection:
    n_studies: int = 500
    grid: tuple[int, int, int] = (32, 32, 8)
    lesion_gain: float = 2.0        # pipeline lesions are more salient than the generator default
    lesion_scale: float = 2.2
    noise_sd: float = 0.02
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class TokenizerSection:
    patch_dims: tuple[int, int, int] = (8, 8, 2)
    downsample: tuple[int, int, int] = (4, 4, 2)
    latent_channels: int = 2
    codebook_size: int = 64
    channels: int = 16
    steps: int = 400
    batch_size: int = 128
    lr: float = 2e-3
    permute: bool = True
    threshold: float = 0.05
    max_patches_per_sequence: int = 24


@dataclass
class TextSection:
    lm_epochs: int = 10
    lm_dim: int = 64
    lm_layers: int = 2
    name_steps: int = 300
    name_dim: int = 32


@dataclass
class EncoderSection:
    seq_layers: int = 2
    seq_heads: int = 4
    seq_head_dim: int = 16
    seq_registers: int = 4
    seq_output_dim: int = 64
    pos_dim_per_axis: int = 6
    pos_base: float = 10000.0
    study_layers: int = 2
    study_heads: int = 4
    study_head_dim: int = 16
    study_registers: int = 4
    study_output_dim: int = 128
    readout: str = "registers"


@dataclass
class AugmentSection:
    shuffle_items: float = 1.0
    token_drop: float = 0.3
    name_unk: float = 0.1
    threshold_jitter: float = 0.01
    seq_drop: float = 0.1


@dataclass
class ObjectiveSection:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 5e-4
    temperature_lr: float = 1e-2
    weight_decay: float = 0.05
    lam: float = 0.03
    self_mode: str = "suppress"
    tau_init: float = 2.6593      # log(1/0.07)
    tau_p_init: float = 0.1
    abnormal_upsample: float = 4.0
    eval_every: int = 50
    freeze_report_lm: bool = True
    convergence_target: float = 0.1      # validation top-1 used for steps-to-target
    convergence_max_steps: int = 1500
    convergence_eval_every: int = 10     # finer than eval_every so steps-to-target can separate runs
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class HeadSection:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    dropout: float = 0.1
    context_dim: int = 16


@dataclass
class EvalSection:
    group_size: int = 100
    npr_k: int = 20
    bin_width: float = 0.1
    scale_fractions: tuple[float, ...] = (0.25, 0.5, 1.0)
    scale_seeds: tuple[int, ...] = (0, 1, 2)
    scale_steps: int = 300


@dataclass
class ExplainSection:
    class_name: str = "glioma"
    n_samples: int = 3000
    sigma: float = 0.25
    top_k: int = 3
    max_studies: int = 20


@dataclass
class FairnessSection:
    n: int = 200
    iters: int = 20
    threshold: float = 0.1
    decision_threshold: float = 0.5


@dataclass
class AblationSection:
    no_sequence_name: bool = False
    no_study_name: bool = False
    flat: bool = False
    long_report: bool = False
    no_patdis: bool = False


ABLATIONS = tuple(f.name.replace("_", "-") for f in dataclasses.fields(AblationSection))


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    cohort: CohortSection = field(default_factory=CohortSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    text: TextSection = field(default_factory=TextSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    head: HeadSection = field(default_factory=HeadSection)
    eval: EvalSection = field(default_factory=EvalSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    fairness: FairnessSection = field(default_factory=FairnessSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **sections: dict) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``replace(objective={"steps": 10})``."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k] = _merge(d[k], v, k)
            else:
                d[k] = v
        return from_dict(ExperimentConfig, d)


def _merge(base: dict, over: dict, where: str) -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {where}.{k}")
        out[k] = _merge(base[k], v, f"{where}.{k}") if isinstance(v, dict) and isinstance(base[k], dict) else v
    return out


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    data: Any = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    cfg = from_dict(ExperimentConfig, data or {})
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}")
    return cfg

"""Experiment configuration: one JSON document fully determines a run."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .anchoring import SubsegmentConfig
from .baselines import BASELINE_KINDS
from .mixsim import MixerConfig, ToyCorpusConfig
from .objectives import MODES, LossWeights
from .transducer import ModelConfig

OUTPUT_ROOT_ENV = "ANCHORASR_OUTPUT_ROOT"


@dataclass
class AnchoringConfig:
    encoder_bias: bool = False
    joiner_gating: bool = False
    subsegment: SubsegmentConfig = field(default_factory=SubsegmentConfig)

    @property
    def enabled(self) -> bool:
        return self.encoder_bias or self.joiner_gating


@dataclass
class ObjectiveConfig:
    mode: str = "NONE"
    weights: LossWeights = field(default_factory=LossWeights)
    expander_hidden: int = 64
    expander_dim: int = 128
    variance_epsilon: float = 1e-4
    fr_label_embed: int = 16
    fr_hidden: int = 32

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"objective mode must be one of {MODES}, got {self.mode!r}")
        self.weights.validate()
        if self.variance_epsilon <= 0:
            raise ValueError("variance_epsilon must be positive")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 500
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dev_subset: int = 64

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs/default"
    system: str = "baseline"
    baseline: str = "none"
    model: ModelConfig = field(default_factory=ModelConfig)
    anchoring: AnchoringConfig = field(default_factory=AnchoringConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    corpus: ToyCorpusConfig = field(default_factory=ToyCorpusConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32|float64, got {self.precision!r}")
        self.model.validate()
        self.objective.validate()
        self.optimizer.validate()
        self.corpus.validate()
        self.mixer.validate()
        self.anchoring.subsegment.validate()
        if self.baseline not in BASELINE_KINDS:
            raise ValueError(f"baseline must be one of {BASELINE_KINDS}, got {self.baseline!r}")
        if self.baseline != "none" and self.anchoring.enabled:
            raise ValueError("anchor-mean baselines and anchoring are mutually exclusive")
        if self.objective.mode != "NONE" and not self.anchoring.enabled:
            raise ValueError("auxiliary objectives need the anchoring path (bias or gating)")
        if self.corpus.vocab_size != self.model.vocab_size:
            raise ValueError("corpus and model vocab sizes must agree")
        if self.corpus.d_raw != self.model.d_raw:
            raise ValueError("corpus and model d_raw must agree")
        if self.corpus.frames_per_token[0] * len(self.corpus.wake_word) < self.model.stack_factor:
            raise ValueError("wake word too short to yield one stacked anchor frame")

    def resolve_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        p = Path(self.output_dir)
        if root and not p.is_absolute():
            return Path(root) / p
        return p


_TUPLE_FIELDS = {"wake_word", "body_len", "frames_per_token", "utterance_gain",
                 "token_gain", "snr_grid", "shift_grid"}

_NESTED_TYPES = {
    "ModelConfig": ModelConfig, "AnchoringConfig": AnchoringConfig,
    "ObjectiveConfig": ObjectiveConfig, "OptimizerConfig": OptimizerConfig,
    "ToyCorpusConfig": ToyCorpusConfig, "MixerConfig": MixerConfig,
    "SubsegmentConfig": SubsegmentConfig, "LossWeights": LossWeights,
}


def _nested_type(f) -> type | None:
    t = f.type
    name = t if isinstance(t, str) else getattr(t, "__name__", None)
    return _NESTED_TYPES.get(name)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        val = data[name]
        nested = _nested_type(f)
        if nested is not None:
            kwargs[name] = _from_dict(nested, val, f"{where}.{name}")
        elif name in _TUPLE_FIELDS and isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [tuples_to_lists(v) for v in obj]
        return obj

    return tuples_to_lists(d)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), sort_keys=True, indent=1) + "\n")

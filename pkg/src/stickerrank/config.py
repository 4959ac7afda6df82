"""Configuration dataclasses, JSON loading, and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

ABLATION_FLAGS = ("classify", "din", "fr", "fr2t", "upm", "tar")
MEMORY_VARIANTS = ("full", "average", "weighted", "most_selected")
FLOAT_WIDTHS = ("float64", "float32")


@dataclass
class ModelConfig:
    """Dimensions, wiring flags, and the memory-variant selector."""

    vocab_size: int = 0  # 0 = infer from the dataset vocabulary
    d: int = 100
    n_head: int = 2
    pos_dim: int = 8
    dropout: float = 0.1
    image_size: int = 128
    image_channels: int = 3
    p: int = 4
    conv_channels: tuple = (16, 32)
    max_utterances: int = 10
    max_words: int = 30
    max_history: int = 10
    n_candidates: int = 10
    n_emoji: int | None = None  # None = infer from the emoji label file
    share_context_encoder: bool = True
    share_sticker_encoder: bool = True
    share_memory_grus: bool = False
    float_width: str = "float64"
    ablation: tuple = ()
    memory_variant: str = "full"

    def validate(self):
        if self.d <= 0 or self.d % self.n_head:
            raise ConfigError(f"d={self.d} must be positive and divisible by n_head={self.n_head}")
        if self.image_size % 8:
            raise ConfigError(f"image_size={self.image_size} must be divisible by 8")
        final = self.image_size // 8
        if final < self.p or final % self.p:
            raise ConfigError(f"p={self.p} incompatible with image_size={self.image_size}")
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        for flag in self.ablation:
            if flag not in ABLATION_FLAGS:
                raise ConfigError(f"unknown ablation flag '{flag}' (choose from {ABLATION_FLAGS})")
        if "fr" in self.ablation and "fr2t" in self.ablation:
            raise ConfigError("ablations 'fr' (remove fusion RNN) and 'fr2t' (replace it) contradict")
        if self.memory_variant not in MEMORY_VARIANTS:
            raise ConfigError(f"unknown memory variant '{self.memory_variant}'")
        if self.float_width not in FLOAT_WIDTHS:
            raise ConfigError(f"float_width must be one of {FLOAT_WIDTHS}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout={self.dropout} out of range")
        if min(self.max_utterances, self.max_words, self.max_history, self.n_candidates) < 1:
            raise ConfigError("sequence limits must be >= 1")
        return self

    def ablated(self, flag):
        return flag in self.ablation


@dataclass
class TrainConfig:
    margin: float = 0.3
    lambda_cls: float = 1.0
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = 0
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    eval_every: int = 10  # epochs between train-set metric probes; 0 = never
    target_recall1: float | None = None  # early stop once train R@1 reaches this

    def validate(self, model=None):
        if self.margin <= 0:
            raise ConfigError(f"margin={self.margin} must be > 0")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("lr, batch_size, and max_epochs must be positive")
        if model is not None and not model.ablated("classify") and model.n_emoji is None:
            raise ConfigError("emoji classification enabled but n_emoji is not configured "
                              "(set model.n_emoji or ablate 'classify')")
        if model is not None and model.memory_variant == "most_selected":
            raise ConfigError("memory variant 'most_selected' is a scoring heuristic; it cannot be trained")
        return self


@dataclass
class SyntheticSpec:
    """Knobs for the procedural corpus generator."""

    n_samples: int = 64
    n_users: int = 4
    n_styles: int = 4
    vocab_size: int = 64
    stickers_per_style: int = 6
    image_size: int = 32
    channels: int = 1
    min_utterances: int = 2
    max_utterances: int = 4
    min_words: int = 3
    max_words: int = 8
    min_history: int = 2
    max_history: int = 6
    n_candidates: int = 10
    signal: float = 1.0  # probability the context tokens announce the true style
    noise: float = 0.05  # per-instance pixel jitter amplitude
    repeat_rate: float = 0.5  # chance a user re-picks their previous same-style sticker

    def validate(self):
        if self.n_styles < 2:
            raise ConfigError("need at least 2 sticker styles")
        if self.vocab_size < 2 + 2 * self.n_styles:
            raise ConfigError(f"vocab_size={self.vocab_size} too small for {self.n_styles} styles")
        if not (0.0 <= self.signal <= 1.0):
            raise ConfigError("signal must be in [0, 1]")
        if self.n_candidates < 2:
            raise ConfigError("need at least 2 candidates")
        if self.stickers_per_style * (self.n_styles - 1) < self.n_candidates - 1:
            raise ConfigError("sticker pool too small for the candidate count")
        return self


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self):
        self.model.validate()
        self.train.validate(self.model)
        self.synthetic.validate()
        return self

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["model"]["conv_channels"] = list(self.model.conv_channels)
        doc["model"]["ablation"] = sorted(self.model.ablation)
        return doc

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def _coerce(section, key, value, current):
    if key == "ablation":
        return parse_ablation(value)
    if key == "conv_channels":
        if isinstance(value, str):
            value = [int(v) for v in value.split(",")]
        return tuple(int(v) for v in value)
    if current is None or isinstance(value, type(current)):
        if key == "n_emoji" and value is not None:
            return int(value)
        if key == "target_recall1" and value is not None:
            return float(value)
        return value
    target = type(current)
    try:
        if target is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        return target(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}.{key}: cannot interpret {value!r} as {target.__name__}") from e


def _apply(config, section_name, mapping):
    section = getattr(config, section_name)
    known = {f.name for f in dataclasses.fields(section)}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{section_name}.{key}'")
        setattr(section, key, _coerce(section_name, key, value, getattr(section, key)))


def parse_ablation(value):
    """Accept 'DIN,UPM' style strings or lists; stored lowercase."""
    if isinstance(value, str):
        tokens = [t.strip() for t in value.split(",") if t.strip()]
    else:
        tokens = list(value)
    flags = tuple(sorted({t.lower() for t in tokens}))
    for f in flags:
        if f not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag '{f}' (choose from {ABLATION_FLAGS})")
    return flags


def load_config(path=None, overrides=None):
    """Defaults <- JSON file <- dotted-key overrides, then validate."""
    config = Config()
    if path is not None:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        for section_name in ("model", "train", "synthetic"):
            if section_name in doc:
                _apply(config, section_name, doc[section_name])
        unknown = set(doc) - {"model", "train", "synthetic"}
        if unknown:
            raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override '{dotted}' must look like section.key")
        section_name, key = dotted.split(".", 1)
        if section_name not in ("model", "train", "synthetic"):
            raise ConfigError(f"unknown config section '{section_name}'")
        _apply(config, section_name, {key: value})
    return config.validate()

"""Training configuration and its flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys and unparsable values raise :class:`ConfigError`.

Keys (desk-scale defaults):

    lr                   3e-4    peak learning rate (paper scale: 3e-5)
    batch_size           16      (paper scale: 32)
    beta                 0.95    twin momentum weight
    temperature          0.07    contrastive temperature
    label_smoothing      0.1
    weight_decay         0.01    AdamW decoupled decay
    cycle_epochs         4       cosine cycle length: base -> base/10 -> base
    halve_every          4       base halves every this many epochs
    early_stop_patience  4       epochs without BLEU-4 improvement
    evals_per_epoch      3
    num_beams            4
    max_epochs           20
    max_steps            0       0 = no step cap
    seed                 0
    ablation_mode        full_twin   baseline | fuser | fuser_translator | full_twin
    data                 ""      dataset file from ``gen-data``
    num_val              64      trailing samples held out for validation
    spec_augment         true
    aug_time_masks       2
    aug_feat_masks       2
    L M N                3 3 2   fusion layers, encoder layers, decoder layers
    D T                  64 8
    cfb_kernel           7
    cab_kernel           9
    sfeb_bottleneck      0       0 = round(D / 3)
    num_heads            4
    decoder_layers       2
    vocab_size           64
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

ABLATION_MODES = ("baseline", "fuser", "fuser_translator", "full_twin")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    beta: float = 0.95
    temperature: float = 0.07
    label_smoothing: float = 0.1
    weight_decay: float = 0.01
    cycle_epochs: int = 4
    halve_every: int = 4
    early_stop_patience: int = 4
    evals_per_epoch: int = 3
    num_beams: int = 4
    max_epochs: int = 20
    max_steps: int = 0
    seed: int = 0
    ablation_mode: str = "full_twin"
    data: str = ""
    num_val: int = 64
    spec_augment: bool = True
    aug_time_masks: int = 2
    aug_feat_masks: int = 2
    L: int = 3
    M: int = 3
    N: int = 2
    D: int = 64
    T: int = 8
    cfb_kernel: int = 7
    cab_kernel: int = 9
    sfeb_bottleneck: int = 0
    num_heads: int = 4
    decoder_layers: int = 2
    vocab_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}")
        positive = (
            "lr", "batch_size", "temperature", "cycle_epochs", "halve_every",
            "early_stop_patience", "evals_per_epoch", "num_beams", "max_epochs",
            "L", "M", "N", "D", "T", "cfb_kernel", "cab_kernel", "num_heads",
            "decoder_layers", "vocab_size",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("max_steps", "num_val", "sfeb_bottleneck", "weight_decay",
                     "aug_time_masks", "aug_feat_masks", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ConfigError("label_smoothing must lie in [0, 0.3]")
        if self.cfb_kernel % 2 == 0 or self.cab_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.D % self.num_heads:
            raise ConfigError("D must be divisible by num_heads")

    @property
    def twin(self) -> bool:
        return self.ablation_mode == "full_twin"

    @property
    def uses_fuser(self) -> bool:
        return self.ablation_mode != "baseline"

    @property
    def uses_translator(self) -> bool:
        return self.ablation_mode in ("fuser_translator", "full_twin")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        for k in changes:
            if k not in vals:
                raise ConfigError(f"unknown config key: {k}")
        vals.update(changes)
        return TrainConfig(**vals)


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip('"').strip("'")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    vals = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        vals[key] = _parse_value(raw, types[key], key)
    return TrainConfig(**vals)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))

"""Architecture and training configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

VARIANTS = ("sequential", "parallel")


@dataclass
class ModelConfig:
    variant: str = "parallel"
    channels: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    heads: List[int] = field(default_factory=lambda: [2, 4, 8, 16])
    window_size: int = 8
    shift_size: Optional[int] = None  # None -> window_size // 2
    dilation_rates: List[int] = field(default_factory=lambda: [6, 12, 18])
    n_classes: int = 3
    input_size: Tuple[int, int] = (224, 224)
    use_dfe: bool = True
    use_position_bias: bool = True
    ffn_ratio: int = 4
    cls_hidden: int = 256
    # conv widths of decoder levels 2, 3, 4; None -> [channels[1], channels[0], channels[0]]
    decoder_channels: Optional[List[int]] = None
    init_seed: int = 0

    def __post_init__(self):
        self.channels = list(self.channels)
        self.heads = list(self.heads)
        self.dilation_rates = list(self.dilation_rates)
        self.input_size = tuple(self.input_size)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.channels) != 4 or len(self.heads) != 4:
            raise ValueError("channels and heads need exactly four entries (one per level)")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"{h} heads do not divide {c} channels")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift {self.shift} must lie in [0, {self.window_size})")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input size {self.input_size} must be divisible by 16")
        if self.decoder_channels is None:
            self.decoder_channels = [self.channels[1], self.channels[0], self.channels[0]]
        self.decoder_channels = list(self.decoder_channels)
        if len(self.decoder_channels) != 3:
            raise ValueError("decoder_channels needs three entries (levels 2..4)")

    @property
    def shift(self) -> int:
        return self.window_size // 2 if self.shift_size is None else self.shift_size

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by gradient checks and smoke training."""
        base = dict(
            channels=[8, 16, 32, 64],
            heads=[1, 2, 4, 8],
            window_size=4,
            n_classes=2,
            input_size=(32, 32),
            cls_hidden=32,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    lr: float = 0.003
    epochs: int = 100
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    lambda_cls: float = 0.25
    lambda_seg: float = 1.0
    augment: bool = True
    checkpoint_dir: str = "runs/default"
    train_data: str = ""
    val_data: str = ""

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lambda_cls < 0 or self.lambda_seg < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

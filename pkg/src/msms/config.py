"""Model and training hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Tuple

# Frame geometry shared by every DSP routine.
SAMPLE_RATE = 16000
HOP_LENGTH = 192  # 12 ms
WIN_LENGTH = 768  # 48 ms
N_FFT = 1024
N_MEL = 80
HOP_SECONDS = HOP_LENGTH / SAMPLE_RATE


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the acoustic model."""

    phoneme_vocab_size: int = 16
    hidden_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 2
    conv_kernel: int = 9
    ffn_dim: int = 256
    variance_filter_dim: int = 64
    variance_kernel: int = 3
    dropout: float = 0.1
    n_mel: int = N_MEL
    n_speakers: int = 3
    n_styles: int = 3
    n_bins: int = 32
    bin_range: Tuple[float, float] = (-4.0, 4.0)
    max_frames: int = 2000
    max_input_length: int = 512

    def __post_init__(self):
        self.bin_range = tuple(float(v) for v in self.bin_range)
        self.validate()

    def validate(self) -> None:
        if self.hidden_dim % self.attention_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        low, high = self.bin_range
        if not low < high:
            raise ValueError(f"bin_range low {low} must be below high {high}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        for name in ("phoneme_vocab_size", "n_speakers", "n_styles", "n_mel",
                     "encoder_layers", "decoder_layers", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class TrainingSchedule:
    """Optimizer and schedule settings.

    Defaults mirror the published recipe except ``batch_size`` and
    ``total_steps``, which are sized for a CPU run.
    """

    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    total_steps: int = 2000
    weight_decay: float = 1e-6
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    checkpoint_every: int = 500
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainingSchedule":
        return cls(**json.loads(text))

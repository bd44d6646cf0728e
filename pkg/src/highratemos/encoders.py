"""Frame-level encoders and the learnable sampling-rate embedding.

Every encoder consumes raw samples exactly as stored: a 48 kHz waveform is fed
to a 16 kHz-style front end without resampling, so it yields about three times
as many frames as the same content at 16 kHz.
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np
import torch
from torch import nn

from .data import Waveform
from .errors import ConfigError, EncoderUnavailableError, TooShortError, ValidationError
from .features import frame_count

# Knuth's MMIX constants
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1

RATE_EMBED_INIT = 0.1


@runtime_checkable
class FrameEncoder(Protocol):
    output_dim: int
    frame_hop_samples: int
    receptive_window_samples: int

    def encode(self, wave: Waveform) -> np.ndarray: ...

    def describe(self) -> dict: ...


def lcg_uniform(seed: int, count: int, low: float, high: float) -> np.ndarray:
    """`count` values from a 64-bit LCG, top 53 bits mapped to [low, high).

    state_{i+1} = (6364136223846793005 * state_i + 1442695040888963407) mod 2**64,
    starting from state_0 = seed; value_i = low + (high - low) * (state_{i+1} >> 11) / 2**53.
    """
    out = np.empty(count, dtype=np.float64)
    state = seed & _MASK64
    for i in range(count):
        state = (LCG_MULTIPLIER * state + LCG_INCREMENT) & _MASK64
        out[i] = (state >> 11) / float(1 << 53)
    return low + (high - low) * out


class ToyEncoder:
    """Deterministic stand-in for a 16 kHz SSL front end.

    Each 400-sample frame (hop 320) is projected through a fixed seeded
    [400 x dim] matrix and squashed with tanh.
    """

    def __init__(self, dim: int = 64, seed: int = 0, window: int = 400, hop: int = 320):
        self.output_dim = dim
        self.seed = seed
        self.receptive_window_samples = window
        self.frame_hop_samples = hop
        self.projection = lcg_uniform(seed, window * dim, -0.05, 0.05).reshape(window, dim)

    def describe(self) -> dict:
        return {"kind": "toy", "dim": self.output_dim, "seed": self.seed,
                "window": self.receptive_window_samples, "hop": self.frame_hop_samples}

    def encode(self, wave: Waveform) -> np.ndarray:
        x = np.asarray(wave.samples, dtype=np.float64)
        win, hop = self.receptive_window_samples, self.frame_hop_samples
        n = frame_count(len(x), win, hop)
        idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
        return np.tanh(x[idx] @ self.projection)


class PretrainedEncoder:
    """Adapter over a locally stored Hugging Face wav2vec2-style checkpoint.

    Missing weights or a missing library raise EncoderUnavailableError; there is
    no silent fallback to the toy encoder.
    """

    frame_hop_samples = 320
    receptive_window_samples = 400

    def __init__(self, model_path: str, freeze: bool = True):
        if not freeze:
            raise ConfigError("fine-tuning the pretrained encoder is not supported; set encoder.freeze=true")
        self.model_path = str(model_path)
        try:
            from transformers import AutoModel
        except ImportError as exc:
            raise EncoderUnavailableError(f"transformers is not installed: {exc}") from None
        try:
            self.model = AutoModel.from_pretrained(self.model_path, local_files_only=True)
        except (OSError, ValueError) as exc:
            raise EncoderUnavailableError(f"cannot load encoder from {self.model_path!r}: {exc}") from None
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.output_dim = int(self.model.config.hidden_size)

    def describe(self) -> dict:
        return {"kind": "pretrained", "path": self.model_path, "dim": self.output_dim}

    def encode(self, wave: Waveform) -> np.ndarray:
        if len(wave.samples) < self.receptive_window_samples:
            raise TooShortError(f"{len(wave.samples)} samples is shorter than the encoder window")
        x = torch.as_tensor(np.asarray(wave.samples, dtype=np.float32))[None, :]
        with torch.no_grad():
            hidden = self.model(x).last_hidden_state[0]
        return hidden.double().numpy()


def make_encoder(kind: str = "toy", dim: int = 64, seed: int = 0, path: str = "", freeze: bool = True):
    if kind == "toy":
        return ToyEncoder(dim=dim, seed=seed)
    if kind == "pretrained":
        if not path:
            raise EncoderUnavailableError("encoder.kind=pretrained requires encoder.path")
        return PretrainedEncoder(path, freeze=freeze)
    raise ConfigError(f"unknown encoder kind {kind!r}")


class RateEmbedding(nn.Module):
    """One trainable vector per supported rate (16, 24, 48 kHz).

    Initialised as -0.1 + 0.2 * torch.rand((3, dim), generator=Generator().manual_seed(seed)).
    """

    def __init__(self, dim: int = 16, seed: int = 0, dtype=torch.float32):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        init = -RATE_EMBED_INIT + 2 * RATE_EMBED_INIT * torch.rand((3, dim), generator=g, dtype=torch.float64)
        self.vectors = nn.Parameter(init.to(dtype))

    def forward(self, rate_id: int) -> torch.Tensor:
        if rate_id not in (0, 1, 2):
            raise ValidationError(f"rate_id {rate_id} not in {{0, 1, 2}}")
        return self.vectors[rate_id]

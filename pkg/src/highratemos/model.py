"""HighRateMOS score models (variants M1, M2, M3) with per-component ablation toggles."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoders import RateEmbedding
from .errors import CheckpointError, ConfigError, ValidationError
from .features import FeatureBundle

VARIANTS = ("M1", "M2", "M3")
COMPONENTS = ("ssl", "sr_emb", "mel", "multi_cnn", "mfcc", "cross_attn", "blstm")
CNN_KERNELS = (3, 5, 7)
CHECKPOINT_FORMAT = "highratemos-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Variant plus toggles. Toggles can only remove components the variant has:
    M1 never has cross-attention or MFCC, M2 never has MFCC.
    """

    variant: str = "M1"
    ssl: bool = True
    sr_emb: bool = True
    mel: bool = True
    multi_cnn: bool = True
    mfcc: bool = False
    cross_attn: bool = False
    blstm: bool = True
    d_enc: int = 64
    d_sr: int = 16
    n_mels: int = 80
    n_mfcc: int = 20
    cnn_channels: int = 32
    attn_heads: int = 4
    attn_dim: int = 64
    blstm_hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "M1" and (self.cross_attn or self.mfcc):
            raise ConfigError("M1 has neither cross-attention nor MFCC")
        if self.variant == "M2" and self.mfcc:
            raise ConfigError("M2 has no MFCC stream")
        if self.multi_cnn and not self.mel:
            raise ConfigError("multi_cnn needs the mel stream (disable both to drop spectral maps)")
        if not (self.ssl or self.mel or self.mfcc):
            raise ConfigError("at least one of ssl, mel, mfcc must be enabled")
        if self.attn_dim % self.attn_heads:
            raise ConfigError("attn_dim must be divisible by attn_heads")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        defaults = {"variant": variant, "cross_attn": variant in ("M2", "M3"), "mfcc": variant == "M3"}
        defaults.update(overrides)
        return cls(**defaults)

    def without(self, component: str) -> "ModelConfig":
        """Ablation transform. Removing mel also removes the multi-scale CNN it feeds."""
        if component not in COMPONENTS:
            raise ConfigError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
        changes = {component: False}
        if component == "mel":
            changes["multi_cnn"] = False
        return dataclasses.replace(self, **changes)

    @property
    def d_spectral(self) -> int:
        return len(CNN_KERNELS) * self.cnn_channels if self.mel else 0

    def query_width(self) -> int:
        return self.d_enc if self.ssl else self.d_spectral if self.mel else self.n_mfcc

    def key_width(self) -> int:
        return self.d_spectral if self.mel else self.n_mfcc if self.mfcc else self.d_enc

    @property
    def d_fused(self) -> int:
        return (self.d_enc * self.ssl + self.d_sr * self.sr_emb + self.d_spectral
                + self.attn_dim * self.cross_attn + self.n_mfcc * self.mfcc)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    rate table 3*D_sr; CNN branch k: C*k*k + C; mel projection (no CNN): F*3C + 3C;
    cross-attention: (Dq + 1)*d + (Dkv + 1)*d + 4*d*d + 4*d;
    BLSTM: 2 * (4H*(D_in + H) + 8H); head: D_pool + 1.
    """
    total = 0
    if cfg.sr_emb:
        total += 3 * cfg.d_sr
    if cfg.mel and cfg.multi_cnn:
        total += sum(cfg.cnn_channels * k * k + cfg.cnn_channels for k in CNN_KERNELS)
    elif cfg.mel:
        total += cfg.n_mels * cfg.d_spectral + cfg.d_spectral
    if cfg.cross_attn:
        d = cfg.attn_dim
        total += (cfg.query_width() + 1) * d + (cfg.key_width() + 1) * d + 4 * d * d + 4 * d
    h = cfg.blstm_hidden
    if cfg.blstm:
        total += 2 * (4 * h * (cfg.d_fused + h) + 8 * h)
        pooled = 2 * h
    else:
        pooled = cfg.d_fused
    return total + pooled + 1


class MultiScaleCNN(nn.Module):
    """Parallel same-padded 2-D convolutions over (time, mel), ReLU, mean over the mel axis."""

    def __init__(self, channels: int = 32, kernels=CNN_KERNELS):
        super().__init__()
        self.branches = nn.ModuleList(nn.Conv2d(1, channels, k, padding=k // 2) for k in kernels)
        for conv in self.branches:
            nn.init.zeros_(conv.bias)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: [B, T, F] -> [B, T, len(kernels) * channels]
        x = mel.unsqueeze(1)
        maps = [torch.relu(conv(x)).mean(dim=-1) for conv in self.branches]
        return torch.cat(maps, dim=1).transpose(1, 2)


class CrossAttention(nn.Module):
    """Queries from one stream attend over another; residual on the projected queries."""

    def __init__(self, query_dim: int, key_dim: int, dim: int = 64, heads: int = 4):
        super().__init__()
        self.query_proj = nn.Linear(query_dim, dim)
        self.key_proj = nn.Linear(key_dim, dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.last_weights: torch.Tensor | None = None

    def forward(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        q = self.query_proj(queries)
        kv = self.key_proj(keys)
        out, weights = self.attn(q, kv, kv, need_weights=True)
        self.last_weights = weights.detach()
        return q + out


class ScoreModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.rate_embedding = RateEmbedding(cfg.d_sr, seed=seed) if cfg.sr_emb else None
            self.cnn = None
            self.mel_proj = None
            if cfg.mel and cfg.multi_cnn:
                self.cnn = MultiScaleCNN(cfg.cnn_channels)
            elif cfg.mel:
                self.mel_proj = nn.Linear(cfg.n_mels, cfg.d_spectral)
            self.cross_attn = (CrossAttention(cfg.query_width(), cfg.key_width(), cfg.attn_dim, cfg.attn_heads)
                               if cfg.cross_attn else None)
            self.blstm = (nn.LSTM(cfg.d_fused, cfg.blstm_hidden, batch_first=True, bidirectional=True)
                          if cfg.blstm else None)
            self.head = nn.Linear(2 * cfg.blstm_hidden if cfg.blstm else cfg.d_fused, 1)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def decay_exempt(self) -> set[str]:
        """Parameter names excluded from weight decay: biases and the rate table."""
        return {name for name, p in self.named_parameters()
                if name.startswith("rate_embedding.") or "bias" in name.split(".")[-1]}

    def fuse(self, enc, mel, mfcc, rate_ids) -> torch.Tensor:
        """Channel-concatenate the enabled streams: [B, T, d_fused]."""
        cfg = self.cfg
        batch, frames = enc.shape[0], enc.shape[1]
        streams = []
        if cfg.ssl:
            streams.append(enc)
        if cfg.sr_emb:
            vec = self.rate_embedding.vectors[rate_ids]
            streams.append(vec[:, None, :].expand(batch, frames, cfg.d_sr))
        spectral = None
        if self.cnn is not None:
            spectral = self.cnn(mel)
        elif self.mel_proj is not None:
            spectral = self.mel_proj(mel)
        if spectral is not None:
            streams.append(spectral)
        if self.cross_attn is not None:
            query = enc if cfg.ssl else spectral if spectral is not None else mfcc
            key = spectral if spectral is not None else mfcc if cfg.mfcc else enc
            streams.append(self.cross_attn(query, key))
        if cfg.mfcc:
            streams.append(mfcc)
        return torch.cat(streams, dim=-1)

    def forward(self, enc, mel, mfcc, rate_ids) -> torch.Tensor:
        """Batched scores [B] for equal-length inputs enc [B,T,D_enc], mel [B,T,F], mfcc [B,T,C]."""
        if enc.shape[1] == 0:
            raise ValidationError("cannot score an utterance with zero frames")
        h = self.fuse(enc, mel, mfcc, rate_ids)
        if self.blstm is not None:
            h, _ = self.blstm(h)
        return self.head(h.mean(dim=1)).squeeze(-1)

    def _tensors(self, bundles: list[FeatureBundle]):
        dt = self.dtype
        enc = torch.as_tensor(np.stack([b.encoder_frames for b in bundles]), dtype=dt)
        mel = torch.as_tensor(np.stack([b.mel_aligned for b in bundles]), dtype=dt)
        mfcc = torch.as_tensor(np.stack([b.mfcc_aligned for b in bundles]), dtype=dt)
        rates = torch.as_tensor([b.rate_id for b in bundles], dtype=torch.long)
        return enc, mel, mfcc, rates

    def score_bundles(self, bundles: list[FeatureBundle]) -> torch.Tensor:
        """Scores in input order; utterances are batched together only when their T matches."""
        groups: dict[int, list[int]] = {}
        for i, b in enumerate(bundles):
            groups.setdefault(b.n_frames, []).append(i)
        out = [None] * len(bundles)
        for idx in groups.values():
            scores = self(*self._tensors([bundles[i] for i in idx]))
            for k, i in enumerate(idx):
                out[i] = scores[k]
        if not out:
            return torch.zeros(0, dtype=self.dtype)
        return torch.stack(out)

    def score(self, bundle: FeatureBundle) -> float:
        with torch.no_grad():
            return float(self.score_bundles([bundle])[0])


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict[str, np.ndarray]
    seed: int = 0
    step: int = 0
    feature_hash: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ScoreModel, seed=0, step=0, feature_hash="", meta=None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.cfg, state, seed, step, feature_hash, dict(meta or {}))

    def build_model(self) -> ScoreModel:
        dtype = torch.float64 if next(iter(self.state.values())).dtype == np.float64 else torch.float32
        model = ScoreModel(self.model_config, seed=self.seed, dtype=dtype)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in self.state.items()}
        if expected != got:
            diff = sorted(set(expected.items()) ^ set(got.items()))
            raise CheckpointError(f"parameter layout does not match model config: {diff[:4]}")
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, path) -> None:
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": dataclasses.asdict(self.model_config),
            "seed": self.seed,
            "step": self.step,
            "feature_hash": self.feature_hash,
            "meta": self.meta,
            "shapes": {k: list(v.shape) for k, v in self.state.items()},
        }
        arrays = {f"param/{k}": v for k, v in self.state.items()}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            z = np.load(path)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from None
        with z:
            if "header" not in z.files:
                raise CheckpointError(f"{path}: missing header")
            header = json.loads(str(z["header"]))
            if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')!r} "
                                      f"v{header.get('version')}")
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        for name, shape in header["shapes"].items():
            if name not in state or list(state[name].shape) != shape:
                raise CheckpointError(f"{path}: array {name!r} does not match its shape header {shape}")
        try:
            cfg = ModelConfig(**header["model_config"])
        except (TypeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: invalid model config: {exc}") from None
        ckpt = cls(cfg, state, header["seed"], header["step"], header["feature_hash"], header.get("meta", {}))
        ckpt.build_model()  # fail loudly on config/shape mismatch
        return ckpt

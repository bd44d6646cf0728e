"""Native-rate log-Mel / MFCC extraction and alignment onto the encoder frame grid."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .data import SUPPORTED_RATES, UtteranceRecord, Waveform, load_waveform
from .errors import ConfigError, TooShortError, ValidationError

CACHE_VERSION = 1
RATE_IDS = {rate: i for i, rate in enumerate(SUPPORTED_RATES)}


@dataclass(frozen=True)
class FeatureConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    n_mfcc: int = 20
    eps: float = 1e-10

    def __post_init__(self):
        if self.n_mfcc > self.n_mels:
            raise ConfigError(f"n_mfcc={self.n_mfcc} exceeds n_mels={self.n_mels}")
        if self.win_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("window and hop must be positive")

    def window_samples(self, rate: int) -> int:
        return int(round(rate * self.win_ms / 1000.0))

    def hop_samples(self, rate: int) -> int:
        return int(round(rate * self.hop_ms / 1000.0))

    def n_fft(self, rate: int) -> int:
        return 1 << (self.window_samples(rate) - 1).bit_length()


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [T_mel, F_mel], log power
    frame_hop_s: float
    sample_rate: int


@dataclass(frozen=True)
class MfccFrames:
    frames: np.ndarray  # [T_mel, C]

    @property
    def n_coeffs(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FeatureBundle:
    encoder_frames: np.ndarray
    mel_aligned: np.ndarray
    mfcc_aligned: np.ndarray
    rate_id: int

    def __post_init__(self):
        t = self.encoder_frames.shape[0]
        if t < 1 or self.mel_aligned.shape[0] != t or self.mfcc_aligned.shape[0] != t:
            raise ValidationError("feature streams must share a leading dimension T >= 1")
        if self.rate_id not in (0, 1, 2):
            raise ValidationError(f"rate_id {self.rate_id} not in {{0, 1, 2}}")

    @property
    def n_frames(self) -> int:
        return self.encoder_frames.shape[0]


def rate_id(sample_rate: int) -> int:
    try:
        return RATE_IDS[sample_rate]
    except KeyError:
        raise ValidationError(f"unsupported sample rate {sample_rate}") from None


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        raise TooShortError(f"{n_samples} samples is shorter than one {window}-sample window")
    return 1 + (n_samples - window) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """n_mels + 2 edge frequencies (Hz), equally spaced on the mel scale from 0 to Nyquist."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters with unit peak, shape [n_mels, n_fft // 2 + 1]."""
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_spectrogram(wave: Waveform, cfg: FeatureConfig = FeatureConfig()) -> MelSpectrogram:
    rate = wave.sample_rate
    win, hop, n_fft = cfg.window_samples(rate), cfg.hop_samples(rate), cfg.n_fft(rate)
    n_frames = frame_count(len(wave.samples), win, hop)
    x = np.asarray(wave.samples, dtype=np.float64)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * _hann(win), n=n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(cfg.n_mels, n_fft, rate).T
    return MelSpectrogram(np.log(mel + cfg.eps), hop / rate, rate)


def mfcc(mel: MelSpectrogram, n_coeffs: int = 20) -> MfccFrames:
    n_mels = mel.frames.shape[1]
    if n_coeffs > n_mels:
        raise ConfigError(f"requested {n_coeffs} MFCCs from {n_mels} mel bands")
    coeffs = dct(mel.frames, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    return MfccFrames(coeffs)


def align_to(frames: np.ndarray, target_len: int) -> np.ndarray:
    """Linearly resample rows onto target_len evenly spaced positions; endpoints kept exactly."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValidationError("align_to needs a non-empty [T, D] matrix")
    if target_len < 1:
        raise ValidationError("target_len must be >= 1")
    n = frames.shape[0]
    if target_len == n:
        return frames.copy()
    if n == 1 or target_len == 1:
        return np.repeat(frames[:1], target_len, axis=0)
    pos = np.arange(target_len) * (n - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo)[:, None]
    return (1.0 - frac) * frames[lo] + frac * frames[hi]


def build_bundle(wave: Waveform, encoder, cfg: FeatureConfig = FeatureConfig()) -> FeatureBundle:
    enc = np.asarray(encoder.encode(wave), dtype=np.float64)
    mel = mel_spectrogram(wave, cfg)
    cep = mfcc(mel, cfg.n_mfcc)
    t = enc.shape[0]
    return FeatureBundle(enc, align_to(mel.frames, t), align_to(cep.frames, t), rate_id(wave.sample_rate))


def config_hash(cfg: FeatureConfig, encoder) -> str:
    payload = {"features": asdict(cfg), "encoder": encoder.describe()}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_bundle(path, bundle: FeatureBundle, cfg_hash: str) -> None:
    header = json.dumps({"version": CACHE_VERSION, "config_hash": cfg_hash})
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(header), encoder_frames=bundle.encoder_frames,
                 mel_aligned=bundle.mel_aligned, mfcc_aligned=bundle.mfcc_aligned,
                 rate_id=np.array(bundle.rate_id))


def load_bundle(path, cfg_hash: str) -> FeatureBundle | None:
    """Return the cached bundle, or None when absent, stale or written by another version."""
    try:
        with np.load(path) as z:
            header = json.loads(str(z["header"]))
            if header.get("version") != CACHE_VERSION or header.get("config_hash") != cfg_hash:
                return None
            return FeatureBundle(z["encoder_frames"], z["mel_aligned"], z["mfcc_aligned"], int(z["rate_id"]))
    except (OSError, KeyError, ValueError):
        return None


class FeatureExtractor:
    """Feature front end for records, with an optional on-disk cache.

    The cache directory defaults to $HRM_CACHE_DIR when set.
    """

    def __init__(self, cfg: FeatureConfig, encoder, cache_dir=None):
        self.cfg = cfg
        self.encoder = encoder
        if cache_dir is None:
            cache_dir = os.environ.get("HRM_CACHE_DIR") or None
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.config_hash = config_hash(cfg, encoder)
        self._memo: dict[tuple[str, str], FeatureBundle] = {}

    def _cache_path(self, record: UtteranceRecord) -> Path:
        key = hashlib.sha256(f"{record.utterance_id}\0{record.audio_path}".encode()).hexdigest()[:20]
        return self.cache_dir / self.config_hash / f"{key}.npz"

    def bundle(self, record: UtteranceRecord) -> FeatureBundle:
        memo_key = (record.utterance_id, record.audio_path)
        if memo_key in self._memo:
            return self._memo[memo_key]
        bundle = None
        if self.cache_dir is not None:
            path = self._cache_path(record)
            bundle = load_bundle(path, self.config_hash)
        if bundle is None:
            wave = load_waveform(record.audio_path)
            if wave.sample_rate != record.sample_rate:
                raise ValidationError(
                    f"{record.utterance_id}: manifest rate {record.sample_rate} "
                    f"!= container rate {wave.sample_rate}"
                )
            bundle = build_bundle(wave, self.encoder, self.cfg)
            if self.cache_dir is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_bundle(path, bundle, self.config_hash)
        self._memo[memo_key] = bundle
        return bundle

    def bundles(self, records) -> list[FeatureBundle]:
        return [self.bundle(r) for r in records]

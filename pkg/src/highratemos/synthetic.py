"""Planted-feature corpus for smoke tests and acceptance runs.

Each system has a quality level q; an utterance is a harmonic tone plus white
noise whose level falls as q rises, and its MOS is exactly 1 + 4q.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import SUPPORTED_RATES, UtteranceRecord, write_manifest, write_waveform


def quality_levels(n_systems: int, per_system: int, rng: np.random.Generator, jitter: float = 0.04):
    base = (np.arange(n_systems) + 0.5) / n_systems
    q = base[:, None] + rng.uniform(-jitter, jitter, size=(n_systems, per_system))
    return np.clip(q, 0.0, 1.0)


def render(q: float, rate: int, duration: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(int(round(duration * rate))) / rate
    f0 = rng.uniform(100.0, 250.0)
    tone = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
               for h in range(1, int(4000 // f0) + 1))
    tone *= 0.5 / np.max(np.abs(tone))
    noise = rng.normal(0.0, 0.2 * (1.0 - q) + 0.005, size=t.size)
    return np.clip(tone + noise, -1.0, 1.0)


def make_synthetic(out_dir, n_systems: int = 6, per_system: int = 10, seed: int = 0,
                   duration: float = 0.5, prefix: str = "utt", manifest_name: str = "manifest.csv"):
    """Write WAVs plus a manifest; returns (manifest_path, records)."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    q = quality_levels(n_systems, per_system, rng)
    records = []
    for s in range(n_systems):
        for u in range(per_system):
            rate = SUPPORTED_RATES[(s + u) % len(SUPPORTED_RATES)]
            uid = f"{prefix}{s:02d}_{u:03d}"
            path = out / "wav" / f"{uid}.wav"
            write_waveform(path, render(q[s, u], rate, duration, rng), rate)
            mos = float(np.round(1.0 + 4.0 * q[s, u], 6))
            records.append(UtteranceRecord(uid, f"wav/{uid}.wav", f"sys{s:02d}", mos, rate))
    manifest = out / manifest_name
    write_manifest(records, manifest)
    return manifest, records

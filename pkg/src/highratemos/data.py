"""Manifest parsing, native-rate WAV ingestion, fold assignment and prediction files."""
from __future__ import annotations

import csv
import dataclasses
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import SchemaError, UnsupportedFormatError, ValidationError

SUPPORTED_RATES = (16000, 24000, 48000)
MANIFEST_COLUMNS = ("utterance_id", "audio_path", "system_id", "mos", "sample_rate")
PREDICTION_HEADER = ("utterance_id", "score", "system_id")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    audio_path: str
    system_id: str
    mos: float
    sample_rate: int
    fold: int | None = None

    def __post_init__(self):
        if not 1.0 <= self.mos <= 5.0:
            raise ValidationError(f"{self.utterance_id}: mos {self.mos} outside [1, 5]")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValidationError(
                f"{self.utterance_id}: unsupported sample_rate {self.sample_rate}"
            )


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValidationError("empty waveform")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class PredictionSet:
    """Scores keyed by utterance id, plus the system each utterance belongs to."""

    entries: dict[str, float] = field(default_factory=dict)
    system_of: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return list(self.entries)

    @classmethod
    def from_records(cls, records: Iterable[UtteranceRecord], scores) -> "PredictionSet":
        records = list(records)
        return cls(
            {r.utterance_id: float(s) for r, s in zip(records, scores, strict=True)},
            {r.utterance_id: r.system_id for r in records},
        )


def _parse_row(row: dict, lineno: int, base: Path) -> UtteranceRecord:
    uid = row["utterance_id"].strip()
    try:
        mos = float(row["mos"])
        rate = int(row["sample_rate"])
    except ValueError as exc:
        raise ValidationError(f"row {lineno}: {exc}") from None
    if not 1.0 <= mos <= 5.0:
        raise ValidationError(f"row {lineno}: mos {mos} outside [1, 5]")
    if rate not in SUPPORTED_RATES:
        raise ValidationError(f"row {lineno}: unsupported sample_rate {rate}")
    fold_txt = (row.get("fold") or "").strip()
    fold = None
    if fold_txt:
        fold = int(fold_txt)
        if not 0 <= fold <= 4:
            raise ValidationError(f"row {lineno}: fold {fold} outside [0, 4]")
    audio = Path(row["audio_path"].strip())
    if not audio.is_absolute():
        audio = base / audio
    return UtteranceRecord(uid, str(audio), row["system_id"].strip(), mos, rate, fold)


def load_manifest(path) -> list[UtteranceRecord]:
    """Read a manifest CSV; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column '{col}'")
        records = []
        seen = set()
        # line 1 is the header
        for lineno, row in enumerate(reader, start=2):
            rec = _parse_row(row, lineno, path.parent)
            if rec.utterance_id in seen:
                raise ValidationError(f"row {lineno}: duplicate utterance_id {rec.utterance_id}")
            seen.add(rec.utterance_id)
            records.append(rec)
    return records


def write_manifest(records: Iterable[UtteranceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS + ("fold",))
        for r in records:
            w.writerow([r.utterance_id, r.audio_path, r.system_id, repr(r.mos), r.sample_rate,
                        "" if r.fold is None else r.fold])


def load_waveform(path) -> Waveform:
    """Load mono 16-bit PCM audio at its container rate. Never resamples."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from None
    except EOFError:
        raise UnsupportedFormatError(f"{path}: truncated RIFF container") from None
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    if rate not in SUPPORTED_RATES:
        raise ValidationError(f"{path}: unsupported sample rate {rate}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_waveform(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def kfold_split(records: list[UtteranceRecord], k: int = 5, seed: int = 0) -> list[UtteranceRecord]:
    """Assign folds, keeping each system inside one fold when there are at least k systems.

    The assignment depends only on the set of ids, k and seed, not on input order.
    Grouped folds are balanced greedily by record count; the ungrouped fallback
    yields fold sizes that differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(records) < k:
        raise ValueError(f"need at least k={k} records, got {len(records)}")
    rng = np.random.default_rng(seed)
    by_system: dict[str, list[str]] = {}
    for r in sorted(records, key=lambda r: r.utterance_id):
        by_system.setdefault(r.system_id, []).append(r.utterance_id)
    fold_of: dict[str, int] = {}
    if len(by_system) >= k:
        systems = sorted(by_system)
        systems = [systems[i] for i in rng.permutation(len(systems))]
        # stable: equal-size systems keep their shuffled order
        systems.sort(key=lambda s: -len(by_system[s]))
        load = [0] * k
        for s in systems:
            f = min(range(k), key=lambda i: (load[i], i))
            load[f] += len(by_system[s])
            for uid in by_system[s]:
                fold_of[uid] = f
    else:
        warnings.warn(
            f"only {len(by_system)} systems for k={k}; falling back to ungrouped split",
            stacklevel=2,
        )
        ids = sorted(r.utterance_id for r in records)
        for pos, i in enumerate(rng.permutation(len(ids))):
            fold_of[ids[i]] = pos % k
    return [dataclasses.replace(r, fold=fold_of[r.utterance_id]) for r in records]


def write_predictions(preds: PredictionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(PREDICTION_HEADER) + "\n")
        for uid, score in preds.entries.items():
            fh.write(f"{uid}\t{score:.9f}\t{preds.system_of.get(uid, '')}\n")


def read_predictions(path) -> PredictionSet:
    entries: dict[str, float] = {}
    system_of: dict[str, str] = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("\t")[:2] != ["utterance_id", "score"]:
        raise SchemaError(f"{path}: expected header 'utterance_id<TAB>score[<TAB>system_id]'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        uid = parts[0]
        if uid in entries:
            raise ValidationError(f"{path}:{lineno}: duplicate utterance_id {uid}")
        entries[uid] = float(parts[1])
        system_of[uid] = parts[2] if len(parts) > 2 else ""
    return PredictionSet(entries, system_of)

"""LJSpeech-layout corpus ingestion, seeded splits and training-pair streams."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import NORMALIZED, AudioClip, DSPError, MelSpectrogram, fix_length, normalize
from .masking import GapSpec, apply_gap, make_gap_spec

log = logging.getLogger(__name__)


class CorpusError(RuntimeError):
    pass


class LeakageError(CorpusError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    wav_path: Path
    duration_s: float


@dataclass
class CorpusIndex:
    root: Path
    records: list[ClipRecord]
    warnings: int = 0
    missing: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self):
        return {r.clip_id: r for r in self.records}


def ids_hash(ids):
    """Order-independent digest of a set of clip ids."""
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


@dataclass
class CorpusSplit:
    train_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise CorpusError("train and test splits overlap")

    @property
    def subset_hash(self):
        return ids_hash(self.train_ids + self.test_ids)

    @property
    def train_hash(self):
        return ids_hash(self.train_ids)

    def save(self, path):
        payload = {
            "seed": self.seed,
            "subset_hash": self.subset_hash,
            "train_hash": self.train_hash,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        split = cls(payload["train_ids"], payload["test_ids"], payload["seed"])
        if split.subset_hash != payload["subset_hash"]:
            raise CorpusError(f"{path}: subset hash does not match its id lists")
        return split


def _wav_duration(path):
    with wave.open(str(path), "rb") as w:
        return w.getnframes() / w.getframerate()


def ingest_corpus(root) -> CorpusIndex:
    """Index ``metadata.csv`` rows whose ``wavs/<id>.wav`` exists."""
    root = Path(root)
    meta = root / "metadata.csv"
    if not meta.is_file():
        raise CorpusError(f"missing metadata file: {meta}")
    records, missing = [], []
    seen = set()
    with meta.open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter="|", quoting=csv.QUOTE_NONE):
            if not row or not row[0].strip():
                continue
            clip_id = row[0].strip()
            if clip_id in seen:
                continue
            seen.add(clip_id)
            path = root / "wavs" / f"{clip_id}.wav"
            try:
                duration = _wav_duration(path)
            except (FileNotFoundError, wave.Error, EOFError):
                missing.append(clip_id)
                continue
            if duration <= 0:
                missing.append(clip_id)
                continue
            records.append(ClipRecord(clip_id, path, duration))
    if missing:
        log.warning("%d metadata rows without a usable wav file", len(missing))
    records.sort(key=lambda r: r.clip_id)
    return CorpusIndex(root, records, len(missing), missing)


def split_corpus(index, subset_size=1300, n_train=1000, seed=0) -> CorpusSplit:
    records = list(index)
    if subset_size > len(records):
        raise CorpusError(f"subset of {subset_size} requested from {len(records)} clips")
    if not 0 <= n_train < subset_size:
        raise CorpusError("n_train must be smaller than subset_size")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(records), size=subset_size, replace=False)
    ids = [records[i].clip_id for i in chosen]
    return CorpusSplit(ids[:n_train], ids[n_train:], seed)


def load_wav(path) -> AudioClip:
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max + 1)
    return AudioClip(data.astype(np.float64), rate)


def write_wav(path, clip: AudioClip):
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767).astype("<i2")
    wavfile.write(path, clip.sample_rate, pcm)


@dataclass(frozen=True)
class TrainingPair:
    clip_id: str
    source: np.ndarray
    target: np.ndarray
    gap: GapSpec


class PairStream:
    """Iterable of :class:`TrainingPair` built on demand from log-mels.

    ``load`` maps a clip id to its log-mel; clips it rejects with a
    ``DSPError`` (too short, all silent) are skipped and counted in
    ``skipped``. ``gap`` is a fixed packet count or ``"variative"``; in
    variative mode each pair draws 1..8 packets from a generator seeded by
    ``seed``, so reruns reproduce the same sizes.
    """

    def __init__(self, clip_ids, stats, gap, load, *, train_ids, seed=0, n_frames=256):
        if stats.train_split_hash != ids_hash(train_ids):
            raise LeakageError("normalization stats were not computed on this training split")
        self.clip_ids = list(clip_ids)
        self.stats = stats
        self.gap = gap
        self.load = load
        self.seed = seed
        self.n_frames = n_frames
        self.skipped = 0

    def _gap_for(self, rng):
        if self.gap == "variative":
            return make_gap_spec("random", rng, self.n_frames)
        if isinstance(self.gap, GapSpec):
            return self.gap
        return make_gap_spec(int(self.gap), total_frames=self.n_frames)

    def __iter__(self):
        rng = np.random.default_rng(self.seed)
        self.skipped = 0
        for clip_id in self.clip_ids:
            try:
                mel = self.load(clip_id)
            except DSPError as exc:
                self.skipped += 1
                log.warning("skipping %s: %s", clip_id, exc)
                continue
            target = mel if mel.state == NORMALIZED else normalize(mel, self.stats)
            target = fix_length(target, self.n_frames)
            gap = self._gap_for(rng)
            source = apply_gap(target, gap)
            yield TrainingPair(clip_id, source.values.astype(np.float32), target.values.astype(np.float32), gap)


def make_pairs(clip_ids, stats, gap, load, *, train_ids, seed=0, n_frames=256) -> PairStream:
    return PairStream(clip_ids, stats, gap, load, train_ids=train_ids, seed=seed, n_frames=n_frames)


def pairs_from_targets(targets, gap, seed=0, ids=None):
    """Pairs from already-normalized ``80 x T`` arrays (synthetic or cached)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i, values in enumerate(targets):
        values = np.asarray(values, np.float32)
        if gap == "variative":
            spec = make_gap_spec("random", rng, values.shape[1])
        elif isinstance(gap, GapSpec):
            spec = gap
        else:
            spec = make_gap_spec(int(gap), total_frames=values.shape[1])
        source = apply_gap(MelSpectrogram(values, NORMALIZED), spec).values
        clip_id = ids[i] if ids is not None else f"item{i:05d}"
        pairs.append(TrainingPair(clip_id, source, values, spec))
    return pairs

"""Deterministic stand-ins for speech: waveforms and toy spectrogram images.

These back the test suite, the acceptance run and the ``--synthetic`` CLI
paths, where no real corpus is available.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import N_MELS, SAMPLE_RATE, filter_centers

# (F1, F2, F3) in Hz for a handful of vowels
_VOWELS = np.array(
    [[730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480], [640, 1190, 2390]],
    dtype=np.float64,
)


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    a = [1.0, -2 * r * np.cos(2 * np.pi * freq / sr), r * r]
    return lfilter([1.0 - r], a, x)


def speech_like(duration=2.0, seed=0, sr=SAMPLE_RATE, lead_silence=0.0, tail_silence=0.0):
    """Voiced syllables: a drifting glottal pulse train through vowel formants.

    Returns float64 samples with peak 0.5.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    out = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(sr * rng.uniform(0.15, 0.3))
        gap = int(sr * rng.uniform(0.02, 0.08))
        seg_n = min(syl, n - pos)
        f0 = rng.uniform(95, 170) * np.linspace(1.0, rng.uniform(0.85, 1.15), seg_n)
        phase = np.cumsum(f0 / sr)
        pulses = np.diff(np.floor(phase), prepend=0.0)
        excitation = pulses + 0.02 * rng.standard_normal(seg_n)
        formants = _VOWELS[rng.integers(len(_VOWELS))]
        seg = sum(_resonator(excitation, f, 80 + 40 * i, sr) for i, f in enumerate(formants))
        seg *= np.hanning(seg_n)
        out[pos : pos + seg_n] += seg
        pos += syl + gap
    out /= np.abs(out).max() / 0.5
    lead = np.zeros(int(round(lead_silence * sr)))
    tail = np.zeros(int(round(tail_silence * sr)))
    return np.concatenate([lead, out, tail])


def toy_spectrograms(n, n_frames=128, seed=0):
    """Harmonic stacks with pitch drift and syllabic on/off rhythm.

    Each image is ``80 x n_frames`` with values in [-1, 1]: background near
    -1, harmonics of a drifting fundamental rising toward 1. The rhythm makes
    the last visible frame a poor predictor of the next ones.
    """
    rng = np.random.default_rng(seed)
    centers = filter_centers()
    channel = np.arange(N_MELS)[:, None]
    t = np.arange(n_frames)[None, :]
    images = []
    for _ in range(n):
        f0 = rng.uniform(110, 220)
        drift = rng.uniform(-0.4, 0.4) * f0 / n_frames
        period = rng.uniform(18, 30)
        phase = rng.uniform(0, 2 * np.pi)
        f0_t = f0 + drift * t
        env = np.clip(1.5 * np.sin(2 * np.pi * t / period + phase) + 0.5, 0.0, 1.0)
        img = np.zeros((N_MELS, n_frames))
        for k in range(1, 12):
            fk = k * f0_t
            # fractional channel index of this harmonic
            pos = np.interp(fk, centers, np.arange(N_MELS), left=-10, right=N_MELS + 10)
            img += (0.9**k) * np.exp(-0.5 * ((channel - pos) / 0.8) ** 2)
        img = -0.9 + 1.8 * np.clip(img * env, 0.0, 1.0)
        img += 0.02 * rng.standard_normal(img.shape)
        images.append(np.clip(img, -1.0, 1.0).astype(np.float32))
    return images


def write_corpus(root, n_clips=12, seed=0, min_s=3.2, max_s=4.5):
    """Write an LJSpeech-layout corpus of speech-like clips under ``root``.

    The default durations exceed the 256-frame window, so gaps land on voiced
    material rather than on padding.
    """
    from pathlib import Path

    from .dataset import write_wav
    from .dsp import AudioClip

    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_clips):
        clip_id = f"SYN001-{i:04d}"
        duration = float(rng.uniform(min_s, max_s))
        x = speech_like(duration, seed=int(rng.integers(2**31)), lead_silence=0.2, tail_silence=0.2)
        write_wav(root / "wavs" / f"{clip_id}.wav", AudioClip(x))
        rows.append(f"{clip_id}|synthetic clip {i}|synthetic clip {i}")
    (root / "metadata.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return root

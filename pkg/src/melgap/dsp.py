"""Audio to log-mel analysis, corpus normalization and Griffin-Lim inversion.

All framing uses a 1024-point periodic Hann window with a 256-sample hop and
no centre padding, so a clip of ``N >= 1024`` samples yields
``1 + (N - 1024) // 256`` frames.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 80
FMIN = 80.0
FMAX = 7600.0
LOG_FLOOR = 1e-10
TARGET_FRAMES = 256

POWER_MEL = "power-mel"
LOG_MEL = "log-mel"
NORMALIZED = "normalized"
STATES = (POWER_MEL, LOG_MEL, NORMALIZED)


class DSPError(ValueError):
    pass


class AllSilentError(DSPError):
    def __init__(self):
        super().__init__("all-silent")


class TooShortError(DSPError):
    def __init__(self, n):
        super().__init__(f"too-short: {n} samples < {N_FFT}")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise DSPError("audio clip must contain at least one sample")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray
    state: str = LOG_MEL

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.state not in STATES:
            raise DSPError(f"unknown mel state {self.state!r}")
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise DSPError(f"mel must be {N_MELS} x T, got {self.values.shape}")

    @property
    def frames(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float
    std_min: float
    std_max: float
    train_split_hash: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise DSPError("sigma must be positive")
        if not self.std_min < self.std_max:
            raise DSPError("std_min must be below std_max")

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))

    @property
    def digest(self):
        """Stable hash of the statistics, used to tag normalized caches."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def frame_count(n_samples):
    if n_samples < N_FFT:
        raise TooShortError(n_samples)
    return 1 + (n_samples - N_FFT) // HOP


def _frames(x):
    n = frame_count(x.size)
    return np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP][:n]


def trim_silence(clip: AudioClip, threshold_db=60.0) -> AudioClip:
    """Drop leading and trailing low-energy audio.

    Frames are scored by RMS on the analysis grid. A frame counts as silent
    when its RMS is more than ``threshold_db`` below the loudest frame. Since
    the first voiced frame's predecessor was silent, the onset lies in the
    last hop of that frame, so the cut is refined to hop resolution; the same
    argument applies at the end.
    """
    x = clip.samples
    if x.size < N_FFT:
        padded = np.zeros(N_FFT)
        padded[: x.size] = x
        if not np.any(padded):
            raise AllSilentError()
        return AudioClip(x.copy(), clip.sample_rate)

    frames = _frames(x)
    rms = np.sqrt(np.mean(frames**2, axis=1))
    peak = rms.max()
    if peak <= 0.0:
        raise AllSilentError()
    voiced = np.flatnonzero(rms >= peak * 10.0 ** (-threshold_db / 20.0))
    first, last = voiced[0], voiced[-1]
    per_frame = N_FFT // HOP

    start = 0 if first == 0 else (first + per_frame - 1) * HOP
    end = x.size if last == len(rms) - 1 else (last + 1) * HOP
    return AudioClip(x[start:end].copy(), clip.sample_rate)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        mel,
    )


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(
        m >= min_log_mel,
        min_log_hz * np.exp(logstep * (m - min_log_mel)),
        f_sp * m,
    )


def mel_band_edges(n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    """The ``n_mels + 2`` corner frequencies (Hz) of the triangular filters."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def build_mel_filterbank(
    sample_rate=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX
):
    """Unit-area triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_band_edges(n_mels, fmin, fmax)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # each triangle has height 1 and base (hi - lo), so area (hi - lo) / 2
    weights *= 2.0 / (hi - lo)
    return weights


def filter_centers(n_mels=N_MELS, fmin=FMIN, fmax=FMAX):
    return mel_band_edges(n_mels, fmin, fmax)[1:-1]


def power_spectrogram(samples):
    window = get_window("hann", N_FFT, fftbins=True)
    frames = _frames(np.asarray(samples, dtype=np.float64))
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_analyze(clip: AudioClip, fb=None) -> MelSpectrogram:
    if clip.sample_rate != SAMPLE_RATE:
        raise DSPError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    if fb is None:
        fb = build_mel_filterbank()
    power = power_spectrogram(clip.samples)
    mel = fb @ power
    return MelSpectrogram(np.log10(np.maximum(mel, LOG_FLOOR)), LOG_MEL)


def preprocess_clip(clip, fb=None, threshold_db=60.0):
    """Trim then analyze; the log-mel of a corpus clip."""
    return mel_analyze(trim_silence(clip, threshold_db), fb)


def compute_corpus_stats(mels, train_split_hash=""):
    """Global scalar mean/std over every cell of every spectrogram.

    Per-spectrogram partial sums are combined with ``math.fsum`` so the result
    does not depend on the order of ``mels``.
    """
    arrays = [np.asarray(m.values if isinstance(m, MelSpectrogram) else m, np.float64) for m in mels]
    if not arrays:
        raise DSPError("need at least one spectrogram")
    count = sum(a.size for a in arrays)
    mu = math.fsum(float(a.sum()) for a in arrays) / count
    var = math.fsum(float(((a - mu) ** 2).sum()) for a in arrays) / count
    sigma = math.sqrt(var)
    if sigma == 0.0:
        raise DSPError("zero-variance corpus")
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    return NormStats(mu, sigma, (lo - mu) / sigma, (hi - mu) / sigma, train_split_hash)


def normalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if mel.state != LOG_MEL:
        raise DSPError(f"normalize expects {LOG_MEL}, got {mel.state}")
    z = (np.asarray(mel.values, np.float64) - stats.mu) / stats.sigma
    y = 2.0 * (z - stats.std_min) / (stats.std_max - stats.std_min) - 1.0
    return MelSpectrogram(np.clip(y, -1.0, 1.0), NORMALIZED)


def denormalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if mel.state != NORMALIZED:
        raise DSPError(f"denormalize expects {NORMALIZED}, got {mel.state}")
    y = np.asarray(mel.values, np.float64)
    z = (y + 1.0) / 2.0 * (stats.std_max - stats.std_min) + stats.std_min
    return MelSpectrogram(z * stats.sigma + stats.mu, LOG_MEL)


def silence_value(state):
    return {POWER_MEL: LOG_FLOOR, LOG_MEL: math.log10(LOG_FLOOR), NORMALIZED: -1.0}[state]


def fix_length(mel: MelSpectrogram, target_frames=TARGET_FRAMES) -> MelSpectrogram:
    values = mel.values
    t = values.shape[1]
    if t >= target_frames:
        return MelSpectrogram(values[:, :target_frames].copy(), mel.state)
    pad = np.full((values.shape[0], target_frames - t), silence_value(mel.state), values.dtype)
    return MelSpectrogram(np.concatenate([values, pad], axis=1), mel.state)


def istft(spec, length):
    """Weighted overlap-add inverse of :func:`power_spectrogram`'s framing."""
    window = get_window("hann", N_FFT, fftbins=True)
    frames = np.fft.irfft(spec, n=N_FFT, axis=0).T * window
    out = np.zeros(length)
    norm = np.zeros(length)
    for i, frame in enumerate(frames):
        s = i * HOP
        out[s : s + N_FFT] += frame
        norm[s : s + N_FFT] += window**2
    # window-sum vanishes at the outermost samples; floor avoids blow-up there
    return out / np.maximum(norm, 1e-1)


def stft(samples, n_frames):
    window = get_window("hann", N_FFT, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(samples, N_FFT)[::HOP][:n_frames]
    return np.fft.rfft(frames * window, axis=1).T


def griffin_lim(magnitude, iterations=60):
    """Zero-phase-initialized Griffin-Lim on a ``(513, T)`` magnitude."""
    n_frames = magnitude.shape[1]
    length = (n_frames - 1) * HOP + N_FFT
    spec = magnitude.astype(np.complex128)
    y = istft(spec, length)
    for _ in range(iterations):
        rebuilt = stft(y, n_frames)
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
        y = istft(magnitude * phase, length)
    return y


def mel_to_linear_power(mel_power, fb=None):
    if fb is None:
        fb = build_mel_filterbank()
    return np.maximum(np.linalg.pinv(fb) @ mel_power, 0.0)


def griffin_lim_invert(mel: MelSpectrogram, iterations=60, fb=None) -> AudioClip:
    if mel.state != LOG_MEL:
        raise DSPError(f"griffin_lim_invert expects {LOG_MEL}, got {mel.state}")
    power = 10.0 ** np.asarray(mel.values, np.float64)
    magnitude = np.sqrt(mel_to_linear_power(power, fb))
    return AudioClip(griffin_lim(magnitude, iterations), SAMPLE_RATE)


# mel cache: little-endian header then row-major float32 cells
_CACHE_MAGIC = b"MELC"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIB32s")


def write_mel_cache(path, mel: MelSpectrogram, stats_hash=""):
    digest = bytes.fromhex(stats_hash) if stats_hash else bytes(32)
    header = _CACHE_HEADER.pack(
        _CACHE_MAGIC, _CACHE_VERSION, mel.values.shape[0], mel.values.shape[1],
        STATES.index(mel.state), digest,
    )
    body = np.ascontiguousarray(mel.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_mel_cache(path):
    """Return ``(mel, stats_hash)``; ``stats_hash`` is '' when unset."""
    raw = Path(path).read_bytes()
    magic, version, n_mels, n_frames, state, digest = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC:
        raise DSPError(f"{path}: not a mel cache file")
    if version != _CACHE_VERSION:
        raise DSPError(f"{path}: unsupported cache version {version}")
    values = np.frombuffer(raw, dtype="<f4", offset=_CACHE_HEADER.size)
    if values.size != n_mels * n_frames:
        raise DSPError(f"{path}: truncated cache body")
    values = values.reshape(n_mels, n_frames).astype(np.float32)
    stats_hash = "" if digest == bytes(32) else digest.hex()
    return MelSpectrogram(values, STATES[state]), stats_hash

"""Log-mel to waveform backends and splicing of regenerated audio.

Two interchangeable backends: deterministic Griffin-Lim, and an adapter for
externally trained neural vocoders (a Parallel WaveGAN checkpoint when the
``parallel_wavegan`` package is installed, or an exported torch program
(``.pt2``) or TorchScript module mapping ``1 x 80 x T`` features to
``T * 256`` samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dsp import FMAX, FMIN, HOP, LOG_MEL, N_MELS, SAMPLE_RATE, AudioClip, DSPError, MelSpectrogram, griffin_lim_invert

EXPECTED_MEL_CONFIG = {
    "sampling_rate": SAMPLE_RATE,
    "num_mels": N_MELS,
    "hop_size": HOP,
    "fmin": FMIN,
    "fmax": FMAX,
}

CROSSFADE_MS = 5.0


class VocoderError(RuntimeError):
    pass


class VocoderConfigMismatch(VocoderError):
    pass


@dataclass
class VocoderBackend:
    kind: str
    mel_config: dict = field(default_factory=lambda: dict(EXPECTED_MEL_CONFIG))
    iterations: int = 60
    model: object = None
    feat_mean: np.ndarray | None = None
    feat_scale: np.ndarray | None = None

    def expected_length(self, n_frames):
        if self.kind == "griffin_lim":
            return (n_frames - 1) * HOP + 1024
        return n_frames * HOP

    def synthesize(self, mel: MelSpectrogram) -> AudioClip:
        return synthesize(self, mel)


def griffin_lim_backend(iterations=60) -> VocoderBackend:
    return VocoderBackend("griffin_lim", iterations=iterations)


def _check_mel_config(config, source):
    mismatched = {
        k: (config.get(k), v) for k, v in EXPECTED_MEL_CONFIG.items()
        if config.get(k) is None or float(config[k]) != float(v)
    }
    if mismatched:
        raise VocoderConfigMismatch(
            f"{source}: mel config differs from pipeline\n"
            f"  vocoder:  {{{', '.join(f'{k}: {a}' for k, (a, _) in mismatched.items())}}}\n"
            f"  pipeline: {{{', '.join(f'{k}: {b}' for k, (_, b) in mismatched.items())}}}"
        )


def _load_stats(directory):
    h5 = directory / "stats.h5"
    if h5.exists():
        import h5py

        with h5py.File(h5, "r") as fh:
            return np.asarray(fh["mean"]), np.asarray(fh["scale"])
    npy = directory / "stats.npy"
    if npy.exists():
        stats = np.load(npy)
        return stats[0], stats[1]
    return None, None


def load_neural_vocoder(checkpoint, config_path=None) -> VocoderBackend:
    """Load pretrained vocoder weights plus their ``config.yml``.

    The config must describe 80-channel, 80-7600 Hz mels at 22.05 kHz with a
    256-sample hop.
    """
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise FileNotFoundError(f"vocoder checkpoint not found: {checkpoint}")
    config_path = Path(config_path) if config_path else checkpoint.parent / "config.yml"
    if not config_path.is_file():
        raise FileNotFoundError(f"vocoder config not found: {config_path}")
    try:
        config = yaml.safe_load(config_path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise VocoderError(f"{config_path}: unreadable config ({exc})") from exc
    _check_mel_config(config, config_path)

    import torch

    try:
        if checkpoint.suffix == ".pkl":
            from parallel_wavegan.utils import load_model  # optional dependency

            model = load_model(str(checkpoint), config)
            model.remove_weight_norm()
            model.eval()
        elif checkpoint.suffix == ".pt2":
            model = torch.export.load(str(checkpoint)).module()
        else:
            model = torch.jit.load(str(checkpoint), map_location="cpu")
            model.eval()
    except ImportError as exc:
        raise VocoderError("Parallel WaveGAN checkpoints need the 'parallel_wavegan' package") from exc
    except Exception as exc:
        raise VocoderError(f"{checkpoint}: corrupt or unsupported checkpoint ({exc})") from exc
    mean, scale = _load_stats(checkpoint.parent)
    mel_config = {k: config[k] for k in EXPECTED_MEL_CONFIG}
    return VocoderBackend("neural", mel_config, model=model, feat_mean=mean, feat_scale=scale)


def load_backend(spec: str) -> VocoderBackend:
    """``griffin-lim`` or ``neural:<checkpoint path>``."""
    if spec in ("griffin-lim", "griffin_lim"):
        return griffin_lim_backend()
    if spec.startswith("neural:"):
        return load_neural_vocoder(spec.split(":", 1)[1])
    raise VocoderError(f"unknown vocoder {spec!r}")


def _neural(backend, values):
    import torch

    feats = values.T
    if backend.feat_mean is not None:
        feats = (feats - backend.feat_mean) / backend.feat_scale
    feats = torch.from_numpy(np.ascontiguousarray(feats, np.float32))
    with torch.no_grad():
        if hasattr(backend.model, "inference"):
            wav = backend.model.inference(feats)
        else:
            wav = backend.model(feats.T[None])
    wav = wav.reshape(-1).cpu().numpy().astype(np.float64)
    n = values.shape[1] * HOP
    if wav.size < n:
        wav = np.pad(wav, (0, n - wav.size))
    return wav[:n]


def synthesize(backend: VocoderBackend, mel: MelSpectrogram) -> AudioClip:
    if mel.state != LOG_MEL:
        raise DSPError(f"vocoder needs a {LOG_MEL} (denormalized) input, got {mel.state}")
    if mel.values.shape[0] != int(backend.mel_config["num_mels"]):
        raise VocoderConfigMismatch(f"mel has {mel.values.shape[0]} channels, vocoder expects {backend.mel_config['num_mels']}")
    if backend.kind == "griffin_lim":
        samples = griffin_lim_invert(mel, backend.iterations).samples
    else:
        samples = _neural(backend, np.asarray(mel.values, np.float64))
    return AudioClip(np.clip(samples, -1.0, 1.0), SAMPLE_RATE)


def crossfade_samples(sample_rate=SAMPLE_RATE, ms=CROSSFADE_MS):
    return int(round(sample_rate * ms / 1000.0))


def splice_audio(original: AudioClip, generated: AudioClip, gap, crossfade_ms=CROSSFADE_MS) -> AudioClip:
    """Original audio up to the gap, vocoded audio inside it.

    A linear crossfade over the ``crossfade_ms`` preceding the gap blends the
    original into the generated signal.
    """
    if original.sample_rate != generated.sample_rate:
        raise VocoderError("sample rates differ")
    if gap.frame_len == 0:
        return AudioClip(original.samples.copy(), original.sample_rate)
    start, end = gap.sample_start, gap.sample_start + gap.sample_len
    if len(generated) < end:
        raise VocoderError(f"generated audio has {len(generated)} samples, gap needs {end}")
    orig = original.samples
    if orig.size < start:
        orig = np.pad(orig, (0, start - orig.size))
    out = np.concatenate([orig[:start], generated.samples[start:end], orig[end:]])
    fade = min(crossfade_samples(original.sample_rate, crossfade_ms), start)
    if fade:
        ramp = np.arange(1, fade + 1) / (fade + 1)
        seg = slice(start - fade, start)
        out[seg] = (1.0 - ramp) * orig[seg] + ramp * generated.samples[seg]
    return AudioClip(out, original.sample_rate)

"""Trailing-gap masks that stand in for lost network packets.

One packet carries 40 ms of audio, so ``p`` lost packets remove
``p * 882`` samples at 22.05 kHz, which is rounded once to whole STFT hops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import HOP, NORMALIZED, SAMPLE_RATE, TARGET_FRAMES, MelSpectrogram

PACKET_MS = 40
MAX_PACKETS = 8
FILL_VALUE = -1.0

_SAMPLES_PER_PACKET = PACKET_MS * SAMPLE_RATE // 1000  # 882


class MaskingError(ValueError):
    pass


def packets_to_frames(packets: int) -> int:
    if not 0 <= packets <= MAX_PACKETS:
        raise MaskingError(f"packets must be in 0..{MAX_PACKETS}, got {packets}")
    samples = packets * _SAMPLES_PER_PACKET
    return (samples + HOP // 2) // HOP


@dataclass(frozen=True)
class GapSpec:
    packets: int
    frame_start: int
    frame_len: int
    fill_value: float = FILL_VALUE
    total_frames: int = TARGET_FRAMES

    def __post_init__(self):
        if self.frame_len != packets_to_frames(self.packets):
            raise MaskingError(f"{self.packets} packets span {packets_to_frames(self.packets)} frames, not {self.frame_len}")
        if self.frame_start + self.frame_len != self.total_frames:
            raise MaskingError("gap must end flush with the last frame")

    @classmethod
    def for_packets(cls, packets, total_frames=TARGET_FRAMES):
        n = packets_to_frames(packets)
        if n >= total_frames:
            raise MaskingError(f"gap of {n} frames leaves no context in {total_frames}")
        return cls(packets, total_frames - n, n, FILL_VALUE, total_frames)

    @property
    def columns(self):
        return slice(self.frame_start, self.frame_start + self.frame_len)

    @property
    def sample_start(self):
        return self.frame_start * HOP

    @property
    def sample_len(self):
        return self.frame_len * HOP


def make_gap_spec(packets="random", rng=None, total_frames=TARGET_FRAMES) -> GapSpec:
    """Fixed spec for an integer ``packets``; otherwise draw 1..8 from ``rng``."""
    if packets == "random" or packets is None:
        if rng is None:
            raise MaskingError("random gap needs a seeded generator")
        packets = int(rng.integers(1, MAX_PACKETS + 1))
    return GapSpec.for_packets(int(packets), total_frames)


def mask_columns(values, gap: GapSpec):
    """Array-level masking; works on any ``(..., T)`` array with ``T == total_frames``."""
    if values.shape[-1] != gap.total_frames:
        raise MaskingError(f"expected {gap.total_frames} frames, got {values.shape[-1]}")
    out = values.copy()
    out[..., gap.columns] = gap.fill_value
    return out


def apply_gap(mel: MelSpectrogram, gap: GapSpec) -> MelSpectrogram:
    if mel.state != NORMALIZED:
        raise MaskingError(f"apply_gap expects a normalized mel, got {mel.state}")
    return MelSpectrogram(mask_columns(np.asarray(mel.values), gap), NORMALIZED)

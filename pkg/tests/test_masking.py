import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melgap.dsp import LOG_MEL, NORMALIZED, MelSpectrogram
from melgap.masking import (
    GapSpec,
    MaskingError,
    apply_gap,
    make_gap_spec,
    mask_columns,
    packets_to_frames,
)

EXPECTED_FRAMES = [0, 3, 7, 10, 14, 17, 21, 24, 28]


def frames_oracle(packets):
    # exact rational 40 ms * 22050 Hz / 256-sample hop, rounded half up
    from fractions import Fraction

    exact = Fraction(packets * 40 * 22050, 1000 * 256)
    return int(exact + Fraction(1, 2))


@pytest.mark.parametrize("packets", range(9))
def test_packets_to_frames(packets):
    assert packets_to_frames(packets) == frames_oracle(packets) == EXPECTED_FRAMES[packets]


@pytest.mark.parametrize("packets", [-1, 9, 20])
def test_packets_out_of_range(packets):
    with pytest.raises(MaskingError):
        packets_to_frames(packets)


def test_fixed_specs():
    six = make_gap_spec(6)
    assert (six.packets, six.frame_len, six.frame_start) == (6, 21, 235)
    one = make_gap_spec(1)
    assert (one.frame_len, one.frame_start) == (3, 253)
    assert six.sample_start == 235 * 256 and six.sample_len == 21 * 256


def test_spec_invariants_enforced():
    with pytest.raises(MaskingError):
        GapSpec(6, 230, 21)
    with pytest.raises(MaskingError):
        GapSpec(6, 236, 20)


def test_random_requires_rng():
    with pytest.raises(MaskingError):
        make_gap_spec("random")


def test_random_sizes_uniform():
    rng = np.random.default_rng(123)
    draws = [make_gap_spec("random", rng).packets for _ in range(1000)]
    freqs = np.bincount(draws, minlength=9)[1:] / 1000
    assert set(draws) <= set(range(1, 9))
    assert np.all(np.abs(freqs - 1 / 8) <= 0.05)


def _normalized(seed=0, frames=256):
    return MelSpectrogram(np.random.default_rng(seed).uniform(-0.99, 1, (80, frames)), NORMALIZED)


@pytest.mark.parametrize("packets", range(9))
def test_apply_gap_changes_exact_trailing_cells(packets):
    mel = _normalized(packets)
    out = apply_gap(mel, make_gap_spec(packets)).values
    n = EXPECTED_FRAMES[packets]
    changed = out != mel.values
    assert changed.sum() == n * 80
    assert not changed[:, : 256 - n].any()
    assert np.all(out[:, 256 - n:] == -1.0)
    np.testing.assert_array_equal(out[:, : 256 - n], mel.values[:, : 256 - n])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 8), st.integers(0, 2**31 - 1))
def test_apply_gap_idempotent(packets, seed):
    gap = make_gap_spec(packets)
    once = apply_gap(_normalized(seed), gap)
    twice = apply_gap(once, gap)
    np.testing.assert_array_equal(once.values, twice.values)


def test_apply_gap_requires_normalized():
    with pytest.raises(MaskingError):
        apply_gap(MelSpectrogram(np.zeros((80, 256)), LOG_MEL), make_gap_spec(6))


def test_shorter_window():
    gap = GapSpec.for_packets(6, total_frames=128)
    assert (gap.frame_start, gap.frame_len) == (107, 21)
    out = mask_columns(np.zeros((1, 128, 128)), gap)
    assert np.all(out[..., 107:] == -1) and np.all(out[..., :107] == 0)
    with pytest.raises(MaskingError):
        mask_columns(np.zeros((80, 256)), gap)

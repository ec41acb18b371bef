import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melgap.dataset import (
    CorpusError,
    CorpusSplit,
    LeakageError,
    ingest_corpus,
    load_wav,
    make_pairs,
    pairs_from_targets,
    split_corpus,
    write_wav,
)
from melgap.dsp import LOG_MEL, AudioClip, MelSpectrogram, NormStats, TooShortError
from melgap.masking import make_gap_spec
from melgap.synthetic import speech_like


def _write_fixture(root, ids, missing=()):
    (root / "wavs").mkdir(parents=True)
    for i, clip_id in enumerate(ids):
        if clip_id not in missing:
            write_wav(root / "wavs" / f"{clip_id}.wav", AudioClip(speech_like(0.3, seed=i)))
    (root / "metadata.csv").write_text("".join(f'{c}|text "{c}"|text {c}\n' for c in ids))
    return root


def test_five_rows_one_missing(tmp_path):
    ids = [f"LJ001-000{i}" for i in range(5)]
    index = ingest_corpus(_write_fixture(tmp_path, ids, missing={"LJ001-0002"}))
    assert len(index) == 4
    assert index.warnings == 1 and index.missing == ["LJ001-0002"]
    assert [r.clip_id for r in index] == [i for i in ids if i != "LJ001-0002"]
    assert index.records[0].duration_s == pytest.approx(0.3, abs=1e-4)


def test_empty_metadata(tmp_path):
    (tmp_path / "metadata.csv").write_text("")
    index = ingest_corpus(tmp_path)
    assert len(index) == 0 and index.warnings == 0


def test_missing_metadata(tmp_path):
    with pytest.raises(CorpusError, match="metadata"):
        ingest_corpus(tmp_path)


@pytest.fixture(scope="module")
def index(tmp_path_factory):
    ids = [f"LJ{i // 10:03d}-{i % 10:04d}" for i in range(30)]
    return ingest_corpus(_write_fixture(tmp_path_factory.mktemp("corpus"), ids))


def test_split_sizes_and_disjoint(index):
    split = split_corpus(index, 20, 15, seed=42)
    assert len(split.train_ids) == 15 and len(split.test_ids) == 5
    assert not set(split.train_ids) & set(split.test_ids)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_exhaustive_split_uses_each_once(index, seed):
    split = split_corpus(index, len(index), len(index) - 1, seed)
    assert sorted(split.train_ids + split.test_ids) == sorted(r.clip_id for r in index)


def test_split_deterministic(index):
    a, b = split_corpus(index, 20, 15, 7), split_corpus(index, 20, 15, 7)
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids
    assert split_corpus(index, 20, 15, 8).train_ids != a.train_ids


def test_split_validation(index):
    with pytest.raises(CorpusError):
        split_corpus(index, 31, 10)
    with pytest.raises(CorpusError):
        split_corpus(index, 10, 10)
    with pytest.raises(CorpusError):
        CorpusSplit(["a", "b"], ["b"], 0)


def test_manifest_round_trip(index, tmp_path):
    split = split_corpus(index, 20, 15, 3)
    split.save(tmp_path / "m.json")
    again = CorpusSplit.load(tmp_path / "m.json")
    assert again.train_ids == split.train_ids and again.subset_hash == split.subset_hash


def test_wav_round_trip(tmp_path):
    x = speech_like(0.2, seed=5)
    write_wav(tmp_path / "a.wav", AudioClip(x))
    back = load_wav(tmp_path / "a.wav")
    assert back.sample_rate == 22050
    assert np.max(np.abs(back.samples - x)) <= 1 / 32767


# --- pairs ---------------------------------------------------------------

def _fake_mels(n=6, frames=260):
    rng = np.random.default_rng(0)
    return {f"c{i}": MelSpectrogram(rng.normal(-4, 2, (80, frames)), LOG_MEL) for i in range(n)}


def _stats(mels, ids):
    from melgap.dataset import ids_hash
    from melgap.dsp import compute_corpus_stats

    return compute_corpus_stats([mels[i] for i in ids], ids_hash(ids))


def test_fixed_gap_pairs_differ_only_in_gap():
    mels = _fake_mels()
    ids = sorted(mels)
    stream = make_pairs(ids, _stats(mels, ids), 6, mels.__getitem__, train_ids=ids)
    pairs = list(stream)
    assert len(pairs) == 6
    for p in pairs:
        diff = np.any(p.source != p.target, axis=0)
        assert not diff[:235].any()
        assert np.all(p.source[:, 235:] == -1)
        assert p.gap == make_gap_spec(6)


def test_zero_gap_identity():
    mels = _fake_mels(2)
    ids = sorted(mels)
    for p in make_pairs(ids, _stats(mels, ids), 0, mels.__getitem__, train_ids=ids):
        np.testing.assert_array_equal(p.source, p.target)


def test_stats_from_other_split_rejected():
    mels = _fake_mels()
    ids = sorted(mels)
    stats = _stats(mels, ids[:3])
    with pytest.raises(LeakageError):
        make_pairs(ids, stats, 6, mels.__getitem__, train_ids=ids)
    with pytest.raises(LeakageError):
        make_pairs(ids, NormStats(0.0, 1.0, -1.0, 1.0), 6, mels.__getitem__, train_ids=ids)


def test_skips_unanalyzable_clips():
    mels = _fake_mels(3)
    ids = sorted(mels)

    def load(clip_id):
        if clip_id == "c1":
            raise TooShortError(100)
        return mels[clip_id]

    stream = make_pairs(ids, _stats(mels, ids), 6, load, train_ids=ids)
    assert [p.clip_id for p in stream] == ["c0", "c2"]
    assert stream.skipped == 1


def test_variative_reproducible():
    targets = [np.zeros((80, 256), np.float32)] * 100
    a = [p.gap.packets for p in pairs_from_targets(targets, "variative", seed=11)]
    b = [p.gap.packets for p in pairs_from_targets(targets, "variative", seed=11)]
    assert a == b
    assert set(a) <= set(range(1, 9)) and len(set(a)) > 4

    mels = _fake_mels(100, 256)
    ids = sorted(mels)
    stats = _stats(mels, ids)
    s1 = sorted(p.gap.packets for p in make_pairs(ids, stats, "variative", mels.__getitem__, train_ids=ids, seed=4))
    s2 = sorted(p.gap.packets for p in make_pairs(ids, stats, "variative", mels.__getitem__, train_ids=ids, seed=4))
    assert s1 == s2

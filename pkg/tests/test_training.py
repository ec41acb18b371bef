import json

import numpy as np
import pytest
import torch

from melgap.dataset import pairs_from_targets
from melgap.losses import LossWeights
from melgap.models import GeneratorConfig, build_discriminator, build_generator, load_checkpoint
from melgap.synthetic import toy_spectrograms
from melgap.training import (
    TrainConfig,
    TrainingAborted,
    epoch_pairs,
    make_optimizers,
    read_metrics,
    train_run,
    train_step,
)

SMALL = dict(variant="unet_128x128", base_channels=8, disc_base_channels=8, gap_packets=6)


def _models(seed=0, base=16):
    torch.manual_seed(seed)
    config = GeneratorConfig("unet_128x128", base_channels=base)
    gen = build_generator(config)
    disc = build_discriminator(128, 128, base)
    return gen, disc, make_optimizers(gen, disc, TrainConfig(epochs=1))


def _overfit(seed, steps=50, base=16):
    pair = pairs_from_targets(toy_spectrograms(1, seed=3), 6)[0]
    gen, disc, opts = _models(seed, base)
    return [train_step(gen, disc, pair, LossWeights(), opts, step=i) for i in range(steps)]


def test_overfit_one_pair():
    # default widths; narrower nets move too slowly at lr 1e-4 to halve L1 in 50 steps
    records = _overfit(0, base=64)
    assert records[-1]["rec"] <= 0.5 * records[0]["rec"]
    assert all(np.isfinite(r["g_loss"]) and np.isfinite(r["d_loss"]) for r in records)


def test_step_records_deterministic():
    a = _overfit(5, steps=3)
    b = _overfit(5, steps=3)
    assert a == b


def test_step_record_fields():
    rec = _overfit(0, steps=1)[0]
    assert {"step", "clip_id", "packets", "adv", "rec", "chunk", "g_loss", "d_loss"} <= set(rec)
    assert rec["packets"] == 6


def test_nan_parameter_aborts():
    pair = pairs_from_targets(toy_spectrograms(1), 6)[0]
    gen, disc, opts = _models()
    with torch.no_grad():
        gen.out[0].weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingAborted) as err:
        train_step(gen, disc, pair, LossWeights(), opts, step=4)
    assert err.value.record["step"] == 4
    assert any("out.0.weight" in name for name in err.value.record["nonfinite_params"])


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=4), dict(lr=0.0), dict(gap_mode="sometimes")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_round_trip():
    config = TrainConfig(epochs=3, weights=LossWeights(rec_mode="vgg_feature", lambda_l1_residual=1.0), **SMALL)
    again = TrainConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    assert again == config


def test_epoch_pairs_shuffle_and_variative():
    targets = toy_spectrograms(8)
    config = TrainConfig(epochs=2, gap_mode="variative", seed=3, **SMALL)
    e0 = epoch_pairs(targets, config, 0)
    assert [p.clip_id for p in e0] == [p.clip_id for p in epoch_pairs(targets, config, 0)]
    assert [p.gap for p in e0] == [p.gap for p in epoch_pairs(targets, config, 0)]
    e1 = epoch_pairs(targets, config, 1)
    assert [p.clip_id for p in e0] != [p.clip_id for p in e1]
    assert sorted(p.clip_id for p in e0) == sorted(p.clip_id for p in e1)


def test_vgg_mode_needs_extractor(tmp_path):
    config = TrainConfig(epochs=1, weights=LossWeights(rec_mode="vgg_feature"), **SMALL)
    with pytest.raises(ValueError, match="extractor"):
        train_run(config, toy_spectrograms(2), tmp_path)


def test_run_writes_checkpoints_and_metrics(tmp_path, extractor):
    config = TrainConfig(epochs=2, weights=LossWeights(rec_mode="vgg_feature"), **SMALL)
    result = train_run(config, toy_spectrograms(3), tmp_path, extractor=extractor)
    assert [p.name for p in result.checkpoints] == ["epoch_000.pt", "epoch_001.pt"]
    assert result.steps == 6
    records = read_metrics(result.metrics_path)
    assert [r["step"] for r in records] == list(range(6))
    assert all(r["chunk"] > 0 for r in records)
    ckpt = load_checkpoint(result.checkpoints[-1])
    assert ckpt.step == 6 and ckpt.extra["train_config"]["epochs"] == 2


def _loss_trace(path):
    return [(r["step"], r["clip_id"], r["g_loss"], r["d_loss"]) for r in read_metrics(path)]


def test_resume_after_kill_matches_uninterrupted(tmp_path):
    targets = toy_spectrograms(4, seed=1)
    config = TrainConfig(epochs=3, seed=9, **SMALL)
    full = train_run(config, targets, tmp_path / "full")

    class Killed(Exception):
        pass

    def kill_after_second(epoch, _):
        if epoch == 1:
            raise Killed

    with pytest.raises(Killed):
        train_run(config, targets, tmp_path / "part", on_epoch=kill_after_second)
    # pretend the process died before epoch 1's checkpoint landed: the log
    # then holds steps the surviving checkpoint does not cover
    (tmp_path / "part" / "checkpoints" / "epoch_001.pt").unlink()
    resumed = train_run(config, targets, tmp_path / "part", resume=True)

    assert resumed.steps == full.steps == 12
    assert _loss_trace(resumed.metrics_path) == _loss_trace(full.metrics_path)
    a = load_checkpoint(full.checkpoints[-1]).generator.state_dict()
    b = load_checkpoint(resumed.checkpoints[-1]).generator.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_read_metrics_replays_resume_marker(tmp_path):
    path = tmp_path / "m.jsonl"
    lines = [{"step": 0}, {"step": 1}, {"step": 2}, {"event": "resume", "step": 1}, {"step": 1}]
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    assert [r["step"] for r in read_metrics(path)] == [0, 1]


def test_short_targets_rejected(tmp_path):
    config = TrainConfig(epochs=1, **SMALL)
    with pytest.raises(ValueError, match="frames"):
        train_run(config, [np.zeros((80, 100), np.float32)], tmp_path)

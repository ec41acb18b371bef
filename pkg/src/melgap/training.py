"""Adversarial training: one discriminator then one generator update per pair."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import TrainingPair, pairs_from_targets
from .losses import LossWeights, discriminator_objective, generator_objective
from .models import (
    GeneratorConfig,
    build_discriminator,
    build_generator,
    load_checkpoint,
    save_checkpoint,
    set_rng_state,
    to_image,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 1
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    gap_mode: str = "fixed"
    gap_packets: int = 6
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "unet_256x128"
    base_channels: int = 64
    disc_base_channels: int = 64
    clip_norm: float | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.gap_mode not in ("fixed", "variative"):
            raise ValueError("gap_mode must be 'fixed' or 'variative'")

    @property
    def generator_config(self):
        return GeneratorConfig(self.variant, base_channels=self.base_channels)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def make_optimizers(gen, disc, config: TrainConfig):
    betas = (config.adam_beta1, config.adam_beta2)
    return {
        "g": torch.optim.Adam(gen.parameters(), lr=config.lr, betas=betas),
        "d": torch.optim.Adam(disc.parameters(), lr=config.lr, betas=betas),
    }


def _nonfinite_params(*models):
    bad = []
    for model in models:
        for name, p in model.named_parameters():
            if not torch.isfinite(p).all():
                bad.append(f"{type(model).__name__}.{name}")
    return bad


def _guard(name, value, record, gen, disc):
    if math.isfinite(value):
        return
    record = dict(record, failed=name, value=str(value), nonfinite_params=_nonfinite_params(gen, disc))
    raise TrainingAborted(f"non-finite {name} at step {record.get('step')}", record)


def train_step(gen, disc, pair: TrainingPair, weights: LossWeights, optimizers, extractor=None,
               clip_norm=None, step=0):
    """Update D on (real, detached fake), then G on adversarial + reconstruction."""
    config = gen.config
    device = next(gen.parameters()).device
    source = to_image(pair.source, config).to(device)
    target = to_image(pair.target, config).to(device)
    record = {"step": step, "clip_id": pair.clip_id, "packets": pair.gap.packets}

    gen.train()
    disc.train()
    fake = gen(source)

    optimizers["d"].zero_grad()
    d_loss = discriminator_objective(disc(source, target), disc(source, fake.detach()))
    _guard("d_loss", d_loss.item(), record, gen, disc)
    d_loss.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(disc.parameters(), clip_norm)
    optimizers["d"].step()

    optimizers["g"].zero_grad()
    g_loss, parts = generator_objective(weights, disc(source, fake), fake, target, pair.gap, extractor)
    record.update(parts)
    _guard("g_loss", g_loss.item(), record, gen, disc)
    g_loss.backward()
    if clip_norm:
        torch.nn.utils.clip_grad_norm_(gen.parameters(), clip_norm)
    optimizers["g"].step()

    gen.step = step + 1
    record.update(g_loss=g_loss.detach().item(), d_loss=d_loss.detach().item())
    return record


def epoch_pairs(targets, config: TrainConfig, epoch, ids=None):
    """Shuffled pairs for one epoch; variative gaps are redrawn every epoch."""
    order = np.random.default_rng([config.seed, epoch]).permutation(len(targets))
    gap = "variative" if config.gap_mode == "variative" else config.gap_packets
    pairs = pairs_from_targets(targets, gap, seed=[config.seed, epoch, 1], ids=ids)
    return [pairs[i] for i in order]


def read_metrics(path):
    """Replay a metrics log, dropping steps superseded by a resume."""
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("event") == "resume":
            records = [r for r in records if r["step"] < rec["step"]]
            continue
        records.append(rec)
    return records


def _checkpoint_path(out_dir, epoch):
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:03d}.pt"


def latest_checkpoint(out_dir):
    found = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.pt"))
    return found[-1] if found else None


@dataclass
class TrainResult:
    checkpoints: list[Path]
    metrics_path: Path
    steps: int


def train_run(config: TrainConfig, targets, out_dir, *, extractor=None, resume=False, ids=None,
              on_epoch=None, device="cpu") -> TrainResult:
    """Train for ``config.epochs`` over normalized ``80 x T`` targets.

    Writes ``checkpoints/epoch_NNN.pt`` after every epoch and appends one JSON
    record per step to ``metrics.jsonl``.
    """
    if len(targets) == 0:
        raise ValueError("no training targets")
    if config.weights.needs_extractor and extractor is None:
        raise ValueError("rec_mode 'vgg_feature' needs a feature extractor")
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    gen_config = config.generator_config
    frames = gen_config.input_frames
    targets = [np.asarray(t, np.float32)[:, :frames] for t in targets]
    if any(t.shape[1] != frames for t in targets):
        raise ValueError(f"targets must have at least {frames} frames")

    start_epoch = 0
    ckpt_path = latest_checkpoint(out_dir) if resume else None
    if ckpt_path is not None:
        ckpt = load_checkpoint(ckpt_path, expected=gen_config)
        gen, disc = ckpt.generator.to(device), ckpt.discriminator.to(device)
        optimizers = make_optimizers(gen, disc, config)
        for key, opt in optimizers.items():
            opt.load_state_dict(ckpt.optimizer_states[key])
        set_rng_state(ckpt.rng)
        step = ckpt.step
        start_epoch = ckpt.extra["epoch"] + 1
        with metrics_path.open("a") as fh:
            fh.write(json.dumps({"event": "resume", "step": step}) + "\n")
        log.info("resumed from %s at step %d", ckpt_path, step)
    else:
        torch.manual_seed(config.seed)
        np.random.seed(config.seed)
        gen = build_generator(gen_config)
        disc = build_discriminator(gen_config.input_height, frames, config.disc_base_channels)
        gen, disc = gen.to(device), disc.to(device)
        optimizers = make_optimizers(gen, disc, config)
        step = 0
        metrics_path.write_text("")

    checkpoints = []
    with metrics_path.open("a") as fh:
        for epoch in range(start_epoch, config.epochs):
            for pair in epoch_pairs(targets, config, epoch, ids):
                rec = train_step(gen, disc, pair, config.weights, optimizers, extractor, config.clip_norm, step)
                rec["epoch"] = epoch
                fh.write(json.dumps(rec) + "\n")
                step += 1
            fh.flush()
            path = _checkpoint_path(out_dir, epoch)
            save_checkpoint(path, gen, disc, optimizers, step,
                            extra={"epoch": epoch, "train_config": config.to_dict()})
            checkpoints.append(path)
            log.info("epoch %d done, step %d", epoch, step)
            if on_epoch is not None:
                on_epoch(epoch, gen)
    return TrainResult(checkpoints, metrics_path, step)

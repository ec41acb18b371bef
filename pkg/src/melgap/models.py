"""In-painting generators, the PatchGAN discriminator and checkpoint I/O.

Images are ``N x 1 x H x W`` tensors: ``H`` mel rows (80, or zero-padded to
128 with the fill value) and ``W`` time frames.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dsp import N_MELS

CHECKPOINT_VERSION = 1

VARIANTS = {
    # name: (frames, height)
    "unet_256x128": (256, 128),
    "unet_256x80": (256, 80),
    "unet_128x128": (128, 128),
    "gmcnn_256x128": (256, 128),
}

UNET_LEVELS = 5


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    variant: str = "unet_256x128"
    input_frames: int | None = None
    input_height: int | None = None
    base_channels: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        frames, height = VARIANTS[self.variant]
        if self.input_frames is None:
            object.__setattr__(self, "input_frames", frames)
        if self.input_height is None:
            object.__setattr__(self, "input_height", height)
        if self.base_channels < 8:
            raise ConfigError("base_channels must be >= 8")
        self._check_reachable()

    @property
    def height_stride_one(self):
        return self.variant == "unet_256x80"

    def _check_reachable(self):
        if self.variant.startswith("gmcnn"):
            w_div = h_div = 4
        elif self.height_stride_one:
            w_div, h_div = 2**UNET_LEVELS, 2 ** (UNET_LEVELS - 1)
        else:
            w_div = h_div = 2**UNET_LEVELS
        if self.input_frames % w_div or self.input_height % h_div:
            raise ConfigError(
                f"{self.variant}: {self.input_height}x{self.input_frames} not reachable "
                f"by its stride plan (height must divide by {h_div}, frames by {w_div})"
            )
        if self.input_height < N_MELS:
            raise ConfigError(f"input_height {self.input_height} < {N_MELS} mel rows")

    @property
    def shape(self):
        return (1, self.input_height, self.input_frames)


def _down(cin, cout, norm=True, kernel=(4, 4), stride=(2, 2)):
    layers = [nn.Conv2d(cin, cout, kernel, stride, 1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up(cin, cout, dropout=False, kernel=(4, 4), stride=(2, 2)):
    layers = [nn.ConvTranspose2d(cin, cout, kernel, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]
    if dropout:
        layers.append(nn.Dropout(0.5))
    return nn.Sequential(*layers)


class UNetGenerator(nn.Module):
    """Five-level encoder/decoder with concatenating skip connections."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        widths = [b, 2 * b, 4 * b, 8 * b, 8 * b]
        inner = dict(kernel=(3, 4), stride=(1, 2)) if config.height_stride_one else {}

        self.down = nn.ModuleList()
        cin = 1
        for i, w in enumerate(widths):
            kw = inner if i == UNET_LEVELS - 1 else {}
            self.down.append(_down(cin, w, norm=i > 0, **kw))
            cin = w

        self.up = nn.ModuleList()
        for i in range(UNET_LEVELS - 1):
            skip = widths[-2 - i]
            cin = widths[-1] if i == 0 else 2 * widths[-1 - i]
            kw = inner if i == 0 else {}
            self.up.append(_up(cin, skip, dropout=i < 2, **kw))
        self.out = nn.Sequential(nn.ConvTranspose2d(2 * widths[0], 1, 4, 2, 1), nn.Tanh())

    def forward(self, x):
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        skips.pop()
        for layer in self.up:
            x = torch.cat([layer(x), skips.pop()], dim=1)
        return self.out(x)


class _Column(nn.Module):
    def __init__(self, base, kernel):
        super().__init__()
        p = kernel // 2

        def block(cin, cout, stride=1, dilation=1):
            return [
                nn.Conv2d(cin, cout, kernel, stride, p * dilation, dilation=dilation, bias=False),
                nn.BatchNorm2d(cout),
                nn.ELU(),
            ]

        self.net = nn.Sequential(
            *block(1, base),
            *block(base, 2 * base, stride=2),
            *block(2 * base, 4 * base, stride=2),
            *block(4 * base, 4 * base, dilation=2),
            *block(4 * base, 4 * base, dilation=4),
            nn.ConvTranspose2d(4 * base, 2 * base, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * base),
            nn.ELU(),
            nn.ConvTranspose2d(2 * base, base, 4, 2, 1, bias=False),
            nn.BatchNorm2d(base),
            nn.ELU(),
        )

    def forward(self, x):
        return self.net(x)


class MultiColumnGenerator(nn.Module):
    """Three parallel encoder/decoder columns (kernels 3, 5, 7) fused by a 1x1 conv."""

    kernels = (3, 5, 7)

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.columns = nn.ModuleList(_Column(b, k) for k in self.kernels)
        self.fuse = nn.Sequential(nn.Conv2d(b * len(self.kernels), 1, 1), nn.Tanh())

    def forward(self, x):
        return self.fuse(torch.cat([c(x) for c in self.columns], dim=1))


def init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def build_generator(config: GeneratorConfig) -> nn.Module:
    if config.variant.startswith("gmcnn"):
        model = MultiColumnGenerator(config)
    else:
        model = UNetGenerator(config)
    model.apply(init_weights)
    model.step = 0
    return model


def patch_grid_shape(height, width, n_strided=3):
    """Score-grid size of the PatchGAN for an ``height x width`` input."""
    h, w = height, width
    for stride in [2] * n_strided + [1, 1]:
        h = (h + 2 - 4) // stride + 1
        w = (w + 2 - 4) // stride + 1
    return h, w


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN: scores (masked source, candidate) pairs per patch."""

    def __init__(self, height, width, base_channels=64, in_channels=2):
        super().__init__()
        gh, gw = patch_grid_shape(height, width)
        if gh < 1 or gw < 1:
            raise ConfigError(f"{height}x{width} input is below the discriminator's receptive minimum")
        self.input_dims = (height, width)
        b = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, b, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(b, 2 * b, 4, 2, 1, bias=False),
            nn.BatchNorm2d(2 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * b, 4 * b, 4, 2, 1, bias=False),
            nn.BatchNorm2d(4 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * b, 8 * b, 4, 1, 1, bias=False),
            nn.BatchNorm2d(8 * b),
            nn.LeakyReLU(0.2),
            nn.Conv2d(8 * b, 1, 4, 1, 1),
            nn.Sigmoid(),
        )

    def forward(self, source, candidate):
        return self.net(torch.cat([source, candidate], dim=1))


def build_discriminator(height, width, base_channels=64) -> PatchDiscriminator:
    model = PatchDiscriminator(height, width, base_channels)
    model.apply(init_weights)
    return model


def pad_rows(values, height, fill=-1.0):
    """Append fill rows above the mel channels so the image is ``height`` tall."""
    values = np.asarray(values)
    if values.shape[-2] > height:
        raise ConfigError(f"cannot pad {values.shape[-2]} rows down to {height}")
    pad_shape = values.shape[:-2] + (height - values.shape[-2], values.shape[-1])
    return np.concatenate([values, np.full(pad_shape, fill, values.dtype)], axis=-2)


def strip_rows(values, n_rows=N_MELS):
    return values[..., :n_rows, :]


def to_image(values, config: GeneratorConfig):
    """80 x T array -> 1 x 1 x H x W float32 tensor for ``config``."""
    padded = pad_rows(np.asarray(values, np.float32), config.input_height)
    return torch.from_numpy(padded.copy())[None, None]


def from_image(tensor):
    return strip_rows(tensor.detach().cpu().numpy()[0, 0])


def splice_columns(generated, source, gap):
    """Keep the source outside the gap; only gap columns come from the model."""
    out = source.clone() if isinstance(source, torch.Tensor) else np.array(source, copy=True)
    out[..., gap.columns] = generated[..., gap.columns]
    return out


@torch.no_grad()
def generate(model, masked):
    """Eval-mode forward on a ``1 x 1 x H x W`` image; shape must match the config."""
    expected = model.config.shape
    if tuple(masked.shape[1:]) != expected:
        raise ConfigError(f"input {tuple(masked.shape[1:])} does not match model {expected}")
    was_training = model.training
    model.eval()
    try:
        return model(masked.to(next(model.parameters()).device))
    finally:
        model.train(was_training)


def rng_state():
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def set_rng_state(state):
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(path, generator, discriminator=None, optimizers=None, step=0, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "generator_config": asdict(generator.config),
        "generator": {k: v.detach().clone() for k, v in generator.state_dict().items()},
        "discriminator": discriminator.state_dict() if discriminator is not None else None,
        "discriminator_base": discriminator.net[0].out_channels if discriminator is not None else None,
        "optimizers": {k: opt.state_dict() for k, opt in (optimizers or {}).items()},
        "step": step,
        "rng": rng_state(),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


@dataclass
class Checkpoint:
    generator: nn.Module
    discriminator: nn.Module | None
    optimizer_states: dict
    step: int
    rng: dict
    extra: dict


def load_checkpoint(path, expected: GeneratorConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"checkpoint format {version}, expected {CHECKPOINT_VERSION}")
    config = GeneratorConfig(**payload["generator_config"])
    if expected is not None and expected != config:
        raise CheckpointMismatch(
            "generator config mismatch\n"
            f"  checkpoint: {json.dumps(asdict(config))}\n"
            f"  expected:   {json.dumps(asdict(expected))}"
        )
    gen = build_generator(config)
    gen.load_state_dict(payload["generator"])
    gen.step = payload["step"]
    disc = None
    if payload["discriminator"] is not None:
        disc = build_discriminator(config.input_height, config.input_frames, payload["discriminator_base"])
        disc.load_state_dict(payload["discriminator"])
    return Checkpoint(gen, disc, payload["optimizers"], payload["step"], payload["rng"], payload["extra"])

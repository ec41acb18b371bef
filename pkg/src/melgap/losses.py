"""Adversarial, reconstruction and feature-matching objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# conv indices (1-based) whose activations are compared; for VGG19 these are
# relu1_2, relu2_2, relu3_4 and relu4_4
VGG19_TAP_CONVS = (2, 4, 8, 12)


class ExtractorUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_rec: float = 100.0
    lambda_chunk: float = 100.0
    rec_mode: str = "l1"
    lambda_l1_residual: float = 0.0

    def __post_init__(self):
        if self.rec_mode not in ("l1", "vgg_feature"):
            raise ValueError(f"rec_mode must be 'l1' or 'vgg_feature', got {self.rec_mode!r}")
        for name in ("lambda_adv", "lambda_rec", "lambda_chunk", "lambda_l1_residual"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def needs_extractor(self):
        return self.rec_mode == "vgg_feature"


class FeatureExtractor(nn.Module):
    """Frozen conv stack returning activations at selected taps.

    ``taps`` maps a tap name to ``(index into features, cumulative stride)``.
    Inputs are single-channel images in [-1, 1]; they are replicated to three
    channels and standardized with ``mean``/``std`` before the stack.
    """

    def __init__(self, features: nn.Sequential, taps, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        last = max(idx for idx, _ in taps.values())
        self.features = features[: last + 1]
        self.taps = dict(taps)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # BN/dropout-free, but keep it permanently in eval mode regardless
        return super().train(False)

    def forward(self, x):
        x = (x.repeat(1, 3, 1, 1) + 1.0) / 2.0
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        by_index = {idx: name for name, (idx, _) in self.taps.items()}
        out = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in by_index:
                out[by_index[i]] = x
        return out

    def stride(self, tap):
        return self.taps[tap][1]


def _taps_for(features, conv_numbers):
    taps, conv, stride = {}, 0, 1
    for i, layer in enumerate(features):
        if isinstance(layer, nn.MaxPool2d):
            stride *= 2
        if isinstance(layer, nn.Conv2d):
            conv += 1
        if isinstance(layer, nn.ReLU) and conv in conv_numbers and f"relu_{conv}" not in taps:
            taps[f"relu_{conv}"] = (i, stride)
    return taps


def vgg19_extractor(weights_path=None):
    """ImageNet VGG19 features; ``weights_path`` may point at a local state dict."""
    from torchvision.models import VGG19_Weights, vgg19

    try:
        if weights_path is not None:
            model = vgg19(weights=None)
            model.load_state_dict(torch.load(weights_path, map_location="cpu"))
        else:
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    except Exception as exc:  # network or file failures
        raise ExtractorUnavailable(
            f"pretrained VGG19 weights unavailable ({exc}); pass --extractor toy "
            "or use melgap.losses.toy_extractor() for a deterministic stand-in"
        ) from exc
    for layer in model.features:
        if isinstance(layer, nn.ReLU):
            layer.inplace = False
    return FeatureExtractor(model.features, _taps_for(model.features, VGG19_TAP_CONVS))


def toy_extractor(seed=0, widths=(8, 16), dtype=torch.float32):
    """Deterministic random frozen conv stack with the VGG19 extractor interface.

    One conv+ReLU per width, with a 2x max-pool between consecutive blocks;
    every block's activation is a tap.
    """
    gen = torch.Generator().manual_seed(seed)
    layers, cin = [], 3
    for i, w in enumerate(widths):
        if i:
            layers.append(nn.MaxPool2d(2))
        conv = nn.Conv2d(cin, w, 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * cin)))
            conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
        layers += [conv, nn.ReLU()]
        cin = w
    features = nn.Sequential(*layers)
    taps = _taps_for(features, range(1, len(widths) + 1))
    return FeatureExtractor(features, taps).to(dtype)


def load_extractor(kind="vgg19", seed=0):
    if kind == "toy":
        return toy_extractor(seed)
    if kind == "vgg19":
        return vgg19_extractor()
    if kind.startswith("vgg19:"):
        return vgg19_extractor(kind.split(":", 1)[1])
    raise ValueError(f"unknown extractor {kind!r}")


def _check_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(generated, target):
    _check_dims(generated, target)
    return (generated - target).abs().mean()


def adversarial_loss_lsgan(score_grid, target_label):
    """Least-squares GAN loss: MSE between patch scores and a constant label."""
    label = float(target_label)
    return ((score_grid - label) ** 2).mean()


def vgg_feature_loss(extractor, generated, target):
    if extractor is None:
        raise ExtractorUnavailable("feature loss needs an extractor; see melgap.losses.toy_extractor()")
    _check_dims(generated, target)
    fg, ft = extractor(generated), extractor(target)
    return sum(F.mse_loss(fg[k], ft[k]) for k in sorted(fg))


def tap_columns(gap, stride, width):
    """Feature-map columns overlapping the gap at a given cumulative stride."""
    lo = gap.frame_start // stride
    hi = min(width, -(-(gap.frame_start + gap.frame_len) // stride))
    return lo, hi


def chunk_loss(extractor, generated, target, gap):
    """Feature MSE restricted to the columns covering the in-painted gap."""
    if gap.frame_len == 0:
        return generated.new_zeros(())
    if extractor is None:
        raise ExtractorUnavailable("chunk loss needs an extractor; see melgap.losses.toy_extractor()")
    _check_dims(generated, target)
    fg, ft = extractor(generated), extractor(target)
    total = generated.new_zeros(())
    for k in sorted(fg):
        lo, hi = tap_columns(gap, extractor.stride(k), fg[k].shape[-1])
        total = total + F.mse_loss(fg[k][..., lo:hi], ft[k][..., lo:hi])
    return total


def generator_objective(weights: LossWeights, fake_scores, generated, target, gap=None, extractor=None):
    """Weighted generator loss and its components (as floats) for logging."""
    adv = adversarial_loss_lsgan(fake_scores, 1.0)
    if weights.rec_mode == "l1":
        rec = l1_loss(generated, target)
        chunk = generated.new_zeros(())
    else:
        rec = vgg_feature_loss(extractor, generated, target)
        chunk = chunk_loss(extractor, generated, target, gap) if gap is not None else generated.new_zeros(())
    total = weights.lambda_adv * adv + weights.lambda_rec * rec
    if weights.rec_mode == "vgg_feature":
        total = total + weights.lambda_chunk * chunk
    residual = generated.new_zeros(())
    if weights.lambda_l1_residual > 0 and weights.rec_mode != "l1":
        residual = l1_loss(generated, target)
        total = total + weights.lambda_l1_residual * residual
    breakdown = {k: v.detach().item() for k, v in
                 (("adv", adv), ("rec", rec), ("chunk", chunk), ("l1_residual", residual))}
    return total, breakdown


def discriminator_objective(real_scores, fake_scores):
    _check_dims(real_scores, fake_scores)
    return 0.5 * (adversarial_loss_lsgan(real_scores, 1.0) + adversarial_loss_lsgan(fake_scores, 0.0))

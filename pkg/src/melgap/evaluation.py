"""Metrics, naive baselines, gap-size sweeps and latency measurement."""

from __future__ import annotations

import csv
import json
import logging
import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample_poly

from .dsp import NORMALIZED, AudioClip, MelSpectrogram, denormalize
from .losses import vgg_feature_loss
from .masking import GapSpec, mask_columns
from .models import from_image, generate, splice_columns, to_image
from .vocoder import splice_audio, synthesize

log = logging.getLogger(__name__)

PESQ_RATE = 16000
PESQ_MIN_SECONDS = 0.25
METRICS = ("l1", "pixel_mse", "gap_l1", "baseline_gap_l1", "vgg_mse", "mos")


class EvaluationError(ValueError):
    pass


def reference_targets():
    """Published full-scale numbers, kept for side-by-side reporting only."""
    text = resources.files("melgap").joinpath("data/reference_targets.json").read_text()
    return json.loads(text)


def _values(x):
    return np.asarray(x.values if isinstance(x, MelSpectrogram) else x, np.float64)


def image_metrics(generated, target):
    """Mean absolute and mean squared cell error: ``(l1, pixel_mse)``."""
    if isinstance(generated, MelSpectrogram) and isinstance(target, MelSpectrogram):
        if generated.state != target.state:
            raise EvaluationError(f"state mismatch: {generated.state} vs {target.state}")
    g, t = _values(generated), _values(target)
    if g.shape != t.shape:
        raise EvaluationError(f"shape mismatch: {g.shape} vs {t.shape}")
    diff = g - t
    return float(np.abs(diff).mean()), float((diff**2).mean())


def _as_batch(values, dtype):
    t = torch.as_tensor(np.asarray(values), dtype=dtype)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


@torch.no_grad()
def feature_metric(extractor, generated, target):
    dtype = next(extractor.buffers()).dtype
    return float(vgg_feature_loss(extractor, _as_batch(_values(generated), dtype), _as_batch(_values(target), dtype)))


def pesq_available():
    try:
        import pesq  # noqa: F401
    except ImportError:
        return False
    return True


def pesq_mos(reference: AudioClip, degraded: AudioClip) -> float:
    """Wideband PESQ (MOS-LQO) after resampling both clips to 16 kHz."""
    from pesq import pesq

    n = min(len(reference), len(degraded))
    if n / reference.sample_rate < PESQ_MIN_SECONDS:
        raise EvaluationError(f"clips shorter than {PESQ_MIN_SECONDS} s cannot be scored")

    def to16k(clip):
        x = clip.samples[:n]
        if clip.sample_rate != PESQ_RATE:
            g = np.gcd(PESQ_RATE, clip.sample_rate)
            x = resample_poly(x, PESQ_RATE // g, clip.sample_rate // g)
        return x.astype(np.float64)

    return float(pesq(PESQ_RATE, to16k(reference), to16k(degraded), "wb"))


def hold_last_frame_baseline(masked, gap: GapSpec):
    """Fill the gap by repeating the last column before it."""
    values = _values(masked)
    if gap.frame_len == 0:
        return values.copy()
    if gap.frame_start == 0:
        raise EvaluationError("gap starts at frame 0; there is no frame to hold")
    out = values.copy()
    out[:, gap.columns] = values[:, gap.frame_start - 1 : gap.frame_start]
    return out


@dataclass
class EvalSample:
    """A normalized ``80 x T`` target plus, optionally, its source audio."""

    clip_id: str
    target: np.ndarray
    audio: AudioClip | None = None


@dataclass
class EvalReport:
    per_sample: list[dict] = field(default_factory=list)
    latency: dict | None = None
    meta: dict = field(default_factory=dict)
    errors: int = 0
    images: dict = field(default_factory=dict, repr=False)

    def aggregates(self):
        """Mean of each metric per gap size, recomputed from ``per_sample``."""
        by_packets = {}
        for row in self.per_sample:
            by_packets.setdefault(row["packets"], []).append(row)
        out = {}
        for packets, rows in sorted(by_packets.items()):
            agg = {"n": len(rows)}
            for m in METRICS:
                vals = [r[m] for r in rows if r.get(m) is not None]
                agg[m] = float(np.mean(vals)) if vals else None
            out[packets] = agg
        return out

    def to_dict(self):
        return {
            "meta": self.meta,
            "per_sample": self.per_sample,
            "aggregates": {str(k): v for k, v in self.aggregates().items()},
            "latency": self.latency,
            "errors": self.errors,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(data["per_sample"], data.get("latency"), data.get("meta", {}), data.get("errors", 0))

    def write_csv(self, path):
        fields = ["clip_id", "packets", *METRICS]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.per_sample)


def inpaint(generator, masked_values, gap):
    """Generate, then keep the known columns from the masked input."""
    out = from_image(generate(generator, to_image(masked_values, generator.config)))
    return splice_columns(out, np.asarray(masked_values, np.float32), gap)


def evaluate_gap_sweep(generator, samples, packets=range(1, 9), extractor=None, vocoder=None,
                       stats=None, score_pesq=False, keep_images=False, trained_packets=None):
    """Mask, in-paint, splice and score every sample at every gap size."""
    packets = list(packets)
    if trained_packets is not None and max(packets) > trained_packets:
        warnings.warn(
            f"sweeping up to {max(packets)} packets with a model trained on {trained_packets}",
            stacklevel=2,
        )
    if score_pesq and (vocoder is None or stats is None):
        raise EvaluationError("PESQ scoring needs a vocoder and normalization stats")
    frames = generator.config.input_frames
    report = EvalReport(meta={"packets": packets, "variant": generator.config.variant, "n_samples": len(samples)})
    for sample in samples:
        target = np.asarray(sample.target, np.float32)[:, :frames]
        for p in packets:
            gap = GapSpec.for_packets(p, frames)
            row = {"clip_id": sample.clip_id, "packets": p}
            try:
                masked = mask_columns(target, gap)
                output = inpaint(generator, masked, gap)
                row["l1"], row["pixel_mse"] = image_metrics(output, target)
                cols = gap.columns
                row["gap_l1"] = float(np.abs(output[:, cols] - target[:, cols]).mean())
                held = hold_last_frame_baseline(masked, gap)
                row["baseline_gap_l1"] = float(np.abs(held[:, cols] - target[:, cols]).mean())
                row["vgg_mse"] = feature_metric(extractor, output, target) if extractor is not None else None
                row["mos"] = None
                if score_pesq and sample.audio is not None:
                    log_mel = denormalize(MelSpectrogram(output.astype(np.float64), NORMALIZED), stats)
                    vocoded = synthesize(vocoder, log_mel)
                    spliced = splice_audio(sample.audio, vocoded, gap)
                    row["mos"] = pesq_mos(sample.audio, spliced)
                if keep_images:
                    report.images[(sample.clip_id, p)] = (masked, output, target, gap)
            except Exception as exc:  # noqa: BLE001 - partial reports are part of the contract
                report.errors += 1
                row["error"] = str(exc)
                log.warning("evaluation failed for %s at %d packets: %s", sample.clip_id, p, exc)
                continue
            report.per_sample.append(row)
    return report


def best_worst_report(report: EvalReport, k=1, out_dir=None):
    """Top-k and bottom-k rows by MOS (when scored) and by feature MSE."""
    if not report.per_sample:
        raise EvaluationError("empty report")
    listing = {}
    for metric, higher_better in (("mos", True), ("vgg_mse", False)):
        rows = [r for r in report.per_sample if r.get(metric) is not None]
        if not rows:
            continue
        ranked = sorted(rows, key=lambda r: r[metric], reverse=higher_better)
        listing[f"best_by_{metric}"] = [dict(r) for r in ranked[:k]]
        listing[f"worst_by_{metric}"] = [dict(r) for r in ranked[::-1][:k]]
    if out_dir is not None and report.images:
        from .plotting import plot_mels

        out_dir = Path(out_dir)
        for name, rows in listing.items():
            for rank, row in enumerate(rows):
                key = (row["clip_id"], row["packets"])
                if key not in report.images:
                    continue
                masked, output, target, gap = report.images[key]
                path = out_dir / f"{name}_{rank}_{row['clip_id']}_{row['packets']}p.png"
                plot_mels([("input", masked), ("in-painted", output), ("ground truth", target)], path, gap,
                          suptitle=f"{name.replace('_', ' ')}: {row['clip_id']}")
                row["image"] = str(path)
    return listing


def hardware_descriptor():
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "device": "cpu",
    }


def _summary(ms):
    return {"median": float(statistics.median(ms)), "p95": float(np.percentile(ms, 95)), "n": len(ms)}


def bench_latency(inpaint_fn, vocode_fn, n_runs=20, warmup=2):
    """Wall-clock in-paint, vocode and total latency in milliseconds.

    ``inpaint_fn()`` returns whatever ``vocode_fn`` consumes; both run on
    fixed inputs captured by the caller.
    """
    if n_runs < 3:
        raise EvaluationError("n_runs must be >= 3")
    for _ in range(warmup):
        vocode_fn(inpaint_fn())
    a, b, total = [], [], []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        mel = inpaint_fn()
        t1 = time.perf_counter()
        vocode_fn(mel)
        t2 = time.perf_counter()
        a.append((t1 - t0) * 1e3)
        b.append((t2 - t1) * 1e3)
        total.append((t2 - t0) * 1e3)
    return {
        "inpaint_ms": _summary(a),
        "vocode_ms": _summary(b),
        "total_ms": _summary(total),
        "hardware": hardware_descriptor(),
    }


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def sweep_table(report: EvalReport, reference=None):
    """Markdown table: one column per gap size, rows MOS and feature loss."""
    agg = report.aggregates()
    packets = sorted(agg)
    lines = ["| | " + " | ".join(str(p) for p in packets) + " |", "|---" * (len(packets) + 1) + "|"]
    lines.append("| MOS | " + " | ".join(_fmt(agg[p]["mos"]) for p in packets) + " |")
    lines.append("| Feature loss | " + " | ".join(_fmt(agg[p]["vgg_mse"]) for p in packets) + " |")
    lines.append("| Gap L1 | " + " | ".join(_fmt(agg[p]["gap_l1"]) for p in packets) + " |")
    lines.append("| Hold-last gap L1 | " + " | ".join(_fmt(agg[p]["baseline_gap_l1"]) for p in packets) + " |")
    if reference:
        ref = dict(zip(reference["packets"], zip(reference["mos"], reference["vgg19_loss"])))
        lines.append("| MOS (reference) | " + " | ".join(_fmt(ref.get(p, (None, None))[0]) for p in packets) + " |")
        lines.append("| VGG19 loss (reference) | " + " | ".join(_fmt(ref.get(p, (None, None))[1]) for p in packets) + " |")
    return "\n".join(lines) + "\n"


def summary_table(rows, reference=None):
    """Markdown table of model variants: ``rows`` maps name -> (feature, l1, mos)."""
    lines = ["| Model | Feature loss | L1 loss | MOS |", "|---|---|---|---|"]
    for name, (feat, l1, mos) in rows.items():
        lines.append(f"| {name} | {_fmt(feat)} | {_fmt(l1)} | {_fmt(mos)} |")
    if reference:
        for name, (feat, l1, mos) in reference["rows"].items():
            lines.append(f"| {name} (reference) | {_fmt(feat)} | {_fmt(l1)} | {_fmt(mos)} |")
    return "\n".join(lines) + "\n"

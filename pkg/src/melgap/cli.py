"""Command-line entry point: ``melgap {prepare,train,infer,evaluate,bench}``.

Every subcommand resolves a :class:`RunConfig` (``--config`` file, then flag
overrides) and archives it as ``config.json`` in its output directory, so a
run can be repeated with ``--config <out>/config.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import CorpusSplit, ingest_corpus, load_wav, split_corpus, write_wav
from .dsp import (
    AudioClip,
    DSPError,
    MelSpectrogram,
    NORMALIZED,
    NormStats,
    build_mel_filterbank,
    compute_corpus_stats,
    denormalize,
    fix_length,
    mel_analyze,
    normalize,
    preprocess_clip,
    read_mel_cache,
    trim_silence,
    write_mel_cache,
)
from .losses import LossWeights, load_extractor
from .masking import GapSpec, mask_columns
from .models import load_checkpoint
from .training import TrainConfig, read_metrics, train_run

log = logging.getLogger("melgap")

CORPUS_ENV = "MELGAP_CORPUS"


@dataclass
class RunConfig:
    command: str = ""
    corpus_root: str | None = None
    data_dir: str | None = None
    split_seed: int = 42
    subset_size: int = 1300
    n_train: int = 1000
    synthetic: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    extractor: str = "vgg19"
    vocoder: str = "griffin-lim"
    out_dir: str = "runs/latest"
    device: str = "cpu"
    options: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if isinstance(data.get("train"), dict):
            data["train"] = TrainConfig.from_dict(data["train"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class CLIError(RuntimeError):
    pass


def _device(name):
    if name == "gpu":
        if not torch.cuda.is_available():
            raise CLIError("--device gpu requested but CUDA is not available")
        return torch.device("cuda")
    return torch.device("cpu")


# ---------------------------------------------------------------- prepare

def cmd_prepare(cfg: RunConfig):
    out = Path(cfg.out_dir)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    root = cfg.corpus_root
    if cfg.synthetic:
        from .synthetic import write_corpus

        root = str(write_corpus(out / "synthetic_corpus", cfg.synthetic, seed=cfg.split_seed))
        cfg.corpus_root = root
    if not root:
        raise CLIError(f"no corpus root: pass --root or set {CORPUS_ENV}")
    index = ingest_corpus(root)
    split = split_corpus(index, cfg.subset_size, cfg.n_train, cfg.split_seed)

    fb = build_mel_filterbank()
    records = index.by_id()
    mels, skipped = {}, {}
    for clip_id in split.train_ids + split.test_ids:
        try:
            mel = preprocess_clip(load_wav(records[clip_id].wav_path), fb)
            # round once so stats describe exactly what the float32 cache holds
            mels[clip_id] = MelSpectrogram(mel.values.astype(np.float32).astype(np.float64), mel.state)
        except DSPError as exc:
            skipped[clip_id] = str(exc)
            log.warning("skipping %s: %s", clip_id, exc)
    train_ids = [i for i in split.train_ids if i in mels]
    test_ids = [i for i in split.test_ids if i in mels]
    split = CorpusSplit(train_ids, test_ids, split.seed)
    stats = compute_corpus_stats([mels[i] for i in train_ids], split.train_hash)

    for clip_id, mel in mels.items():
        write_mel_cache(out / "mels" / f"{clip_id}.mel", MelSpectrogram(mel.values.astype(np.float32), mel.state))
    split.save(out / "manifest.json")
    stats.save(out / "stats.json")
    (out / "prepare_summary.json").write_text(json.dumps({
        "corpus_root": str(root),
        "indexed": len(index),
        "missing_wavs": index.warnings,
        "skipped": skipped,
        "train": len(train_ids),
        "test": len(test_ids),
    }, indent=2) + "\n")
    print(f"prepared {len(train_ids)} train / {len(test_ids)} test clips in {out}")


def _load_targets(data_dir, ids, stats, frames=256):
    data_dir = Path(data_dir)
    out = []
    for clip_id in ids:
        mel, _ = read_mel_cache(data_dir / "mels" / f"{clip_id}.mel")
        mel = MelSpectrogram(mel.values.astype(np.float64), mel.state)
        out.append(fix_length(normalize(mel, stats), frames).values.astype(np.float32))
    return out


# ---------------------------------------------------------------- train

def cmd_train(cfg: RunConfig):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    frames = tc.generator_config.input_frames
    limit = cfg.options.get("limit")
    if cfg.synthetic:
        from .synthetic import toy_spectrograms

        targets = toy_spectrograms(cfg.synthetic, frames, seed=tc.seed)
        ids = [f"toy{i:05d}" for i in range(len(targets))]
    else:
        if not cfg.data_dir:
            raise CLIError("train needs --data (a prepare output directory) or --synthetic N")
        split = CorpusSplit.load(Path(cfg.data_dir) / "manifest.json")
        stats = NormStats.load(Path(cfg.data_dir) / "stats.json")
        if stats.train_split_hash != split.train_hash:
            raise CLIError("stats.json was not computed on this manifest's training split")
        ids = split.train_ids[:limit] if limit else split.train_ids
        targets = _load_targets(cfg.data_dir, ids, stats)
    extractor = None
    if tc.weights.needs_extractor:
        extractor = load_extractor(cfg.extractor, seed=tc.seed)
    device = _device(cfg.device)
    if extractor is not None:
        extractor = extractor.to(device)
    result = train_run(tc, targets, out, extractor=extractor, resume=bool(cfg.options.get("resume")), ids=ids,
                       device=device)
    records = read_metrics(result.metrics_path)
    from .plotting import plot_loss_curves

    plot_loss_curves(records, out / "loss_curves.png")
    print(f"trained {result.steps} steps; last checkpoint {result.checkpoints[-1] if result.checkpoints else 'unchanged'}")


# ---------------------------------------------------------------- infer

def cmd_infer(cfg: RunConfig):
    from .evaluation import inpaint
    from .plotting import plot_mels, plot_waveforms
    from .vocoder import load_backend, splice_audio, synthesize

    opts = cfg.options
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(opts["checkpoint"])
    gen = ckpt.generator.to(_device(cfg.device))
    stats = NormStats.load(opts["stats"])
    frames = gen.config.input_frames
    gap = GapSpec.for_packets(int(opts.get("packets", 6)), frames)

    clip = trim_silence(load_wav(opts["wav"]))
    log_mel = mel_analyze(clip)
    target = fix_length(normalize(log_mel, stats), frames).values.astype(np.float32)
    masked = mask_columns(target, gap)
    filled = inpaint(gen, masked, gap)

    vocoder = load_backend(cfg.vocoder)
    vocoded = synthesize(vocoder, denormalize(MelSpectrogram(filled.astype(np.float64), NORMALIZED), stats))
    original = AudioClip(clip.samples[: gap.sample_start + gap.sample_len], clip.sample_rate)
    gappy = original.samples.copy()
    gappy[gap.sample_start:] = 0.0
    gappy = AudioClip(gappy, clip.sample_rate)
    result = splice_audio(original, vocoded, gap)

    write_wav(out / "filled.wav", result)
    write_wav(out / "gappy.wav", gappy)
    plot_mels([("input (gap)", masked), ("in-painted", filled)], out / "spectrograms.png", gap)
    plot_waveforms(gappy.samples, result.samples, clip.sample_rate, out / "waveforms.png", gap.sample_start)
    print(f"wrote {out / 'filled.wav'}")


# ---------------------------------------------------------------- evaluate

def _eval_samples(cfg: RunConfig, frames, split_name, limit):
    from .evaluation import EvalSample

    if cfg.synthetic:
        from .synthetic import toy_spectrograms

        seed = cfg.options.get("eval_seed", 1)
        return [EvalSample(f"toy{i:05d}", t) for i, t in enumerate(toy_spectrograms(cfg.synthetic, frames, seed))], None
    data_dir = Path(cfg.data_dir)
    split = CorpusSplit.load(data_dir / "manifest.json")
    stats = NormStats.load(data_dir / "stats.json")
    ids = split.test_ids if split_name == "test" else split.train_ids
    ids = ids[:limit] if limit else ids
    summary = json.loads((data_dir / "prepare_summary.json").read_text())
    index = ingest_corpus(summary["corpus_root"]).by_id()
    samples = []
    for clip_id, target in zip(ids, _load_targets(data_dir, ids, stats, frames)):
        audio = trim_silence(load_wav(index[clip_id].wav_path))
        samples.append(EvalSample(clip_id, target, audio))
    return samples, stats


def cmd_evaluate(cfg: RunConfig):
    from .evaluation import (
        best_worst_report,
        evaluate_gap_sweep,
        pesq_available,
        reference_targets,
        summary_table,
        sweep_table,
    )
    from .plotting import plot_gap_sweep
    from .vocoder import load_backend

    opts = cfg.options
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(opts["checkpoint"])
    gen = ckpt.generator.to(_device(cfg.device))
    frames = gen.config.input_frames
    spec = str(opts.get("packets", "all"))
    packets = list(range(1, 9)) if spec == "all" else [int(p) for p in spec.split(",")]
    samples, stats = _eval_samples(cfg, frames, opts.get("split", "test"), opts.get("limit"))
    extractor = load_extractor(cfg.extractor)
    score_pesq = opts.get("pesq", "off") == "on"
    if score_pesq and not pesq_available():
        raise CLIError("--pesq on but the 'pesq' package is not installed")
    if score_pesq and stats is None:
        raise CLIError("--pesq on needs audio; synthetic spectrogram sets have none")
    vocoder = load_backend(cfg.vocoder) if score_pesq else None
    trained = ckpt.extra.get("train_config", {}).get("gap_packets")
    report = evaluate_gap_sweep(gen, samples, packets, extractor, vocoder, stats, score_pesq,
                                keep_images=True, trained_packets=trained)
    report.meta.update(checkpoint=str(opts["checkpoint"]), extractor=cfg.extractor, vocoder=cfg.vocoder)
    listing = best_worst_report(report, int(opts.get("k", 1)), out / "best_worst")
    report.save(out / "report.json")
    report.write_csv(out / "per_sample.csv")
    agg = report.aggregates()
    with open(out / "aggregates.csv", "w") as fh:
        cols = ["n", "l1", "pixel_mse", "gap_l1", "baseline_gap_l1", "vgg_mse", "mos"]
        fh.write("packets," + ",".join(cols) + "\n")
        for p, row in agg.items():
            fh.write(f"{p}," + ",".join("" if row[c] is None else repr(row[c]) for c in cols) + "\n")
    (out / "best_worst.json").write_text(json.dumps(listing, indent=2) + "\n")
    ref = reference_targets()
    summary_row = {}
    if 6 in agg:
        summary_row[gen.config.variant] = (agg[6]["vgg_mse"], agg[6]["l1"], agg[6]["mos"])
    tables = ["## Gap-size sweep\n", sweep_table(report, ref["gap_sweep"]),
              "\n## Model summary (6 packets)\n", summary_table(summary_row, ref["model_summary"])]
    (out / "tables.md").write_text("".join(tables))
    plot_gap_sweep(agg, out / "gap_sweep.png", ref["gap_sweep"])
    print(sweep_table(report))
    if report.errors:
        print(f"{report.errors} sample evaluations failed; see report.json", file=sys.stderr)


# ---------------------------------------------------------------- bench

def cmd_bench(cfg: RunConfig):
    from .evaluation import bench_latency, inpaint
    from .vocoder import load_backend, synthesize

    opts = cfg.options
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    vocoder = load_backend(cfg.vocoder)
    gap = None
    if opts.get("checkpoint"):
        gen = load_checkpoint(opts["checkpoint"]).generator.to(_device(cfg.device))
        frames = gen.config.input_frames
        gap = GapSpec.for_packets(int(opts.get("packets", 6)), frames)
        from .synthetic import toy_spectrograms

        masked = mask_columns(toy_spectrograms(1, frames, seed=0)[0], gap)

        def inpaint_fn():
            return inpaint(gen, masked, gap)
    else:
        frames = 256
        from .synthetic import toy_spectrograms

        masked = toy_spectrograms(1, frames, seed=0)[0]

        def inpaint_fn():
            return masked.copy()

    stats = NormStats(mu=-4.0, sigma=2.0, std_min=-3.0, std_max=3.0)
    if opts.get("stats"):
        stats = NormStats.load(opts["stats"])

    def vocode_fn(mel):
        return synthesize(vocoder, denormalize(MelSpectrogram(np.asarray(mel, np.float64), NORMALIZED), stats))

    summary = bench_latency(inpaint_fn, vocode_fn, int(opts.get("n_runs", 10)))
    summary["generator"] = "identity" if not opts.get("checkpoint") else str(opts["checkpoint"])
    summary["vocoder"] = cfg.vocoder
    (out / "latency.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("inpaint_ms", "vocode_ms", "total_ms")}, indent=2))


# ---------------------------------------------------------------- parsing

def _add_common(p):
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--out", "--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--device", choices=["cpu", "gpu"])
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="melgap", description="Fill trailing speech gaps via mel-spectrogram in-painting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("prepare", help="ingest corpus, split, compute stats, cache mels")
    _add_common(p)
    p.add_argument("--root", help=f"corpus root (default: ${CORPUS_ENV})")
    p.add_argument("--subset-size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--synthetic", type=int, metavar="N", help="write and use a synthetic N-clip corpus")

    p = sub.add_parser("train", help="adversarial training")
    _add_common(p)
    p.add_argument("--data", help="prepare output directory")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N toy spectrograms")
    p.add_argument("--limit", type=int, help="use only the first N training clips")
    p.add_argument("--variant")
    gap = p.add_mutually_exclusive_group()
    gap.add_argument("--gap-packets", type=int)
    gap.add_argument("--variative", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--rec-mode", choices=["l1", "vgg_feature"])
    p.add_argument("--lambda-adv", type=float)
    p.add_argument("--lambda-rec", type=float)
    p.add_argument("--lambda-chunk", type=float)
    p.add_argument("--lambda-l1-residual", type=float)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--disc-base-channels", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--extractor", help="vgg19, vgg19:<weights.pth> or toy")
    p.add_argument("--resume", action="store_true", default=None)

    p = sub.add_parser("infer", help="fill the trailing gap of one wav")
    _add_common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--packets", type=int, default=6)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", required=True, help="stats.json from prepare")
    p.add_argument("--vocoder", help="griffin-lim or neural:<checkpoint>")

    p = sub.add_parser("evaluate", help="gap-size sweep with metrics and figures")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="prepare output directory")
    p.add_argument("--synthetic", type=int, metavar="N", help="evaluate on N toy spectrograms")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--packets", default="all", help="'all' or comma-separated packet counts 1..8")
    p.add_argument("--vocoder", help="griffin-lim or neural:<checkpoint>")
    p.add_argument("--pesq", choices=["on", "off"], default="off")
    p.add_argument("--extractor", help="vgg19, vgg19:<weights.pth> or toy")
    p.add_argument("--limit", type=int)
    p.add_argument("--k", type=int, default=1, help="best/worst listing size")

    p = sub.add_parser("bench", help="in-paint and vocode latency")
    _add_common(p)
    p.add_argument("--checkpoint", help="generator checkpoint (default: identity generator)")
    p.add_argument("--stats")
    p.add_argument("--packets", type=int, default=6)
    p.add_argument("--vocoder", help="griffin-lim or neural:<checkpoint>")
    p.add_argument("--n-runs", type=int, default=10)
    return parser


_TRAIN_FLAGS = {
    "variant": "variant",
    "gap_packets": "gap_packets",
    "epochs": "epochs",
    "lr": "lr",
    "beta1": "adam_beta1",
    "base_channels": "base_channels",
    "disc_base_channels": "disc_base_channels",
    "clip_norm": "clip_norm",
}
_WEIGHT_FLAGS = {
    "rec_mode": "rec_mode",
    "lambda_adv": "lambda_adv",
    "lambda_rec": "lambda_rec",
    "lambda_chunk": "lambda_chunk",
    "lambda_l1_residual": "lambda_l1_residual",
}
_OPTION_FLAGS = ("wav", "packets", "checkpoint", "stats", "split", "pesq", "limit", "k", "n_runs", "resume")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.command = args.command
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("out_dir"):
        cfg.out_dir = args.out_dir
    if get("device"):
        cfg.device = args.device
    if get("root"):
        cfg.corpus_root = args.root
    elif args.command == "prepare" and not cfg.corpus_root:
        cfg.corpus_root = os.environ.get(CORPUS_ENV)
    if get("data"):
        cfg.data_dir = args.data
    if get("synthetic") is not None:
        cfg.synthetic = args.synthetic
    if get("subset_size") is not None:
        cfg.subset_size = args.subset_size
    if get("n_train") is not None:
        cfg.n_train = args.n_train
    if get("extractor"):
        cfg.extractor = args.extractor
    if get("vocoder"):
        cfg.vocoder = args.vocoder

    tc = asdict(cfg.train)
    weights = tc.pop("weights")
    if get("seed") is not None:
        if args.command == "prepare":
            cfg.split_seed = args.seed
        else:
            tc["seed"] = args.seed
    for flag, key in _TRAIN_FLAGS.items():
        if get(flag) is not None:
            tc[key] = getattr(args, flag)
    if get("gap_packets") is not None:
        tc["gap_mode"] = "fixed"
    if get("variative"):
        tc["gap_mode"] = "variative"
    for flag, key in _WEIGHT_FLAGS.items():
        if get(flag) is not None:
            weights[key] = getattr(args, flag)
    cfg.train = TrainConfig(**tc, weights=LossWeights(**weights))

    for name in _OPTION_FLAGS:
        if get(name) is not None:
            cfg.options[name] = getattr(args, name)
    if args.command in ("train",) and not get("resume"):
        cfg.options.pop("resume", None)
    return cfg


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        cfg.save(Path(cfg.out_dir) / "config.json")
        COMMANDS[args.command](cfg)
        cfg.save(Path(cfg.out_dir) / "config.json")
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"melgap {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

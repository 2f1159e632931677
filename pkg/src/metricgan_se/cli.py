"""Command-line entry point: ``mgse <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, dsp, metrics, training
from .config import ConfigError, RunConfig
from .generator import REFERENCE_MS_PER_FRAME, REFERENCE_PARAM_COUNT, Generator, StreamState, stream_enhance, \
    enhanced_linear, time_stream

log = logging.getLogger("metricgan_se")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MIN_BENCH_FRAMES = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("--mode", choices=("mask", "map"), help="generator output head")
    p.add_argument("--toy", action="store_true", help="start from the tiny preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgse", description="Causal Transformer speech enhancement with MetricGAN fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic noisy/clean WAV dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="threads used to write the WAVs")

    p = sub.add_parser("pretrain", help="L1 pre-training with early stopping")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--out", required=True, help="generator checkpoint to write")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")

    p = sub.add_parser("finetune", help="MetricGAN fine-tuning of a pre-trained generator")
    _common(p)
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--ckpt", required=True, help="pre-trained generator checkpoint")
    p.add_argument("--out", required=True, help="fine-tuned checkpoint to write")
    p.add_argument("--metric", default="qsnr", help="qsnr | external:<cmd> | external-<scale>:<cmd>")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")

    for name, help_text in (("enhance", "enhance one WAV file"),
                            ("stream", "enhance one WAV file frame by frame")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", dest="inp", required=True, help="noisy WAV")
        p.add_argument("--out", required=True, help="enhanced WAV")

    p = sub.add_parser("eval", help="per-utterance metric report, or score one WAV pair")
    _common(p)
    p.add_argument("--ckpt", help="generator checkpoint (report mode)")
    p.add_argument("--data", help="manifest.csv (report mode)")
    p.add_argument("--enhanced", help="enhanced WAV (pair mode: print the raw score)")
    p.add_argument("--clean", help="clean WAV (pair mode)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--metric", default="qsnr")
    p.add_argument("--out", help="report CSV")

    p = sub.add_parser("bench", help="streaming latency per frame")
    _common(p)
    p.add_argument("--ckpt", help="generator checkpoint (default: random weights of the configured model)")
    p.add_argument("--frames", type=int, default=200)

    p = sub.add_parser("export-spec", help="write clean/noisy/enhanced spectrograms as CSV and PGM")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True, help="noisy WAV")
    p.add_argument("--clean", help="clean reference WAV (adds the clean panel)")
    p.add_argument("--outdir", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.toy() if args.toy else RunConfig()
    if args.config:
        cfg = cfgmod.load(args.config, cfg)
    updates = dict(cfgmod.parse_assignment(s) for s in args.set)
    if args.seed is not None:
        updates["train.seed"] = args.seed
    if args.mode is not None:
        updates["generator.head_mode"] = args.mode
    return cfg.override(updates)


def _log_path(args) -> Path:
    return Path(args.log) if args.log else Path(str(args.out) + ".log.csv")


def _utterances(manifest, cfg: RunConfig, which: str):
    rows = data.read_manifest(manifest)
    if which == "all":
        chosen = rows
    else:
        train_rows, val_rows = data.split(rows, cfg.data.train_fraction, cfg.data.split_seed)
        chosen = train_rows if which == "train" else val_rows
    return training.prepare(data.load_pairs(chosen), dtype=cfg.generator.dtype)


def _load_generator(path) -> Generator:
    return training.load_generator(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args, cfg: RunConfig) -> None:
    d = cfg.data
    specs = data.toy_specs(d.n_pairs, d.snrs, d.seed, d.duration, d.noises)
    path = data.synth_dataset(specs, args.out, workers=args.workers)
    print(f"wrote {len(specs)} pairs; manifest {path}")


def cmd_pretrain(args, cfg: RunConfig) -> None:
    train = _utterances(args.data, cfg, "train")
    val = _utterances(args.data, cfg, "val")
    gen = Generator(cfg.generator, seed=cfg.train.seed)
    best, trace = training.pretrain(gen, train, val, cfg.train, ckpt_path=args.out, log_path=_log_path(args))
    print(f"pre-trained {len(trace.records) - 1} epochs; val L1 {training.mean_l1(best, val):.5f}; "
          f"checkpoint {args.out}")


def cmd_finetune(args, cfg: RunConfig) -> None:
    gen = _load_generator(args.ckpt)
    metric = metrics.get_metric(args.metric)
    train = _utterances(args.data, cfg, "train")
    val = _utterances(args.data, cfg, "val")
    best, trace, _ = training.metricgan_finetune(gen, train, val, cfg.train, metric, cfg.discriminator,
                                                 ckpt_path=args.out, log_path=_log_path(args))
    q = trace.column("val_q")
    print(f"fine-tuned {len(q) - 1} epochs; val {metric.name} {q[0]:.4f} -> {max(q):.4f}; "
          f"params {best.count_params()}; checkpoint {args.out}")


def cmd_enhance(args, cfg: RunConfig) -> None:
    gen = _load_generator(args.ckpt)
    noisy, _ = dsp.read_wav(args.inp, normalize=False)
    enhanced = gen.enhance(noisy)
    dsp.write_wav(args.out, np.clip(enhanced, -1.0, 1.0))
    print(f"enhanced {len(noisy)} -> {len(enhanced)} samples; wrote {args.out}")


def cmd_stream(args, cfg: RunConfig) -> None:
    gen = _load_generator(args.ckpt)
    noisy, _ = dsp.read_wav(args.inp, normalize=False)
    spec = dsp.stft(noisy)
    noisy_c = dsp.compress(spec).mag
    frames = enumerate(noisy_c.astype(gen.config.dtype))
    rows = np.stack(list(stream_enhance(frames, gen, StreamState(gen.config))))
    enhanced = dsp.resynthesize(enhanced_linear(rows, noisy_c, gen.config.head_mode), spec)
    dsp.write_wav(args.out, np.clip(enhanced, -1.0, 1.0))
    print(f"streamed {len(rows)} frames; wrote {args.out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    metric = metrics.get_metric(args.metric)
    if args.enhanced or args.clean:
        if not (args.enhanced and args.clean) or args.ckpt or args.data:
            raise UsageError("pair mode needs --enhanced and --clean and no --ckpt/--data")
        enhanced, _ = dsp.read_wav(args.enhanced, normalize=False)
        clean, _ = dsp.read_wav(args.clean, normalize=False)
        n = min(len(enhanced), len(clean))
        print(f"raw {metric.name} {float(metric.evaluate(enhanced[:n], clean[:n]))!r}")
        return
    if not (args.ckpt and args.data):
        raise UsageError("report mode needs --ckpt and --data")
    gen = _load_generator(args.ckpt)
    rows = data.read_manifest(args.data)
    if args.split != "all":
        train_rows, val_rows = data.split(rows, cfg.data.train_fraction, cfg.data.split_seed)
        rows = train_rows if args.split == "train" else val_rows
    report = metrics.eval_report(gen.enhance, data.load_pairs(rows), metric)
    if args.out:
        metrics.write_report_csv(args.out, report)
    m = report["mean"]
    print(f"{args.split}: {len(report['rows'])} utterances; mean {metric.name} noisy {m['q_noisy']:.4f} "
          f"enhanced {m['q_enhanced']:.4f} delta {m['delta']:+.4f}")


def cmd_bench(args, cfg: RunConfig) -> None:
    if args.frames < MIN_BENCH_FRAMES:
        raise UsageError(f"--frames must be >= {MIN_BENCH_FRAMES}, got {args.frames}")
    gen = _load_generator(args.ckpt) if args.ckpt else Generator(cfg.generator, seed=cfg.train.seed)
    times = time_stream(gen, args.frames, seed=cfg.train.seed)
    n = gen.count_params()
    print(f"frames {args.frames}")
    print(f"mean ms/frame {times.mean():.4f}")
    print(f"median ms/frame {np.median(times):.4f}")
    print(f"reference ms/frame {REFERENCE_MS_PER_FRAME}")
    print(f"params {n}")
    print(f"reference params {REFERENCE_PARAM_COUNT}")
    print(f"params delta {n - REFERENCE_PARAM_COUNT:+d}")


def cmd_export_spec(args, cfg: RunConfig) -> None:
    gen = _load_generator(args.ckpt)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    noisy, _ = dsp.read_wav(args.inp, normalize=False)
    spec = dsp.stft(noisy)
    panels = {"noisy": spec.mag, "enhanced": gen.enhance_spectrogram(spec)}
    if args.clean:
        clean, _ = dsp.read_wav(args.clean, normalize=False)
        panels["clean"] = dsp.stft(clean).mag
    for name, mag in panels.items():
        dsp.write_spectrogram_csv(outdir / f"{name}.csv", mag)
        dsp.spectrogram_to_pgm(outdir / f"{name}.pgm", mag)
    print(f"wrote {', '.join(sorted(panels))} spectrograms to {outdir}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "enhance": cmd_enhance,
    "stream": cmd_stream,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-spec": cmd_export_spec,
}


def _setup_logging() -> None:
    level = os.environ.get("SE_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"SE_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as e:
        print(f"mgse: error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as e:
        print(f"mgse: error: {e}", file=sys.stderr)
        return 1
    print(f"# mgse {args.command}: resolved config")
    print(cfg.dumps(), end="", flush=True)
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"mgse: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"mgse: {args.command} failed: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

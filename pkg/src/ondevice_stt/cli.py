"""Command-line entry point: synth, featurize, pretrain, personalize, eval, sweep.

Exit codes: 0 success, 2 bad arguments or config, 3 unmet precondition
(for example a cache below its trigger count), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .audio import read_wav
from .cache import UtteranceCache
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .dataset import featurize, load_samples, read_manifest, write_manifest
from .errors import NotReady, PipelineError
from .evaluation import evaluate_set
from .model import FreezeSpec, count_params
from .pipeline import pretrain_baseline

log = logging.getLogger("ondevice_stt")

EXIT_OK, EXIT_USAGE, EXIT_PRECONDITION, EXIT_RUNTIME = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def write_stamp(out: Path, command: str, args, config: RunConfig, extra=None) -> Path:
    """Write ``stamp.json``: everything needed to rerun this command."""
    stamp = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k != "func"},
        "seed": args.seed,
        "config": config.to_dict(),
        "versions": {"package": __version__, "checkpoint_format": FORMAT_VERSION},
        "created_unix": time.time(),
    }
    if extra:
        stamp.update(extra)
    path = out / f"stamp_{command}.json"
    path.write_text(json.dumps(stamp, indent=2, default=str))
    return path


def _rows_for(manifest, speakers=None, exclude=None):
    rows = read_manifest(manifest)
    if speakers:
        rows = [r for r in rows if r.get("speaker") in speakers]
    if exclude:
        rows = [r for r in rows if r.get("speaker") not in exclude]
    return rows


def _split(value):
    return [s for s in value.split(",") if s] if value else None


def cmd_synth(args, config: RunConfig) -> int:
    from .synth import synthesize_corpus

    rows = synthesize_corpus(
        args.out, args.voices, args.utterances, seed=args.seed,
        words=(config.synth.min_words, config.synth.max_words), char_ms=config.synth.char_ms,
    )
    write_stamp(args.out, "synth", args, config, {"utterances": len(rows)})
    print(f"wrote {len(rows)} utterances to {args.out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_featurize(args, config: RunConfig) -> int:
    for wav in args.wavs:
        feats = featurize(read_wav(wav))
        dest = args.out / (Path(wav).stem + ".npy")
        np.save(dest, feats)
        print(f"{wav} -> {dest} {feats.shape}")
    write_stamp(args.out, "featurize", args, config)
    return EXIT_OK


def cmd_pretrain(args, config: RunConfig) -> int:
    from .plotting import new_figure, save

    pc = config.pretrain
    epochs = args.epochs or pc.epochs
    rows = _rows_for(args.manifest, _split(args.speakers), _split(args.exclude_speakers))
    if not rows:
        raise UsageError("no utterances selected for pretraining")
    params, losses = pretrain_baseline(rows, config.model, pc, args.seed, epochs)
    ckpt = args.out / "baseline.epck"
    save_checkpoint(params, ckpt)
    fig, (ax,) = new_figure()
    ax.plot(range(1, len(losses) + 1), losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean CTC loss")
    save(fig, args.out / "pretrain_loss.png")
    write_stamp(args.out, "pretrain", args, config, {"losses": losses, "params": count_params(config.model)})
    print(f"baseline checkpoint {ckpt} after {epochs} epochs, final loss {losses[-1]:.4f}")
    return EXIT_OK


def cmd_personalize(args, config: RunConfig) -> int:
    from .plotting import plot_history, plot_wer_comparison
    from .trainer import run_personalization

    tc = config.training
    overrides = {k: v for k, v in (("learning_rate", args.lr), ("batch_size", args.batch_size),
                                   ("max_epochs", args.max_epochs), ("freeze", args.freeze)) if v is not None}
    if "freeze" in overrides:
        overrides["freeze"] = FreezeSpec.from_name(overrides["freeze"])
    tc = replace(tc, **overrides, seed=args.seed)
    cache = UtteranceCache(args.cache or config.cache_root, trigger=tc.cache_trigger)
    if args.ingest:
        for row in _rows_for(args.ingest, _split(args.speakers)):
            cache.add_utterance(row["audio"], row["text"])
    if not cache.ready():
        raise NotReady(f"cache {cache.root} holds {len(cache.available())} utterances; training starts at N={cache.trigger}")
    session = cache.drain(tc.validation_size, seed=args.seed)
    to_rows = lambda us: [{"id": u.id, "audio": str(u.audio), "text": u.text} for u in us]  # noqa: E731
    train, val = load_samples(to_rows(session.train)), load_samples(to_rows(session.validation))
    # the cache deletes its files on completion; keep a copy of the validation split
    (args.out / "validation").mkdir(exist_ok=True)
    kept = []
    for u in session.validation:
        shutil.copyfile(u.audio, args.out / "validation" / u.audio.name)
        kept.append({"id": u.id, "audio": f"validation/{u.audio.name}", "text": u.text})
    write_manifest(args.out / "validation.jsonl", kept)

    baseline = load_checkpoint(args.baseline, config.model)
    before = evaluate_set(baseline, val)
    result = run_personalization(baseline, train, val, tc, args.out / "checkpoints",
                                 metrics_path=args.out / "metrics.jsonl")
    after = evaluate_set(result.params, val)
    final = args.out / "personalized.epck"
    save_checkpoint(result.params, final)
    cache.complete(session.token)

    plot_history(result.history, args.out / "history.png", result.best_epoch)
    plot_wer_comparison(["validation"], [before["mean_wer"]], [after["mean_wer"]], args.out / "wer.png")
    summary = {"baseline_wer": before["mean_wer"], "personalized_wer": after["mean_wer"],
               "best_epoch": result.best_epoch, "epochs_run": len(result.history)}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_stamp(args.out, "personalize", args, config, {"training": tc.to_dict()})
    print(f"validation WER {before['mean_wer']:.2f}% -> {after['mean_wer']:.2f}% "
          f"(best epoch {result.best_epoch}); checkpoint {final}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    params = load_checkpoint(args.checkpoint, config.model)
    rows = _rows_for(args.manifest, _split(args.speakers))
    if not rows:
        raise UsageError("no utterances selected for evaluation")
    report = evaluate_set(params, load_samples(rows))
    dest = args.out / "report.json"
    dest.write_text(json.dumps(report, indent=2))
    write_stamp(args.out, "eval", args, config)
    print(f"mean WER {report['mean_wer']:.2f}% (word-weighted {report['word_weighted_wer']:.2f}%), "
          f"mean loss {report['mean_loss']:.4f}; report {dest}")
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    from .profiler import SweepData, SweepGrid, run_sweep

    grid_dict = dict(config.sweep)
    if args.grid:
        grid_dict.update(json.loads(Path(args.grid).read_text()))
    grid = SweepGrid.from_dict({**grid_dict, "seed": args.seed})
    rows = load_samples(_rows_for(args.manifest, _split(args.speakers)))
    val_n = config.training.validation_size
    if len(rows) <= val_n:
        raise NotReady(f"sweep needs more than {val_n} utterances, got {len(rows)}")
    data = SweepData(load_checkpoint(args.baseline, config.model), rows[val_n:], rows[:val_n])
    table = run_sweep(grid, data, args.out, base=config.training)
    write_stamp(args.out, "sweep", args, config, {"grid": asdict(grid)})
    for r in table:
        print(f"B={r.batch:<3} lr={r.lr:<8g} {r.freeze:<16} T={r.epochs:<3} WER={r.final_wer:6.2f} "
              f"epoch={r.mean_epoch_s:.3f}s peak={r.peak_mem_bytes / 2**20:.0f}MiB {r.status}")
    return EXIT_OK


def _global_flags(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=default(None), help="JSON run configuration file")
    parser.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
    parser.add_argument("--out", type=Path, default=default(Path(".")), help="output directory (default .)")
    parser.add_argument("--log-level", choices=list(LOG_LEVELS), default=default("warn"),
                        help="logging verbosity (default warn)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ondevice-stt", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-voice corpus")
    p.add_argument("--voices", type=int, default=7, help="number of synthetic voices (default 7)")
    p.add_argument("--utterances", type=int, default=70, help="utterances per voice (default 70)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="write standardized log-mel features of WAV files as .npy")
    p.add_argument("wavs", nargs="+", help="16 kHz mono PCM16 WAV files")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="train a baseline model from scratch")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines manifest of training audio")
    p.add_argument("--speakers", help="comma-separated speakers to include")
    p.add_argument("--exclude-speakers", help="comma-separated speakers to leave out")
    p.add_argument("--epochs", type=int, help="override the configured number of epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("personalize", help="fine-tune a baseline on a ready utterance cache")
    p.add_argument("--baseline", type=Path, required=True, help="baseline checkpoint (.epck)")
    p.add_argument("--cache", type=Path, help="cache root (default: config cache_root)")
    p.add_argument("--ingest", type=Path, help="manifest whose utterances are added to the cache first")
    p.add_argument("--speakers", help="comma-separated speakers to ingest")
    p.add_argument("--lr", type=float, help="learning rate override")
    p.add_argument("--batch-size", type=int, help="batch size override")
    p.add_argument("--max-epochs", type=int, help="epoch cap override")
    p.add_argument("--freeze", choices=["NoFrozen", "FrozenConv", "FrozenConvBlstm"], help="freeze preset override")
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("eval", help="decode a manifest and write a WER report")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint to evaluate")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines manifest")
    p.add_argument("--speakers", help="comma-separated speakers to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="profile batch size / learning rate / freezing combinations")
    p.add_argument("--baseline", type=Path, required=True, help="baseline checkpoint (.epck)")
    p.add_argument("--manifest", type=Path, required=True, help="JSON-lines manifest of one speaker's data")
    p.add_argument("--speakers", help="comma-separated speakers to use")
    p.add_argument("--grid", type=Path, help="JSON file with SweepGrid fields")
    p.set_defaults(func=cmd_sweep)

    for action in sub.choices.values():
        _global_flags(action, suppress=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVELS[args.log_level], format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad config {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotReady as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (PipelineError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

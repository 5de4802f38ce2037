"""Command-line interface.

Exit codes: 0 success, 1 usage error (bad flags or subcommand, with a
did-you-mean suggestion where possible), 2 runtime failure.  Logs go to
stderr; each command prints a single JSON object on stdout.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from audiomorph import __version__, data as data_mod, dsp, formats
from audiomorph import model as model_mod
from audiomorph import train as train_mod
from audiomorph.errors import AudiomorphError, InvalidInputError
from audiomorph.model import ModelConfig
from audiomorph.train import TrainConfig

log = logging.getLogger("audiomorph.cli")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    # pinned width so --help output is stable across terminals
    return argparse.HelpFormatter(prog, width=96)


def _suggest(message: str, choices) -> str:
    """Append a did-you-mean hint when the message names an unknown token."""
    token = None
    if "invalid choice:" in message:
        parts = message.split("invalid choice:")[1].split("'")
        if len(parts) >= 2:  # unquoted reprs (numeric choices) get no hint
            token = parts[1]
    elif "unrecognized arguments:" in message:
        first = message.split("unrecognized arguments:")[1].strip().split()[0]
        if first.startswith("-"):
            token = first.split("=")[0]
    if token:
        close = difflib.get_close_matches(token, sorted(choices), n=1)
        if close:
            return f"{message} (did you mean {close[0]!r}?)"
    return message


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", metavar="JSON",
                   help="JSON file of defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="debug-level logging")


def _add_feature_flags(p: _Parser) -> None:
    g = p.add_argument_group("features")
    g.add_argument("--sample-rate", type=int, default=16000,
                   help="expected WAV sample rate in Hz")
    g.add_argument("--window-ms", type=float, default=50.0,
                   help="analysis window length")
    g.add_argument("--hop-ms", type=float, default=12.5, help="frame hop")
    g.add_argument("--fft-size", type=int, default=2048, help="FFT length")
    g.add_argument("--preemphasis", type=float, default=0.97,
                   help="pre-emphasis coefficient")
    g.add_argument("--n-mels", type=int, default=80, help="mel channels")


def _feature_config(args) -> data_mod.FeatureConfig:
    stft = dsp.StftConfig(window_ms=args.window_ms, hop_ms=args.hop_ms,
                          fft_size=args.fft_size, preemphasis=args.preemphasis)
    return data_mod.FeatureConfig(sample_rate_hz=args.sample_rate, stft=stft,
                                  n_mels=args.n_mels)


def _add_train_flags(p: _Parser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--context-ms", type=float, default=50.0,
                   choices=sorted(model_mod._CONTEXT_LAYOUTS),
                   help="attention context per encoder step")
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--learning-rate", type=float, default=1e-3)
    g.add_argument("--lr-decay", type=float, default=0.99,
                   help="per-epoch learning-rate factor")
    g.add_argument("--identity-epochs", type=int, default=0,
                   help="same-clip warmup epochs before transfer training")
    g.add_argument("--mel-jitter", type=int, default=0,
                   help="max mel-bin roll applied jointly to source and target")
    g.add_argument("--sample-prob", type=float, default=0.0,
                   help="scheduled-sampling probability of feeding back the "
                        "decoder's own previous frame")
    g.add_argument("--average-tail", type=int, default=0,
                   help="average the weights of the last N epochs into the "
                        "final checkpoint")
    g.add_argument("--hidden-size", type=int, default=128)
    g.add_argument("--attention-size", type=int, default=128)
    g.add_argument("--decoder-layers", type=int, default=2)
    g.add_argument("--conv-channels", type=int, default=32)
    g.add_argument("--attention-form", choices=model_mod.ATTENTION_FORMS,
                   default="additive")


def _model_overrides(args) -> dict:
    return {
        "hidden_size": args.hidden_size,
        "attention_size": args.attention_size,
        "decoder_layers": args.decoder_layers,
        "conv_channels": args.conv_channels,
        "attention_form": args.attention_form,
        "n_mels": args.n_mels,
    }


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, lr_decay=args.lr_decay,
                       identity_epochs=args.identity_epochs,
                       mel_jitter=args.mel_jitter, sample_prob=args.sample_prob,
                       average_tail=args.average_tail, seed=args.seed)


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


def _resolve_style(spec: str, style_names) -> int:
    if spec in style_names:
        return style_names.index(spec)
    try:
        return int(spec)
    except ValueError:
        raise InvalidInputError(
            f"unknown style {spec!r}; choose from {style_names} or an integer id"
        ) from None


def _write_run_config(run_dir: Path, sections: dict) -> None:
    """Persist the resolved configuration; content is deterministic (no
    timestamps, no absolute environment state)."""
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "run_config.json", "w") as fh:
        json.dump(sections, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth_data(args) -> int:
    styles = data_mod.DEFAULT_STYLES[: args.n_styles]
    cfg = data_mod.SynthConfig(styles=styles, n_pitches=args.n_pitches,
                               midi_low=args.midi_low,
                               holdout_pitches=args.holdout_pitches,
                               duration_s=args.duration_s)
    entries = data_mod.synth_dataset(args.out, cfg, seed=args.seed)
    _emit({
        "command": "synth-data",
        "out": str(args.out),
        "n_clips": len(entries),
        "n_styles": len(styles),
        "test_pitches": cfg.test_pitches(),
        "manifest": str(Path(args.out) / "manifest.jsonl"),
    })
    return 0


def _cmd_features(args) -> int:
    fc = _feature_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = data_mod.load_features(args.manifest, fc, split=args.split,
                                   cache_dir=args.cache_dir)
    for clip in clips:
        spec = dsp.Spectrogram(clip.frames, dsp.SCALE_LOG_MEL, fc.stft)
        formats.write_amspec(out_dir / f"{clip.entry.clip_id}.amspec", spec)
    _emit({"command": "features", "out": str(out_dir), "written": len(clips),
           "n_mels": fc.n_mels})
    return 0


def _cmd_train(args) -> int:
    fc = _feature_config(args)
    clips = data_mod.load_manifest(args.manifest)
    n_styles = len({e.style_id for e in clips})
    model_cfg = ModelConfig.for_context(args.context_ms, n_styles=n_styles,
                                        **_model_overrides(args))
    train_cfg = _train_config(args)
    run_dir = Path(args.run_dir)
    _write_run_config(run_dir, {
        "command": "train",
        "manifest": str(args.manifest),
        "model": model_cfg.to_dict(),
        "features": fc.to_dict(),
        "train": train_cfg.to_dict(),
    })
    result = train_mod.train(run_dir, args.manifest, model_cfg, fc, train_cfg,
                             resume=args.resume, cache_dir=args.cache_dir)
    _emit({
        "command": "train",
        "checkpoint": str(result.checkpoint_path),
        "final_loss": result.final_loss,
        "epochs_run": result.epochs_run,
        "wall_time_s": round(result.wall_time_s, 3),
        "losses_csv": str(result.loss_csv),
    })
    return 0


def _cmd_transform(args) -> int:
    params, fc, style_names, _ = train_mod.load_model(args.checkpoint)
    src = _resolve_style(args.source_style, style_names)
    tgt = _resolve_style(args.target_style, style_names)
    wav = formats.read_wav(args.input, fc.sample_rate_hz)
    spec = data_mod.featurize(wav, fc)
    out_spec, attention = model_mod.transform(params, spec, src, tgt,
                                              max_frames=args.max_frames)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    spec_path = Path(args.spec_out) if args.spec_out else out_path.with_suffix(".amspec")
    att_path = (Path(args.attention_out) if args.attention_out
                else out_path.with_suffix(".attention.amspec"))
    formats.write_amspec(spec_path, out_spec)
    formats.write_amspec(att_path, dsp.Spectrogram(attention, dsp.SCALE_LINEAR))

    linear = dsp.mel_pseudo_inverse(out_spec, fc.filterbank())
    linear = dsp.Spectrogram(linear.frames, linear.scale, fc.stft)
    recon = dsp.griffin_lim(linear, n_iters=args.gl_iters, seed=args.seed,
                            sample_rate_hz=fc.sample_rate_hz)
    recon = dsp.normalize_peak(recon, 0.9)
    formats.write_wav(out_path, recon)
    _emit({
        "command": "transform",
        "out": str(out_path),
        "spec_out": str(spec_path),
        "attention_out": str(att_path),
        "n_frames": out_spec.n_frames,
        "source_style": style_names[src] if src < len(style_names) else src,
        "target_style": style_names[tgt] if tgt < len(style_names) else tgt,
    })
    return 0


def _cmd_eval(args) -> int:
    params, fc, _, _ = train_mod.load_model(args.checkpoint)
    eval_clips = data_mod.load_features(args.manifest, fc, split=args.split,
                                        cache_dir=args.cache_dir)
    train_clips = data_mod.load_features(args.manifest, fc, split="train",
                                         cache_dir=args.cache_dir)
    report = train_mod.evaluate(params, eval_clips, train_clips, jobs=args.jobs)
    payload = {"command": "eval", "split": args.split, **report.to_json()}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _emit(payload)
    return 0


def _cmd_ablate(args) -> int:
    fc = _feature_config(args)
    contexts = [float(c) for c in args.contexts.split(",") if c]
    train_cfg = _train_config(args)
    overrides = _model_overrides(args)
    work_dir = Path(args.work_dir)
    _write_run_config(work_dir, {
        "command": "ablate",
        "manifest": str(args.manifest),
        "contexts": contexts,
        "model_overrides": overrides,
        "features": fc.to_dict(),
        "train": train_cfg.to_dict(),
    })
    rows = train_mod.ablate_context(work_dir, args.manifest, fc, train_cfg,
                                    contexts=contexts, model_overrides=overrides,
                                    cache_dir=args.cache_dir, jobs=args.jobs)
    _emit({"command": "ablate", "csv": str(work_dir / "ablation.csv"),
           "rows": rows})
    return 0


def _cmd_embed(args) -> int:
    params, fc, _, _ = train_mod.load_model(args.checkpoint)
    clips = data_mod.load_features(args.manifest, fc, split=args.split,
                                   cache_dir=args.cache_dir)
    pairs = train_mod.clip_embeddings(params, clips)
    n = train_mod.export_embeddings(params, clips, args.out)
    separation = train_mod.embedding_separation(pairs)
    _emit({"command": "embed", "out": str(args.out), "written": n,
           "separation": separation})
    return 0


def _cmd_griffin_lim(args) -> int:
    spec = formats.read_amspec(args.input)
    stft = dsp.StftConfig(window_ms=args.window_ms, hop_ms=args.hop_ms,
                          fft_size=args.fft_size, preemphasis=args.preemphasis)
    if spec.scale == dsp.SCALE_LOG_MEL:
        fb = dsp.mel_filterbank(n_mels=spec.n_bins, fft_size=stft.fft_size,
                                sample_rate_hz=args.sample_rate)
        spec = dsp.mel_pseudo_inverse(dsp.Spectrogram(spec.frames, spec.scale,
                                                      stft), fb)
    spec = dsp.Spectrogram(spec.frames, spec.scale, stft)
    objective = None
    samples = None
    for samples, objective in dsp.griffin_lim_steps(spec, args.iters, args.seed,
                                                    args.sample_rate):
        pass
    wav = dsp.deemphasize(dsp.Waveform(samples, args.sample_rate),
                          stft.preemphasis)
    wav = dsp.normalize_peak(wav, 0.9)
    formats.write_wav(args.out, wav)
    _emit({"command": "griffin-lim", "out": str(args.out), "n_iters": args.iters,
           "final_objective": objective})
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="audiomorph", formatter_class=_formatter,
                     description="Conditioned audio-to-audio spectrogram "
                                 "transformation toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"audiomorph {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=_formatter)
        p.set_defaults(func=fn)
        _add_common(p)
        return p

    p = add("synth-data", _cmd_synth_data, "render the synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--n-styles", type=int, default=4,
                   help="how many built-in styles to render (max 4)")
    p.add_argument("--n-pitches", type=int, default=24)
    p.add_argument("--midi-low", type=int, default=48,
                   help="lowest MIDI pitch")
    p.add_argument("--holdout-pitches", type=int, default=4,
                   help="pitches reserved for the test split")
    p.add_argument("--duration-s", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=7)

    p = add("features", _cmd_features, "extract log-mel features to .amspec files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default=None, choices=("train", "test"),
                   help="restrict to one split (default: all clips)")
    p.add_argument("--cache-dir", default=None,
                   help="feature cache (default: $AUDIOMORPH_CACHE)")
    _add_feature_flags(p)

    p = add("train", _cmd_train, "train a transformation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run dir's last checkpoint")
    p.add_argument("--cache-dir", default=None)
    _add_train_flags(p)
    _add_feature_flags(p)

    p = add("transform", _cmd_transform, "re-render a clip in another style")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True, metavar="WAV")
    p.add_argument("--out", required=True, metavar="WAV")
    p.add_argument("--source-style", required=True,
                   help="style name or integer id of the input")
    p.add_argument("--target-style", required=True)
    p.add_argument("--spec-out", default=None,
                   help="log-mel output path (default: OUT with suffix .amspec)")
    p.add_argument("--attention-out", default=None,
                   help="attention matrix path (default: OUT with suffix "
                        ".attention.amspec)")
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--gl-iters", type=int, default=60,
                   help="phase-reconstruction iterations")
    p.add_argument("--seed", type=int, default=0, help="initial-phase seed")

    p = add("eval", _cmd_eval, "score MCD on a split against baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.add_argument("--cache-dir", default=None)

    p = add("ablate", _cmd_ablate, "sweep attention context sizes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--work-dir", required=True)
    p.add_argument("--contexts", default="12.5,25,50,100,200",
                   help="comma-separated context sizes in ms")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cache-dir", default=None)
    _add_train_flags(p)
    _add_feature_flags(p)

    p = add("embed", _cmd_embed, "export encoder clip embeddings as TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True, metavar="TSV")
    p.add_argument("--cache-dir", default=None)

    p = add("griffin-lim", _cmd_griffin_lim, "reconstruct audio from an .amspec")
    p.add_argument("--in", dest="input", required=True, metavar="AMSPEC")
    p.add_argument("--out", required=True, metavar="WAV")
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    _add_feature_flags(p)

    return parser


def _apply_config_file(parser: _Parser, argv) -> None:
    """Let a --config JSON supply defaults; explicit flags still win."""
    probe = _Parser(add_help=False)
    probe.add_argument("--config")
    try:
        known, _ = probe.parse_known_args(argv)
    except _UsageError:
        return
    if not known.config:
        return
    try:
        with open(known.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise InvalidInputError(f"config {known.config} must hold a JSON object")
    cleaned = {k.replace("-", "_"): v for k, v in overrides.items()}
    known_dests = {a.dest for a in parser._actions}
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            known_dests.update(a.dest for a in sub._actions)
    unknown = sorted(set(cleaned) - known_dests)
    if unknown:
        raise InvalidInputError(
            f"config {known.config} has unknown keys: {', '.join(unknown)}"
        )
    parser.set_defaults(**cleaned)
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            sub.set_defaults(**{
                k: v for k, v in cleaned.items()
                if any(a.dest == k for a in sub._actions)
            })


def _all_option_strings(parser: _Parser) -> set:
    options = set()
    for action in parser._actions:
        options.update(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            options.update(action.choices)
            for sub in action.choices.values():
                for sub_action in sub._actions:
                    options.update(sub_action.option_strings)
    return options


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(_suggest(str(exc), _all_option_strings(parser)), file=sys.stderr)
        return 1
    except AudiomorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return 1

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except AudiomorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected failures
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

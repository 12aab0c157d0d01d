"""Command-line entry point: ``turntake <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .config import ABLATION_ROWS, ConfigError, ModelConfig, load_config, parse_kv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("turntake")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _data_errors() -> tuple[type, ...]:
    from .dataio import FormatError, SchemaError
    from .labeling import LogError
    from .quantserve import ModelFileError
    from .synth import InfeasibleSpec
    return (SchemaError, FormatError, LogError, ModelFileError, InfeasibleSpec, FileNotFoundError,
            IsADirectoryError, json.JSONDecodeError)


# ----------------------------------------------------------------------------
# config plumbing


def _resolve_config(args) -> ModelConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = str(args.epochs)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "threshold", None) is not None:
        overrides["threshold"] = str(args.threshold)
    try:
        return load_config(getattr(args, "config", None), overrides)
    except KeyError as e:
        raise UsageError(f"unknown config key {e.args[0]!r}") from e


def _echo_config(cfg: ModelConfig, beside: Path | None = None) -> None:
    text = cfg.to_json()
    print(f"config: {text}", file=sys.stderr)
    if beside is not None:
        Path(str(beside) + ".config.json").write_text(text + "\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (JSON or key=value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .dataio import write_feature_stream, write_utterance_log
    from .synth import SynthSpec, synth_generate

    cfg = _resolve_config(args)
    spec = SynthSpec(duration=args.duration, seed=cfg.seed, profile=args.profile,
                     class1_fraction=args.class1_fraction)
    corpus = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_stream(out / "frames.jsonl", corpus.frames)
    write_utterance_log(out / "log.jsonl", corpus.log)
    _write_labels(out / "labels.jsonl", corpus.labels)
    meta = {"spec": spec.__dict__, "turn_scale": corpus.scale, "class1_fraction": corpus.class1_fraction,
            "duration": spec.duration}
    (out / "synth.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    _echo_config(cfg, out / "run")
    print(f"wrote {len(corpus.frames)} frames, {len(corpus.log)} utterances, class1 fraction "
          f"{corpus.class1_fraction:.4f} to {out}")
    return EXIT_OK


def _write_labels(path: Path, labels) -> None:
    with open(path, "w") as fh:
        for lw in labels:
            fh.write(json.dumps({"t_end": lw.t_end, "label": lw.label, "reason": lw.reason}) + "\n")


def _read_labels(path):
    from .dataio import SchemaError
    from .labeling import CLASS0, CLASS1, EXCLUDED, LabeledWindow
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                lw = LabeledWindow(int(rec["t_end"]), rec["label"], rec.get("reason", ""))
            except (KeyError, ValueError, TypeError) as e:
                raise SchemaError(f"{path}:{n}: bad label record ({e})") from e
            if lw.label not in (CLASS0, CLASS1, EXCLUDED):
                raise SchemaError(f"{path}:{n}: unknown label {lw.label!r}")
            out.append(lw)
    return out


def _duration(args, events) -> float:
    if args.duration is not None:
        return args.duration
    if not events:
        raise UsageError("empty log; pass --duration")
    return float(math.ceil(max(e.end for e in events)))


def cmd_label(args) -> int:
    from .dataio import parse_utterance_log
    from .labeling import LabelThresholds, label_stream, label_stream_online

    _echo_config(_resolve_config(args))
    events = parse_utterance_log(args.log)
    th = LabelThresholds(silence=args.silence, short=args.short)
    fn = label_stream_online if args.online else label_stream
    labels = fn(events, _duration(args, events), th)
    _write_labels(Path(args.out), labels)
    counts = {}
    for lw in labels:
        counts[lw.label] = counts.get(lw.label, 0) + 1
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_windows(args) -> int:
    from .dataio import make_windows, parse_feature_stream, parse_utterance_log, read_text_sidecar, write_dataset
    from .labeling import label_stream

    _echo_config(_resolve_config(args))
    frames = parse_feature_stream(args.frames)
    events = parse_utterance_log(args.log)
    if args.labels:
        labels = _read_labels(args.labels)
    else:
        labels = label_stream(events, _duration(args, events))
    sidecar = read_text_sidecar(args.text) if args.text else None
    batch, dropped = make_windows(frames, events, labels, sidecar)
    if batch is None:
        from .dataio import SchemaError
        raise SchemaError("no windows could be assembled")
    write_dataset(args.out, batch)
    print(f"wrote {len(batch)} windows ({int((batch.label == 0).sum())} class0) to {args.out}; "
          f"dropped {dropped}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import read_dataset
    from .quantserve import save_model
    from .training import TrainState, train

    cfg = _resolve_config(args)
    if args.ablation:
        cfg = cfg.replace(ablation=args.ablation)
    out = Path(args.out)
    _echo_config(cfg, out)
    data = read_dataset(args.data, compact=True)
    state = TrainState.load(args.resume) if args.resume else None

    def on_epoch(st):
        if args.checkpoint:
            st.save(args.checkpoint)

    params, history = train(data, cfg, eval_data=read_dataset(args.eval_data, compact=True) if args.eval_data else None,
                            train_fraction=args.train_fraction, state=state, on_epoch=on_epoch)
    save_model(out, params)
    hist_path = Path(args.history) if args.history else Path(str(out) + ".history.jsonl")
    with open(hist_path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = history[-1] if history else {}
    msg = f"trained {len(history)} epochs; final loss {last.get('train_loss', float('nan')):.5f}"
    if "eval" in last:
        msg += f"; held-out macro F1 {last['eval']['macro_f1']:.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import read_dataset, split_train_test
    from .quantserve import load_model
    from .training import evaluate

    params = load_model(args.model)
    _echo_config(params.config)
    data = read_dataset(args.data, compact=True)
    if args.split == "test":
        _, te = split_train_test(len(data), args.train_fraction)
        data = data.take(te, dense=False)
    report = evaluate(params, data, args.threshold)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .dataio import read_dataset
    from .training import ablate, ablation_table

    cfg = _resolve_config(args)
    _echo_config(cfg, Path(args.out) if args.out else None)
    data = read_dataset(args.data, compact=True)
    modes = tuple(args.modes.split(",")) if args.modes else None
    if modes:
        unknown = [m for m in modes if m not in ABLATION_ROWS]
        if unknown:
            raise UsageError(f"unknown ablation modes {unknown}")
    rows = ablate(data, cfg, modes=modes, train_fraction=args.train_fraction)
    print(ablation_table(rows))
    if args.out:
        table = [{"mode": r["mode"], "row": r["row"], **r["report"].to_dict()} for r in rows.values()]
        Path(args.out).write_text(json.dumps(table, indent=1) + "\n")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .quantserve import load_model, quantize_fp16, save_model

    params = load_model(args.model)
    _echo_config(params.config)
    counts: dict = {}
    q = quantize_fp16(params, counts)
    size32 = Path(args.model).stat().st_size
    size16 = save_model(args.out, q)
    print(json.dumps({"fp32_bytes": size32, "fp16_bytes": size16, "ratio": size16 / size32,
                      "saturated": counts["saturated"]}))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .fusion import build_model
    from .quantserve import bench_inference, load_model

    if args.model:
        params = load_model(args.model)
    else:
        params = build_model(_resolve_config(args))
    _echo_config(params.config)
    result = bench_inference(params, n_windows=args.windows, repetitions=args.repetitions,
                             seed=args.seed or 0)
    print(json.dumps(result, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .quantserve import load_model
    from .server import parse_endpoint, serve_stream

    try:
        parse_endpoint(args.endpoint)
    except ValueError as e:
        raise UsageError(str(e)) from e
    _echo_config(load_model(args.model).config)
    counts = serve_stream(args.model, args.endpoint, args.threshold, args.queue_size, args.overflow)
    if counts:
        print(json.dumps(counts), file=sys.stderr)
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="turntake", description="Multimodal turn-taking prediction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus with planted cues")
    _add_config_flags(p)
    p.add_argument("--duration", type=float, default=3600.0, help="session length in seconds")
    p.add_argument("--profile", choices=("en", "ko", "mixed"), default="mixed",
                   help="language profile setting the default class balance")
    p.add_argument("--class1-fraction", type=float, default=None, help="override the class1 share")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="label windows from an utterance log")
    _add_config_flags(p)
    p.add_argument("--log", required=True, help="utterance log (JSONL)")
    p.add_argument("--duration", type=float, default=None, help="session length (default: last end, rounded up)")
    p.add_argument("--silence", type=float, default=0.2, help="IPU merge threshold in seconds")
    p.add_argument("--short", type=float, default=0.5, help="minimum duration of a turn-taking segment")
    p.add_argument("--online", action="store_true", help="use the streaming labeler")
    p.add_argument("--out", required=True, help="labels (JSONL)")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("windows", help="assemble a window dataset file")
    _add_config_flags(p)
    p.add_argument("--frames", required=True, help="feature stream (JSONL)")
    p.add_argument("--log", required=True, help="utterance log (JSONL)")
    p.add_argument("--labels", default=None, help="labels (JSONL); computed from the log when absent")
    p.add_argument("--duration", type=float, default=None, help="session length for labeling")
    p.add_argument("--text", default=None, help="precomputed text embedding sidecar")
    p.add_argument("--out", required=True, help="dataset file (.cttk)")
    p.set_defaults(func=cmd_windows)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset file (.cttk)")
    p.add_argument("--eval-data", default=None, help="held-out dataset (default: last 20%% of --data)")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train share when splitting --data")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.add_argument("--ablation", choices=tuple(ABLATION_ROWS), default=None, help="ablation mode")
    p.add_argument("--checkpoint", default=None, help="write a resumable checkpoint here after each epoch")
    p.add_argument("--resume", default=None, help="resume from a checkpoint")
    p.add_argument("--history", default=None, help="per-epoch history (default: <out>.history.jsonl)")
    p.add_argument("--out", required=True, help="model file (.cttm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a dataset")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="evaluate every window or only the held-out tail")
    p.add_argument("--train-fraction", type=float, default=0.8, help="split point for --split test")
    p.add_argument("--threshold", type=float, default=None, help="decision threshold (default: model config)")
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every ablation row")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    p.add_argument("--modes", default=None, help="comma-separated subset of modes")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train share of --data")
    p.add_argument("--out", default=None, help="write the table as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("quantize", help="convert a model to fp16 weights")
    p.add_argument("--model", required=True, help="fp32 model file")
    p.add_argument("--out", required=True, help="fp16 model file")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bench", help="measure single-window inference latency")
    _add_config_flags(p)
    p.add_argument("--model", default=None, help="model file (default: a fresh model from the config)")
    p.add_argument("--windows", type=int, default=20, help="distinct random windows")
    p.add_argument("--repetitions", type=int, default=5, help="passes over the windows")
    p.add_argument("--out", default=None, help="write the result as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="stream predictions from newline-delimited records")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--endpoint", default="stdio", help="stdio or tcp://host:port")
    p.add_argument("--threshold", type=float, default=None, help="decision threshold (default: model config)")
    p.add_argument("--queue-size", type=int, default=64, help="bounded input queue length")
    p.add_argument("--overflow", choices=("drop_oldest", "block"), default="drop_oldest",
                   help="what a full queue does with new input")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"turntake {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _data_errors() as e:
        print(f"turntake {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"turntake {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

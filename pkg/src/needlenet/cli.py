"""Single command-line entry point.

Subcommands: gen-data, train-cnn, train-crnn, sweep-timesteps, eval, params,
stream, report. All commands are reproducible under --seed; when omitted, a
seed is drawn from entropy and printed. Heavy imports happen after flag
validation so --threads can cap the BLAS pool.
"""

import argparse
import os
import secrets
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_ERROR = 1


class CliError(Exception):
    def __init__(self, category, message, code):
        super().__init__(message)
        self.category = category
        self.code = code


def _fail(category, message, code):
    raise CliError(category, message, code)


def _build_parser():
    parser = argparse.ArgumentParser(prog="needlenet", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default: available cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=Path, default=None,
                       help="key = value file; explicit flags override")
        return p

    p = add("gen-data", "generate a synthetic labeled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips-per-section", type=int, default=None)
    p.add_argument("--preset", choices=["paper", "desk"], default="paper")

    p = add("params", "print the exact parameter count for an architecture")
    p.add_argument("--arch", required=True, help="e.g. 16-32-32, or 'crnn'")
    p.add_argument("--timesteps", type=int, default=30)

    p = add("train-cnn", "train a light CNN")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--out", type=Path, required=True, help="output checkpoint (.nsnet)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = add("train-crnn", "train a CRNN on a frozen CNN base")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base-checkpoint", type=Path, required=True)
    p.add_argument("--timesteps", type=int, default=30)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = add("sweep-timesteps", "train CRNNs over a list of time steps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--base-checkpoint", type=Path, required=True)
    p.add_argument("--timesteps", required=True, help="comma-separated, e.g. 10,20,30")
    p.add_argument("--out", type=Path, required=True, help="output CSV")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = add("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = add("stream", "real-time replay inference with a CRNN checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset root (directory replay)")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--clip", help="restrict replay to one clip id")
    p.add_argument("--raw", type=Path, help="raw-frame pipe input ('-' for stdin)")
    p.add_argument("--fps", type=float, default=30.0, help="0 = as fast as possible")
    p.add_argument("--out", type=Path, help="per-session report CSV")

    p = add("report", "metrics CSVs plus rendered figures for a split")
    p.add_argument("--checkpoint", type=Path, required=True, help="light CNN checkpoint")
    p.add_argument("--crnn-checkpoint", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--history", type=Path, default=None, help="training history CSV")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _load_config(path):
    if path is None:
        return {}
    if not path.is_file():
        _fail("missing-file", f"config file not found: {path}", EXIT_MISSING_FILE)
    out = {}
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            _fail("bad-config", f"{path}:{i}: expected 'key = value'", EXIT_BAD_DATA)
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _resolve(args, config, name, cast, default):
    """Flag wins over config file wins over default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    if name in config:
        try:
            return cast(config[name])
        except ValueError:
            _fail("bad-config", f"config key {name}: bad value {config[name]!r}", EXIT_BAD_DATA)
    return default


def _resolve_seed(args, config):
    seed = _resolve(args, config, "seed", int, None)
    if seed is None:
        seed = secrets.randbelow(2**31)
        print(f"seed {seed}")
    return seed


def _load_dataset(path):
    from .data import DatasetError, load_dataset

    if not Path(path).is_dir():
        _fail("missing-file", f"dataset root not found: {path}", EXIT_MISSING_FILE)
    try:
        return load_dataset(path)
    except DatasetError as exc:
        _fail("bad-data", str(exc), EXIT_BAD_DATA)


def _load_checkpoint(path):
    from .models import CheckpointError, load_checkpoint

    if not Path(path).is_file():
        _fail("missing-file", f"checkpoint not found: {path}", EXIT_MISSING_FILE)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        _fail("checkpoint", str(exc), EXIT_CHECKPOINT)


def _train_config(args, config, seed):
    from .trainer import TrainConfig

    kwargs = dict(seed=seed)
    epochs = _resolve(args, config, "epochs", int, None)
    lr = _resolve(args, config, "lr", float, None)
    batch = _resolve(args, config, "batch", int, None)
    if epochs is not None:
        kwargs["epochs"] = epochs
    if lr is not None:
        kwargs["lr"] = lr
    if batch is not None:
        kwargs["batch_size"] = batch
        kwargs["window_batch"] = batch
    return TrainConfig(**kwargs)


def _cmd_gen_data(args, config):
    from .synth import SynthConfig, generate_corpus

    seed = _resolve_seed(args, config)
    base = SynthConfig.desk(seed) if args.preset == "desk" else SynthConfig(seed=seed)
    fields = {}
    for key, value in config.items():
        if key == "seed":
            continue
        if not hasattr(base, key):
            _fail("bad-config", f"unknown SynthConfig key {key!r}", EXIT_BAD_DATA)
        current = getattr(base, key)
        if isinstance(current, tuple):
            fields[key] = tuple(int(v) for v in value.replace(",", " ").split())
        else:
            fields[key] = type(current)(float(value)) if not isinstance(current, int) \
                else int(value)
    if args.clips_per_section is not None:
        fields["clips_per_section"] = args.clips_per_section
    from dataclasses import replace

    cfg = replace(base, **fields)
    args.out.mkdir(parents=True, exist_ok=True)
    entries = generate_corpus(cfg, args.out)
    counts = {}
    for _, split_name, _, _ in entries:
        counts[split_name] = counts.get(split_name, 0) + 1
    print(f"wrote {len(entries)} clips to {args.out} "
          + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def _cmd_params(args, config):
    from .models import CrnnSpec, LightCnnSpec, count_parameters

    if args.arch.lower() == "crnn":
        print(count_parameters(CrnnSpec(time_steps=args.timesteps)))
        return EXIT_OK
    try:
        spec = LightCnnSpec.parse(args.arch)
    except ValueError as exc:
        _fail("bad-flag", str(exc), EXIT_USAGE)
    print(count_parameters(spec))
    return EXIT_OK


def _cmd_train_cnn(args, config):
    from .models import LightCnnSpec, save_checkpoint
    from .trainer import TrainingDivergedError, train_cnn, write_history

    seed = _resolve_seed(args, config)
    try:
        spec = LightCnnSpec.parse(args.arch)
    except ValueError as exc:
        _fail("bad-flag", str(exc), EXIT_USAGE)
    split = _load_dataset(args.data)
    cfg = _train_config(args, config, seed)
    try:
        best, history = train_cnn(
            spec, split, cfg,
            progress=lambda r: print(
                f"epoch {r.epoch} loss {r.train_loss:.4f} val_acc {r.val_acc:.4f}"),
        )
    except TrainingDivergedError as exc:
        _fail("diverged", str(exc), EXIT_ERROR)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, args.out)
    write_history(history, args.out.with_suffix(".history.csv"))
    print(f"best epoch {best.epoch} val_acc {best.val_acc:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_train_crnn(args, config):
    from .models import save_checkpoint
    from .trainer import TrainingDivergedError, train_crnn, write_history

    seed = _resolve_seed(args, config)
    base = _load_checkpoint(args.base_checkpoint)
    split = _load_dataset(args.data)
    cfg = _train_config(args, config, seed)
    from .models import CheckpointError

    try:
        best, history = train_crnn(
            base, args.timesteps, split, cfg,
            progress=lambda r: print(
                f"epoch {r.epoch} loss {r.train_loss:.4f} val_acc {r.val_acc:.4f}"),
        )
    except CheckpointError as exc:
        _fail("checkpoint", str(exc), EXIT_CHECKPOINT)
    except TrainingDivergedError as exc:
        _fail("diverged", str(exc), EXIT_ERROR)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, args.out)
    write_history(history, args.out.with_suffix(".history.csv"))
    print(f"best epoch {best.epoch} val_acc {best.val_acc:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_sweep(args, config):
    from .models import CheckpointError
    from .trainer import TrainingDivergedError, sweep_crnn_timesteps

    seed = _resolve_seed(args, config)
    try:
        t_list = [int(t) for t in args.timesteps.split(",") if t.strip()]
        if not t_list:
            raise ValueError
    except ValueError:
        _fail("bad-flag", f"bad --timesteps list {args.timesteps!r}", EXIT_USAGE)
    base = _load_checkpoint(args.base_checkpoint)
    split = _load_dataset(args.data)
    cfg = _train_config(args, config, seed)
    try:
        rows, selected = sweep_crnn_timesteps(base, t_list, split, cfg)
    except CheckpointError as exc:
        _fail("checkpoint", str(exc), EXIT_CHECKPOINT)
    except TrainingDivergedError as exc:
        _fail("diverged", str(exc), EXIT_ERROR)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write("time_steps,val_acc\n")
        for t, acc in rows:
            fh.write(f"{t},{acc:.6f}\n")
    for t, acc in rows:
        print(f"T={t} val_acc {acc:.4f}")
    print(f"selected T={selected}")
    return EXIT_OK


def _cmd_eval(args, config):
    from .models import model_from_checkpoint
    from .report import evaluate_clips, infiltration_ranksum, predict_clips, write_eval_csv

    ckpt = _load_checkpoint(args.checkpoint)
    split = _load_dataset(args.data)
    clips = split.clips(args.split)
    if not clips:
        _fail("bad-data", f"split {args.split!r} has no clips", EXIT_BAD_DATA)
    model = model_from_checkpoint(ckpt)
    preds = predict_clips(model, clips, ckpt.kind)
    results = evaluate_clips(clips, preds)
    write_eval_csv(results, clips, args.out, ckpt.kind)
    cm = results["confusion"]
    print(cm.to_text())
    s = results["summary"]
    print(f"frame_accuracy {cm.accuracy():.4f}")
    print(f"acc_max {s.acc_max:.4f} acc_min {s.acc_min:.4f} acc_avg {s.acc_avg:.4f}")
    rs = infiltration_ranksum(clips, results["per_clip_accuracy"])
    if rs is not None:
        print(f"ranksum_infiltration U {rs[0]:.1f} p {rs[1]:.4f}")
    return EXIT_OK


def _cmd_stream(args, config):
    from .models import model_from_checkpoint
    from .stream import (
        ReplaySource,
        StreamError,
        StreamSession,
        format_record,
        read_raw_frames,
        session_report,
    )

    ckpt = _load_checkpoint(args.checkpoint)
    if ckpt.kind != "crnn":
        _fail("checkpoint", "stream needs a CRNN checkpoint", EXIT_CHECKPOINT)
    model = model_from_checkpoint(ckpt)
    reports = []
    try:
        if args.raw is not None:
            fh = sys.stdin.buffer if str(args.raw) == "-" else open(args.raw, "rb")
            session = StreamSession(model, source=str(args.raw))
            with fh:
                for idx, frame in read_raw_frames(fh):
                    state, probs, latency = session.infer(frame)
                    print(format_record(idx, state, probs, latency))
            reports.append(("raw", session_report(session)))
        else:
            if args.data is None:
                _fail("bad-flag", "stream needs --data or --raw", EXIT_USAGE)
            split = _load_dataset(args.data)
            clips = split.clips(args.split)
            if args.clip is not None:
                clips = [c for c in clips if c.clip_id == args.clip]
                if not clips:
                    _fail("bad-data", f"clip {args.clip!r} not in split", EXIT_BAD_DATA)
            for clip in clips:
                session = StreamSession(model, source=clip.clip_id)
                source = ReplaySource(clip, fps=args.fps)
                for idx, frame in source:
                    state, probs, latency = session.infer(frame, label=clip.labels[idx])
                    print(format_record(idx, state, probs, latency))
                rep = session_report(session)
                print(f"# clip {clip.clip_id} acc {rep.accuracy:.4f} "
                      f"fps {rep.achieved_fps:.1f} p95_ms {rep.p95_latency_ms:.2f} "
                      f"drops {source.drops}")
                reports.append((clip.clip_id, rep))
    except StreamError as exc:
        _fail("stream", str(exc), EXIT_BAD_DATA)
    if args.out is not None and reports:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            fh.write("source,frames,accuracy,mean_latency_ms,p95_latency_ms,"
                     "mean_preprocess_ms,mean_network_ms,achieved_fps,transitions\n")
            for name, rep in reports:
                fh.write(f"{name},{rep.frames},{rep.accuracy:.6f},"
                         f"{rep.mean_latency_ms:.3f},{rep.p95_latency_ms:.3f},"
                         f"{rep.mean_preprocess_ms:.3f},{rep.mean_network_ms:.3f},"
                         f"{rep.achieved_fps:.2f},{len(rep.transitions)}\n")
    return EXIT_OK


def _cmd_report(args, config):
    from .models import model_from_checkpoint
    from .report import (
        evaluate_clips,
        predict_clips,
        render_confusion,
        render_history,
        render_timeline,
        write_eval_csv,
    )
    from .trainer import read_history

    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    split = _load_dataset(args.data)
    clips = split.clips(args.split)
    if not clips:
        _fail("bad-data", f"split {args.split!r} has no clips", EXIT_BAD_DATA)

    models = []
    ckpt = _load_checkpoint(args.checkpoint)
    models.append((ckpt.kind, model_from_checkpoint(ckpt)))
    if args.crnn_checkpoint is not None:
        ck2 = _load_checkpoint(args.crnn_checkpoint)
        if ck2.kind != "crnn":
            _fail("checkpoint", "--crnn-checkpoint must hold a CRNN", EXIT_CHECKPOINT)
        models.append((ck2.kind, model_from_checkpoint(ck2)))

    predictions = {}
    for kind, model in models:
        preds = predict_clips(model, clips, kind)
        predictions[kind] = preds
        results = evaluate_clips(clips, preds)
        write_eval_csv(results, clips, outdir, kind)
        render_confusion(results["confusion"], outdir / f"{kind}_confusion.png",
                         title=f"{kind.upper()} test acc {results['confusion'].accuracy():.3f}")
        print(f"{kind} frame_accuracy {results['confusion'].accuracy():.4f}")
    if args.history is not None:
        if not args.history.is_file():
            _fail("missing-file", f"history not found: {args.history}", EXIT_MISSING_FILE)
        render_history(read_history(args.history), outdir / "history.png")
    sample = clips[0]
    named = [(kind.upper(), predictions[kind][sample.clip_id]) for kind, _ in models]
    render_timeline(sample.labels, named, outdir / f"timeline_{sample.clip_id}.png",
                    title=f"Clip {sample.clip_id}")
    print(f"report written to {outdir}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "params": _cmd_params,
    "train-cnn": _cmd_train_cnn,
    "train-crnn": _cmd_train_crnn,
    "sweep-timesteps": _cmd_sweep,
    "eval": _cmd_eval,
    "stream": _cmd_stream,
    "report": _cmd_report,
}


def dispatch(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        config = _load_config(args.config)
        return _COMMANDS[args.command](args, config)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

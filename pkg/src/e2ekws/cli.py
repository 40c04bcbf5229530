"""Command-line driver: gen-data, estimate-hmm, train-ce, train-e2e, eval, decode.

Exit status is 0 on success, 1 when inputs or configuration fail validation,
and 2 for any other runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .dnn import CheckpointError, ShapeError, load_checkpoint, save_checkpoint
from .evaluation import EvalConfig, EvaluationError, decode_utterance, evaluate, write_report
from .features import FeatureError
from .hmm import HmmError, estimate_hmm, load_hmm, save_hmm
from .synth import CorpusError, SynthConfig, generate_corpus, load_corpus
from .trainer import TrainConfig, TrainingError, pretrain_ce, train_e2e, write_train_log

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("e2ekws")

VALIDATION_ERRORS = (
    CorpusError, TrainingError, EvaluationError, HmmError, CheckpointError,
    FeatureError, ShapeError, FileNotFoundError, ValueError, KeyError, TypeError,
)


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Read a JSON or TOML config with optional ``synth``, ``train`` and ``eval`` tables."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a table/object at the top level")
    unknown = set(data) - {"synth", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return data


def _build(cls, section: dict, **overrides):
    names = {f.name for f in fields(cls)}
    bad = set(section) - names
    if bad:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(bad))}")
    obj = cls(**section)
    extra = {k: v for k, v in overrides.items() if v is not None}
    return replace(obj, **extra) if extra else obj


def _echo(out: Path, name: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}_config.json", "w") as f:
        json.dump(payload, f, indent=1, default=str)


def _require(path, what):
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _corpus(args, need_labels=False, need_windows=False):
    corpus = load_corpus(_require(args.manifest, "manifest"))
    if not corpus:
        raise CorpusError(f"manifest {args.manifest} lists no utterances")
    if need_labels and any(u.state_labels is None for u in corpus):
        raise CorpusError("every utterance needs a labels_path for this command")
    if need_windows and not any(u.keyword_window is not None for u in corpus):
        raise EvaluationError("no keyword windows in manifest")
    return corpus


def cmd_gen_data(args, cfg):
    synth = _build(SynthConfig, cfg.get("synth", {}))
    seed = args.seed if args.seed is not None else synth.seed
    out = Path(args.out)
    _echo(out, "gen-data", {"synth": asdict(synth), "n": args.n, "seed": seed, "prefix": args.prefix})
    path = generate_corpus(synth, args.n, out, seed=seed, prefix=args.prefix)
    log.info("wrote %d utterances to %s", args.n, path)


def cmd_estimate_hmm(args, cfg):
    corpus = _corpus(args, need_labels=True)
    hmm = estimate_hmm([u.state_labels for u in corpus], smoothing=args.smoothing)
    out = Path(args.out)
    _echo(out, "estimate-hmm", {"manifest": str(args.manifest), "smoothing": args.smoothing})
    save_hmm(hmm, out / "hmm.json")
    log.info("wrote %s", out / "hmm.json")


def _train_config(args, cfg, phase):
    tc = _build(TrainConfig, cfg.get("train", {}), phase=phase, seed=args.seed, epochs=args.epochs)
    if args.lr is not None:
        tc = replace(tc, **{"ce_learning_rate" if phase == "ce" else "learning_rate": args.lr})
    return tc


def cmd_train_ce(args, cfg):
    tc = _train_config(args, cfg, "ce")
    corpus = _corpus(args, need_labels=True)
    init = load_checkpoint(args.init) if args.init else None
    out = Path(args.out)
    _echo(out, "train-ce", {"train": asdict(tc), "manifest": str(args.manifest), "init": args.init})
    params, rows = pretrain_ce(corpus, tc, init)
    save_checkpoint(params, out / "ce.kwse")
    write_train_log(rows, out / "ce_log.csv")
    log.info("wrote %s", out / "ce.kwse")


def cmd_train_e2e(args, cfg):
    tc = _train_config(args, cfg, "e2e")
    corpus = _corpus(args, need_windows=True)
    hmm = load_hmm(_require(args.hmm, "HMM file"))
    init = load_checkpoint(_require(args.init, "initial checkpoint"))
    out = Path(args.out)
    _echo(out, "train-e2e", {"train": asdict(tc), "manifest": str(args.manifest),
                             "hmm": str(args.hmm), "init": str(args.init)})
    params, rows = train_e2e(corpus, init, hmm, tc)
    save_checkpoint(params, out / "e2e.kwse")
    write_train_log(rows, out / "e2e_log.csv")
    log.info("wrote %s", out / "e2e.kwse")


def _eval_config(cfg):
    return _build(EvalConfig, cfg.get("eval", {}))


def cmd_eval(args, cfg):
    ec = _eval_config(cfg)
    corpus = _corpus(args, need_windows=True)
    hmm = load_hmm(_require(args.hmm, "HMM file"))
    params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    _echo(out, f"{args.prefix}eval", {"eval": asdict(ec), "manifest": str(args.manifest),
                                     "hmm": str(args.hmm), "checkpoint": str(args.checkpoint)})
    report = evaluate(params, hmm, corpus, ec)
    write_report(report, out, args.prefix)
    log.info("FRR %.4f at %.1f FA/hr, mean TP IOU %.3f, state accuracy %.3f",
             report.frr_at_operating_fa, ec.operating_fa_per_hour, report.mean_tp_iou,
             report.state_accuracy)


def cmd_decode(args, cfg):
    ec = _eval_config(cfg)
    corpus = _corpus(args)
    hmm = load_hmm(_require(args.hmm, "HMM file"))
    params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    _echo(out, "decode", {"eval": asdict(ec), "manifest": str(args.manifest),
                          "hmm": str(args.hmm), "checkpoint": str(args.checkpoint)})
    with open(out / "detections.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "start_frame", "end_frame"])
        for utt in corpus:
            dets = decode_utterance(params, hmm, utt, ec.delta, ec.nms_frames, ec.decoder_init)
            for d in sorted(dets, key=lambda d: d.start_frame):
                if d.score >= args.threshold:
                    w.writerow([utt.id, repr(float(d.score)), d.start_frame, d.end_frame])
    log.info("wrote %s", out / "detections.csv")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file with synth/train/eval sections")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = bit-reproducible)")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="e2ekws", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--prefix", default="utt")
    g.set_defaults(func=cmd_gen_data)

    h = sub.add_parser("estimate-hmm", parents=[common], help="estimate HMM statistics from labels")
    h.add_argument("--manifest", required=True)
    h.add_argument("--smoothing", type=float, default=1.0)
    h.set_defaults(func=cmd_estimate_hmm)

    c = sub.add_parser("train-ce", parents=[common], help="frame cross-entropy training")
    c.add_argument("--manifest", required=True)
    c.add_argument("--init", help="optional checkpoint to start from")
    c.set_defaults(func=cmd_train_ce)

    e = sub.add_parser("train-e2e", parents=[common], help="hinge-loss fine-tuning")
    e.add_argument("--manifest", required=True)
    e.add_argument("--hmm", required=True)
    e.add_argument("--init", required=True)
    e.set_defaults(func=cmd_train_e2e)

    v = sub.add_parser("eval", parents=[common], help="DET curve, localization and confusion")
    v.add_argument("--manifest", required=True)
    v.add_argument("--hmm", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--prefix", default="", help="prefix for report file names")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("decode", parents=[common], help="per-utterance detections to CSV")
    d.add_argument("--manifest", required=True)
    d.add_argument("--hmm", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--threshold", type=float, default=float("-inf"))
    d.set_defaults(func=cmd_decode)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        stream=sys.stderr, format="%(message)s", force=True)
    try:
        cfg = load_config(args.config)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            args.func(args, cfg)
    except VALIDATION_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status 2
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())

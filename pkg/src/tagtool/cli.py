"""Command-line entry points.

Exit codes: 0 success, 1 configuration problem, 2 data problem,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import RunConfig, desk_config, load_config, paper_config
from .errors import ConfigError, DataError, NumericalError


class _Parser(argparse.ArgumentParser):
    """Routes argparse usage errors through the config error path."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", choices=("desk", "paper"),
                   help="built-in profile when no --config is given")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override the output directory")


def _load(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.profile == "paper":
        cfg = paper_config()
    else:
        cfg = desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg.validate()


def build_parser() -> _Parser:
    parser = _Parser(prog="tagtool",
                     description="synthetic tagged-MR cohorts and "
                                 "sequential cardiac motion recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a cohort with datapoints "
                                        "and QC reports")
    _add_common(p)

    p = sub.add_parser("clip", help="clip a sequence file into datapoints")
    _add_common(p)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("qc", help="run quality rules on a sequence file")
    _add_common(p)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", help="write the report here as well")

    p = sub.add_parser("train", help="train on the cohort's training split")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-epochs", type=int,
                   help="stop after this many epochs this invocation")

    p = sub.add_parser("recover", help="recover one subject's cycle")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="score a predicted sequence against "
                                    "ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="run the ablation matrix")
    _add_common(p)
    p.add_argument("--out")

    p = sub.add_parser("export-mesh", help="write one frame's wall layer "
                                           "as an OBJ mesh")
    _add_common(p)
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--layer", type=int)
    p.add_argument("--out", required=True)

    return parser


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "simulate":
        cfg = _load(args)
        manifest = pipeline.run_simulate(cfg)
        print(f"wrote {len(manifest['subjects'])} subjects to {cfg.out_dir}")
    elif cmd == "clip":
        cfg = _load(args)
        spamm = pipeline.run_clip(cfg, args.sequence, args.out)
        print(f"wrote {spamm.n_records} records to {args.out}")
    elif cmd == "qc":
        _load(args)
        report = pipeline.run_qc(args.sequence, args.out)
        print(report.to_text())
    elif cmd == "train":
        cfg = _load(args)
        _, rows = pipeline.run_train(cfg, resume_path=args.resume,
                                     max_epochs=args.max_epochs)
        last = rows[-1] if rows else None
        print(f"trained {len(rows)} epochs"
              + (f", final loss {last['loss']:.6g}" if last else ""))
    elif cmd == "recover":
        cfg = _load(args)
        pred = pipeline.run_recover(cfg, args.checkpoint, args.subject,
                                    args.out)
        print(f"recovered {pred.t_frames} frames for {args.subject}")
    elif cmd == "eval":
        cfg = _load(args)
        report, _ = pipeline.run_eval(cfg, args.pred, args.truth, args.out)
        print(f"MAE {report.mae_mm:.6g} mm, mean SI {report.si_mean:.6g}")
    elif cmd == "ablate":
        cfg = _load(args)
        rows = pipeline.run_ablate(cfg, args.out)
        print(f"ablation wrote {len(rows)} rows")
    elif cmd == "export-mesh":
        _load(args)
        pipeline.run_export_mesh(args.sequence, args.frame, args.layer,
                                 args.out)
        print(f"wrote {args.out}")
    else:                                    # pragma: no cover
        raise ConfigError(f"unknown command {cmd!r}")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

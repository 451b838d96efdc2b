"""Command-line entry point: ``rpcnet [global flags] <command> ...``.

Exit codes: 0 success, 1 input error (bad files, configs, codes), 2 numerical
failure (diverged training, undefined statistic).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import InputError, NumericalError
from .experiments import (SWEEPS, ExperimentPlan, preprocess, run_ablation, run_bench, run_evaluate, run_train,
                          synthesize)
from .kinematics import default_model, load_model

log = logging.getLogger("rpcnet")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"config file {p} must hold a JSON object")
    return cfg


def _model(cfg: dict):
    return load_model(cfg["model"]) if cfg.get("model") else default_model()


def _plan(args, cfg: dict) -> ExperimentPlan:
    plan_cfg = {k: v for k, v in cfg.items() if k != "model"}
    if getattr(args, "variant", None):
        plan_cfg["variants"] = args.variant
    if getattr(args, "subject", None):
        plan_cfg["subjects"] = args.subject
    return ExperimentPlan.from_config(plan_cfg, args.data, args.out, args.seed)


def cmd_synth(args, cfg):
    spec_kw = dict(cfg.get("synthetic", {}))
    paths = synthesize(Path(args.out), _model(cfg), args.subjects, args.trials, args.duration,
                       args.first_subject, **spec_kw)
    print(f"wrote {len(paths)} trials under {args.out}")


def cmd_preprocess(args, cfg):
    manifest = preprocess(args.inputs, Path(args.out), _model(cfg), cfg)
    doc = json.loads(manifest.read_text())
    for t in doc["trials"]:
        print(f"{t['subject_id']}/{t['trial_id']}: length {t['length']}, aligned {t['aligned']}, "
              f"IK error {t['ik_error_mm']:.3f} mm")
    print(f"manifest: {manifest}")


def _print_scores(results):
    for (tag, seed), rows in results.items():
        for sid, s in rows:
            label = tag if seed is None else f"{tag} seed {seed}"
            print(f"{label} {sid}: MD {s.md:.2f} mm, MPCC {100 * s.mpcc:.1f}%")


def cmd_train(args, cfg):
    results = run_train(_plan(args, cfg), _model(cfg), evaluate=not args.no_evaluate)
    _print_scores(results)


def cmd_evaluate(args, cfg):
    results = run_evaluate(_plan(args, cfg), _model(cfg), args.checkpoints, oracle=args.oracle)
    _print_scores(results)


def cmd_ablate(args, cfg):
    _, lines = run_ablation(_plan(args, cfg), _model(cfg), args.sweep)
    for line in lines:
        print(line)


def cmd_bench(args, cfg):
    rep, path = run_bench(args.checkpoint, Path(args.out), args.iterations, args.threads or 1,
                          args.seed if args.seed is not None else 0)
    print(f"inference time {rep.mean_ms:.4f} +/- {rep.std_ms:.4f} ms over {rep.iterations} passes "
          f"({rep.threads} thread(s); {rep.hardware})")
    print(f"report: {path}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON plan/config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the plan's seeds and split seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="rpcnet", parents=[common],
                                description="EMG-to-hand-kinematics experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic subjects")
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--trials", type=int, default=6)
    s.add_argument("--duration", type=float, default=450.0, help="seconds per trial")
    s.add_argument("--first-subject", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="EMG envelopes and IK angles for trial files")
    s.add_argument("inputs", nargs="+", help="trial files or directories")
    s.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("train", cmd_train, "train (and score) every variant and seed"),
                                 ("evaluate", cmd_evaluate, "score saved checkpoints on the test trials"),
                                 ("ablate", cmd_ablate, "run an ablation sweep with statistics")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("data", help="directory of processed trials")
        s.add_argument("--subject", action="append", help="restrict to these subjects (repeatable)")
        if name != "ablate":
            s.add_argument("--variant", action="append", help="variant code, e.g. full, B, I-B, full+E-3 (repeatable)")
        if name == "train":
            s.add_argument("--no-evaluate", action="store_true")
        if name == "evaluate":
            s.add_argument("--checkpoints", help="checkpoint directory (default: <out>/checkpoints)")
            s.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
        if name == "ablate":
            s.add_argument("--sweep", choices=SWEEPS, required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("bench", parents=[common], help="time single forward passes of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--iterations", type=int, default=100_000)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out", "."), ("threads", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        with threadpool_limits(limits=args.threads):
            args.func(args, cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line front end.

Subcommands:

    synth      generate a synthetic embedding bundle
    manifest   emit attribute_requests.json for an extractor to fill
    train      run the incremental session loop on a bundle
    eval       rebuild reports from a checkpoint (any mode, any beta)
    report     print a human-readable summary of a report.json

Exit codes: 0 success, 2 configuration or usage error, 3 numerical
failure, 4 artifact mismatch (unreadable bundle, checkpoint, or report).

Thread count for BLAS backends honors OTCIL_THREADS (default 1 so runs
are reproducible across machines); set it before heavy imports happen.
"""

import argparse
import json
import os
import sys


def _pin_threads() -> None:
    n = os.environ.get("OTCIL_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otcil")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic embedding bundle")
    sp.add_argument("--out", required=True, help="bundle directory to write")
    sp.add_argument("--classes", type=int, default=20)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--patches", type=int, default=16)
    sp.add_argument("--attrs", type=int, default=5)
    sp.add_argument("--noise", type=float, default=0.3)
    sp.add_argument("--seed", type=int, default=1993)

    mp = sub.add_parser("manifest", help="emit attribute requests for a bundle")
    mp.add_argument("--bundle", required=True)
    mp.add_argument("--out", default="attribute_requests.json")
    mp.add_argument("--n-diverse", type=int, default=3)

    tp = sub.add_parser("train", help="run the incremental session loop")
    tp.add_argument("--bundle", required=True)
    tp.add_argument("--out", required=True, help="run directory for artifacts")
    tp.add_argument("--config", help="key = value config file")
    tp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry (repeatable)")
    tp.add_argument("--resume", action="store_true",
                    help="continue from the last session checkpoint in --out")

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--bundle", required=True)
    ep.add_argument("--out", required=True)
    ep.add_argument("--mode", default="full")
    ep.add_argument("--beta", action="append", type=float, default=[],
                    help="fusion weight (repeatable; default: trained value)")

    rp = sub.add_parser("report", help="summarize a run directory")
    rp.add_argument("--run", required=True, help="directory holding report.json")
    return p


def _resolve_config(args) -> "RunConfig":
    from .config import RunConfig, apply_setting, load_config, validate_config
    cfg = RunConfig()
    if args.config:
        if not os.path.isfile(args.config):
            raise ValueError(f"config file not found: {args.config}")
        cfg = load_config(args.config, base=cfg)
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key.strip(), value.strip())
    cfg.bundle = args.bundle
    cfg.out = args.out
    validate_config(cfg)
    return cfg


def _write_text(path: str, text: str) -> None:
    from .corpus import _atomic_write
    _atomic_write(path, text.encode("utf-8"))


def _append_log_lines(path: str, lines) -> None:
    # Appends then flushes once per session; partial sessions never hit disk.
    with open(path, "a", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def cmd_synth(args) -> int:
    from .corpus import SyntheticSpec, generate_synthetic, write_bundle
    spec = SyntheticSpec(num_classes=args.classes, per_class=args.per_class,
                         dim=args.dim, patches=args.patches,
                         attributes_per_class=args.attrs, noise_scale=args.noise)
    bundle = generate_synthetic(spec, seed=args.seed)
    write_bundle(bundle, args.out)
    print(f"wrote bundle: {args.out} ({len(bundle.samples)} samples, "
          f"{len(bundle.classes)} classes, d={bundle.dimension})")
    return 0


def cmd_manifest(args) -> int:
    from .corpus import load_bundle
    from .semantics import build_visual_sample_sets, emit_attribute_manifest
    bundle = load_bundle(args.bundle)
    sets = build_visual_sample_sets(bundle, bundle.class_ids(), args.n_diverse)
    entries = emit_attribute_manifest(bundle, sets, args.out)
    print(f"wrote {args.out} ({len(entries)} attribute requests)")
    return 0


def _checkpoint_path(out_dir: str, session: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"session_{session:02d}.otcil")


def cmd_train(args) -> int:
    from .config import config_lines, config_to_dict
    from .corpus import load_bundle, split_tasks
    from .evaluator import (evaluate_stage, run_full_evaluation, train_test_split,
                            write_report, zero_shot_report)
    from .state import init_state, load_state, save_state
    from .trainer import train_task

    cfg = _resolve_config(args)
    bundle = load_bundle(cfg.bundle)
    os.makedirs(cfg.out, exist_ok=True)
    _write_text(os.path.join(cfg.out, "resolved_config.txt"), config_lines(cfg))

    schedule = split_tasks(bundle.class_ids(), cfg.base_size, cfg.increment,
                           cfg.trainer.seed)
    train_rows, test_rows = train_test_split(bundle, cfg.trainer.seed)
    train_samples = [bundle.samples[i] for i in train_rows]
    test_samples = [bundle.samples[i] for i in test_rows]

    if cfg.mode == "zero_shot":
        # Baseline only: no sessions, a single stage over every class.
        report = zero_shot_report(bundle, bundle.class_ids(), test_samples,
                                  cfg.trainer.temperature)
        write_report(report, cfg.out, config_dict=config_to_dict(cfg))
        print(f"zero-shot baseline: accuracy={report.last_accuracy:.2f}")
        return 0

    start_session = 0
    progress = None
    if args.resume:
        done = 0
        while os.path.isfile(_checkpoint_path(cfg.out, done + 1)):
            done += 1
        if done == 0:
            raise ValueError(f"--resume found no session checkpoints under {cfg.out}")
        state, progress = load_state(_checkpoint_path(cfg.out, done),
                                     expect_d=bundle.dimension)
        # The stored config is authoritative on resume; command line
        # overrides are ignored so the run stays self-consistent.
        start_session = done
        print(f"resuming after session {done}")
    else:
        state = init_state(bundle.dimension, cfg.trainer)

    stage_lines = list(progress["stages"]) if progress else []
    log_path = os.path.join(cfg.out, "train_log.jsonl")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)

    total = len(schedule.sessions)
    limit = cfg.sessions_limit if cfg.sessions_limit > 0 else total
    for idx in range(start_session, min(total, limit)):
        session_classes = schedule.sessions[idx]
        log = train_task(state, bundle, session_classes, train_samples,
                         n_diverse=cfg.n_diverse)
        result = evaluate_stage(state, bundle, test_samples, state.num_sessions,
                                cfg.mode, beta=cfg.trainer.local_weight)
        stage_lines.append(result)
        _append_log_lines(log_path, log.lines)
        save_state(state, _checkpoint_path(cfg.out, state.num_sessions),
                   progress={"stages": stage_lines})
        print(f"session {state.num_sessions}/{total}: "
              f"classes={len(session_classes)} acc={result['accuracy']:.2f} "
              f"nonconverged={log.nonconverged}")

    if state.num_sessions < total:
        print(f"stopped after {state.num_sessions}/{total} sessions (sessions_limit)")
        return 0

    save_state(state, os.path.join(cfg.out, "final.otcil"),
               progress={"stages": stage_lines})
    report = run_full_evaluation(state, bundle, test_samples, cfg.mode,
                                 beta=cfg.trainer.local_weight)
    write_report(report, cfg.out, config_dict=config_to_dict(cfg))
    for beta in cfg.eval_betas:
        sweep = run_full_evaluation(state, bundle, test_samples, cfg.mode, beta=beta)
        write_report(sweep, os.path.join(cfg.out, f"beta_{beta:g}"),
                     config_dict=config_to_dict(cfg))
    f_txt = "n/a" if report.forgetting is None else f"{report.forgetting:.2f}"
    print(f"done: A_mean={report.average_accuracy:.2f} "
          f"A_last={report.last_accuracy:.2f} F={f_txt}")
    return 0


def cmd_eval(args) -> int:
    from .config import MODES
    from .corpus import load_bundle
    from .evaluator import run_full_evaluation, train_test_split, write_report
    from .state import load_state

    if args.mode not in MODES:
        raise ValueError(f"unknown mode {args.mode!r} (choose from {', '.join(MODES)})")
    bundle = load_bundle(args.bundle)
    state, _ = load_state(args.checkpoint, expect_d=bundle.dimension)
    _, test_rows = train_test_split(bundle, state.config.seed)
    test_samples = [bundle.samples[i] for i in test_rows]
    betas = args.beta if args.beta else [state.config.local_weight]
    multi = len(betas) > 1
    for beta in betas:
        report = run_full_evaluation(state, bundle, test_samples, args.mode, beta=beta)
        out_dir = os.path.join(args.out, f"beta_{beta:g}") if multi else args.out
        write_report(report, out_dir)
        f_txt = "n/a" if report.forgetting is None else f"{report.forgetting:.2f}"
        print(f"mode={args.mode} beta={beta:g}: A_mean={report.average_accuracy:.2f} "
              f"A_last={report.last_accuracy:.2f} F={f_txt} -> {out_dir}")
    return 0


def cmd_report(args) -> int:
    path = os.path.join(args.run, "report.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no report.json under {args.run}")
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    print(f"mode={data['mode']} beta={data['beta']:g} "
          f"sessions={data['num_sessions']}")
    print("session  classes  accuracy")
    for row in data["sessions"]:
        print(f"{row['session']:>7}  {row['num_classes']:>7}  {row['accuracy']:>8.2f}")
    forgetting = data["forgetting"]
    f_txt = "n/a" if forgetting is None else f"{forgetting:.2f}"
    print(f"average={data['average_accuracy']:.2f} "
          f"last={data['last_accuracy']:.2f} forgetting={f_txt}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "manifest": cmd_manifest,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _pin_threads()
    args = _build_parser().parse_args(argv)
    from .corpus import BundleError
    from .projectors import CheckpointError
    try:
        return _COMMANDS[args.command](args)
    except (BundleError, CheckpointError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, KeyError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Single entry point: run experiments, evaluate the model, replay logs.

    sentinel run <config|preset> [--paper-scale] [--seed N] [--rundir PATH]
                 [--monitoring NAME]
    sentinel model (--scm-liveness | --pcm-liveness | --scm-readiness |
                    --pcm-readiness | --infer-latency) [-N n] [-I s] [-L s]
                    [--tc s] [--tr s] [--ts s]
    sentinel replay <events.ndjson|rundir> [--write]

``SENTINEL_RUNDIR`` provides the default run directory root.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import harness, measures, model
from .errors import ReplayError, SentinelError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sentinel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config", help="path to a TOML config, or a bundled preset name")
    run.add_argument("--paper-scale", action="store_true",
                     help="use unscaled delays/window/repetitions")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--rundir", default=None)
    run.add_argument("--monitoring", default=None,
                     help="select a different monitoring block from the config")

    mdl = sub.add_parser("model", help="evaluate the detection-time predictions")
    group = mdl.add_mutually_exclusive_group(required=True)
    group.add_argument("--scm-liveness", action="store_true")
    group.add_argument("--pcm-liveness", action="store_true")
    group.add_argument("--scm-readiness", action="store_true")
    group.add_argument("--pcm-readiness", action="store_true")
    group.add_argument("--infer-latency", action="store_true")
    mdl.add_argument("-N", type=int, default=None, help="probes required")
    mdl.add_argument("-I", type=float, default=None, help="probe interval (s)")
    mdl.add_argument("-L", type=float, default=None, help="probe/signal latency (s)")
    mdl.add_argument("-T", type=float, default=None, help="measured detection time (s)")
    mdl.add_argument("--tc", type=float, default=None, help="container ready time (s)")
    mdl.add_argument("--tr", type=float, default=None, help="first readiness probe time (s)")
    mdl.add_argument("--ts", type=float, default=None, help="monitor start time (s)")

    replay = sub.add_parser("replay", help="recompute a summary from an event log")
    replay.add_argument("events", help="events.ndjson file or run directory")
    replay.add_argument("--write", action="store_true",
                        help="rewrite summary.csv/validation.csv next to the input")
    return parser


def _require(args: argparse.Namespace, parser: argparse.ArgumentParser, **names) -> list:
    values = []
    for flag, value in names.items():
        if value is None:
            parser.error(f"model: missing required flag {flag}")
        values.append(value)
    return values


def cmd_model(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.scm_liveness:
        (latency,) = _require(args, parser, **{"-L": args.L})
        quantity, value = "failure detection (signal-based)", model.predict_failure_scm(latency)
    elif args.pcm_liveness:
        n, interval, latency = _require(
            args, parser, **{"-N": args.N, "-I": args.I, "-L": args.L}
        )
        quantity, value = (
            "failure detection (poll-based)",
            model.predict_failure_pcm(n, interval, latency),
        )
    elif args.scm_readiness:
        tc, ts, latency = _require(
            args, parser, **{"--tc": args.tc, "--ts": args.ts, "-L": args.L}
        )
        quantity, value = (
            "readiness detection (signal-based)",
            model.predict_readiness_scm(tc, ts, latency),
        )
    elif args.pcm_readiness:
        tc, tr, n, interval, latency = _require(
            args, parser,
            **{"--tc": args.tc, "--tr": args.tr, "-N": args.N, "-I": args.I, "-L": args.L},
        )
        quantity, value = (
            "readiness detection (poll-based)",
            model.predict_readiness_pcm(tc, tr, n, interval, latency),
        )
    else:
        measured, n, interval = _require(
            args, parser, **{"-T": args.T, "-N": args.N, "-I": args.I}
        )
        quantity, value = (
            "inferred probe latency",
            model.infer_probe_latency(measured, n, interval),
        )
    print(f"{quantity}: {value:g} s")
    return 0


def _resolve_config(args: argparse.Namespace) -> config_mod.RunConfig:
    path = Path(args.config)
    if path.exists():
        config = config_mod.load_config(path)
    else:
        config = config_mod.load_preset(args.config)
    if args.monitoring is not None:
        config = dataclasses.replace(config, monitoring=args.monitoring)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config.validate()


def cmd_run(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    rundir = args.rundir or os.environ.get("SENTINEL_RUNDIR")
    if rundir is None:
        rundir = Path("runs") / config.name
    summaries = harness.run_experiment(config, rundir, paper_scale=args.paper_scale)
    excluded = [s for s in summaries if s.note.startswith("excluded")]
    print(f"run complete: {len(summaries)} repetition(s), artifacts in {rundir}")
    for summary in summaries:
        print(
            f"  rep {summary.repetition}: total={summary.total_requests} "
            f"failed={summary.failed} restarts={summary.restarts} "
            f"availability={summary.availability_ready_s}"
            + (f" [{summary.note}]" if summary.note else "")
        )
    if excluded:
        print(f"warning: {len(excluded)} repetition(s) excluded", file=sys.stderr)
        return 1
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    target = Path(args.events)
    if target.is_file():
        run = measures.load_run_records(target)
        missing = measures.check_terminal_events(run)
        if missing:
            raise ReplayError(f"{target}: truncated log; missing {', '.join(missing)}")
        summaries = [measures.summarize_repetition(run)]
        validation = measures.validation_rows(run)
        base = target.parent
    else:
        summaries, validation = measures.replay_run(target)
        base = target
    header_and_rows = [measures.SUMMARY_HEADER]
    for summary in summaries:
        header_and_rows.append(measures.summary_line(str(summary.repetition), summary))
    print("\n".join(header_and_rows))
    if args.write:
        measures.write_summary_csv(base / "summary.csv", summaries)
        measures.write_validation_csv(base / "validation.csv", validation)
        print(f"wrote {base / 'summary.csv'} and {base / 'validation.csv'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "model":
            return cmd_model(args, parser)
        return cmd_replay(args)
    except SentinelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

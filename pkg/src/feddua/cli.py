"""Command line entry point.

    feddua run --config exp.cfg [--set key=value ...] [--threads n] [--out dir]
    feddua calibrate --config exp.cfg [--set key=value ...] [--out prior.json]
    feddua verify-logs --ledger out/verdicts.log

Exit status is 0 on success, 2 on a configuration error and 1 on any other
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import build_setup, calibrate, emit_outputs, final_accuracy, load_config, parse_config, run_experiment
from .numcore import ConfigError
from .server import check_ledger

log = logging.getLogger("feddua")


def _config(args):
    if args.config:
        return load_config(args.config, args.set)
    return parse_config("", args.set)


def _cmd_run(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, threads=args.threads)
    out = args.out or cfg.out_dir
    emit_outputs(result, out)
    flagged = sum(r.num_flagged for r in result.records)
    print(
        f"{len(result.records)} rounds, final accuracy {final_accuracy(result.records):.4f}, "
        f"{flagged} flagged uploads; outputs in {out}"
    )
    return 0


def _cmd_calibrate(args) -> int:
    cfg = _config(args)
    prior = calibrate(build_setup(cfg), threads=args.threads)
    out = args.out or "prior.json"
    prior.save(out)
    print(f"prior for {prior.strategy}: {prior.horizon} rounds x {len(prior.volumes)} volumes -> {out}")
    return 0


def _cmd_verify_logs(args) -> int:
    problems = check_ledger(args.ledger)
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} problem(s) in {args.ledger}", file=sys.stderr)
        return 1
    print(f"{args.ledger}: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddua", description="Federated training with data-volume verification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (
        ("run", _cmd_run, "run one experiment and write its outputs"),
        ("calibrate", _cmd_calibrate, "calibrate an alpha prior and save it as JSON"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value config file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for client training")
        sp.add_argument("--out", help="output directory (run) or prior file (calibrate)")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("verify-logs", help="sanity-check a verdicts.log ledger")
    sp.add_argument("--ledger", required=True)
    sp.set_defaults(fn=_cmd_verify_logs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("configuration error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit status 1
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``riskmeta run|report|check``."""

import argparse
import logging
import os
import sys

from . import harness, selfcheck


def _seed_list(text):
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a seed list: {text!r}") from None


def _cmd_run(args):
    try:
        with open(args.config) as f:
            sections = harness.read_sections(f.read())
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return harness.EXIT_CONFIG
    name = os.path.splitext(os.path.basename(args.config))[0]
    if args.grid:
        points = harness.expand_grid(sections)
    else:
        points = [("", sections)]
    configs, problems = [], []
    for tag, sec in points:
        try:
            configs.append((tag, harness.build_config(sec, name=name)))
        except harness.ConfigError as e:
            problems.extend((f"[{tag}] " if tag else "") + p for p in e.problems)
    if problems:
        print("invalid config:\n  " + "\n  ".join(problems), file=sys.stderr)
        return harness.EXIT_CONFIG
    code = harness.EXIT_OK
    for tag, cfg in configs:
        base = args.out or cfg.out or os.path.join("runs", cfg.name)
        out_dir = os.path.join(base, tag) if tag else base
        _, rc = harness.run(cfg, out_dir, seeds=args.seeds)
        summary = os.path.join(out_dir, "summary.txt")
        if os.path.exists(summary):
            with open(summary) as f:
                print((tag + "\n" if tag else "") + f.read())
        code = max(code, rc)
    return code


def _cmd_report(args):
    path = os.path.join(args.dir, "results.csv")
    try:
        rows = harness.read_results(path)
        print(harness.compare_report(rows, args.dir), end="")
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def _cmd_check(args):
    return 0 if selfcheck.run_checks(seed=args.seed) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="riskmeta", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per seed and method")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--grid", action="store_true", help="expand comma-separated values into a run matrix")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides the config)")
    r.set_defaults(fn=_cmd_run)

    rep = sub.add_parser("report", help="rebuild the summary of a finished run directory")
    rep.add_argument("dir")
    rep.set_defaults(fn=_cmd_report)

    c = sub.add_parser("check", help="run the oracle and invariant self-checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=_cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

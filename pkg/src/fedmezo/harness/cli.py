"""Command line entry point: run, sweep, diagnose, verify, plot."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_config

WORKERS_ENV = "FEDMEZO_WORKERS"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load(path, out=None):
    cfg = load_config(path, check_lr=False)
    changes = {}
    if os.environ.get(WORKERS_ENV):
        try:
            changes["workers"] = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ConfigError(f"invalid '{WORKERS_ENV}': expected an integer") from None
    if out:
        changes["output_dir"] = out
    return cfg.replace(**changes) if changes else cfg


def _warn(cfg, problem):
    from .runner import check_ceiling

    for w in check_ceiling(cfg, problem):
        print(f"warning: {w}", file=sys.stderr)


def cmd_run(args):
    from .runner import build_problem, run

    cfg = _load(args.config, args.out)
    problem = build_problem(cfg)
    _warn(cfg, problem)
    res = run(cfg, problem=problem)
    s = res.summary
    print(f"wrote {res.out_dir}; final loss {s['final_loss_mean']} +/- {s['final_loss_std']}")
    return EXIT_FAIL if any(s["errors"]) else EXIT_OK


def cmd_sweep(args):
    from .runner import parse_values, sweep

    cfg = _load(args.config, args.out)
    values = parse_values(args.axis, args.values)
    status = sweep(cfg, args.axis, values)
    for name, st in status.items():
        print(f"{name}: {st}")
    return EXIT_OK if all(st == "ok" for st in status.values()) else EXIT_FAIL


def cmd_diagnose(args):
    from .runner import build_problem, diagnose

    cfg = _load(args.config)
    problem = build_problem(cfg)
    _warn(cfg, problem)
    text = json.dumps(diagnose(cfg, problem), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_verify(args):
    from .verify import report, verify

    goldens = None
    if args.goldens:
        try:
            with open(args.goldens) as fh:
                goldens = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read golden file: {exc}") from None
    rep = report(verify(goldens))
    for c in rep["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}  measured={c['measured']}  expected={c['expected']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rep, fh, indent=2, sort_keys=True)
    return EXIT_OK if rep["passed"] else EXIT_FAIL


def cmd_plot(args):
    from .plotdata import emit_plot_data

    try:
        path = emit_plot_data(args.dir, args.out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="fedmezo", description="Federated zeroth-order fine-tuning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="override output_dir")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("sweep", help="one run per value along an axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True, help="mu | H | N | splitter | lr | strategy")
    s.add_argument("--values", required=True, help="comma separated; lr accepts '0.5x' for multiples of the ceiling")
    s.add_argument("--out", help="override output_dir")
    s.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("diagnose", help="theory constants and ceilings for a config")
    d.add_argument("config")
    d.add_argument("--out", help="also write the JSON report here")
    d.set_defaults(fn=cmd_diagnose)

    v = sub.add_parser("verify", help="golden and statistical self-checks")
    v.add_argument("--goldens", help="golden values file (defaults to the packaged one)")
    v.add_argument("--json", help="write the report as JSON")
    v.set_defaults(fn=cmd_verify)

    pl = sub.add_parser("plot", help="emit tidy plot-data CSV for a run or sweep directory")
    pl.add_argument("dir")
    pl.add_argument("--out")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

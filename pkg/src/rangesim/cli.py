"""Command line entry point: ``rangesim run|sweep|validate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .scenarios import ScenarioConfig, ScenarioValidationError, emit_report, run_scenario, sweep

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _parse_values(axis: str, text: str) -> list:
    fields = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}
    kind = fields.get(axis, "float").replace("Optional[", "").rstrip("]")
    out = []
    for item in (t.strip() for t in text.split(",")):
        if not item:
            continue
        if kind == "bool":
            if item.lower() not in ("true", "false"):
                raise ScenarioValidationError([f"{axis}: expected true/false, got {item!r}"])
            out.append(item.lower() == "true")
        elif kind == "int":
            try:
                out.append(int(item))
            except ValueError:
                raise ScenarioValidationError([f"{axis}: expected an integer, got {item!r}"]) from None
        else:
            try:
                out.append(float(item))
            except ValueError:
                raise ScenarioValidationError([f"{axis}: expected a number, got {item!r}"]) from None
    if not out:
        raise ScenarioValidationError(["--values is empty"])
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rangesim", description="Secure broadcast ranging simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    run.add_argument("--out", required=True)
    sw = sub.add_parser("sweep", help="run one scenario per value of a config field")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma-separated list")
    sw.add_argument("--out", required=True)
    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("--config", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ScenarioConfig.from_json(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "run":
            if args.seed is not None and args.seed < 0:
                raise ScenarioValidationError(["--seed must be >= 0"])
            report = run_scenario(cfg, seed=args.seed)
            files = emit_report(report, args.out)
            mae = "n/a" if report.mae is None else f"{report.mae:.4f} m"
            print(f"mae {mae}, failure rate {report.failure_rate:.4f}; wrote {files['aggregate'].parent}")
            return EXIT_OK
        values = _parse_values(args.axis, args.values)
        reports = sweep(cfg, args.axis, values)
        files = emit_report(reports, args.out, axis=args.axis, values=values)
        for v, r in zip(values, reports):
            mae = "n/a" if r.mae is None else f"{r.mae:.4f}"
            print(f"{args.axis}={v}: mae {mae} m, failure rate {r.failure_rate:.4f}")
        print(f"wrote {files['aggregate'].parent}")
        return EXIT_OK
    except ScenarioValidationError as e:
        print(str(e), file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit code 1
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 1 environment or I/O failure, 2 invalid input.
Every flag can also be set through an environment variable named
``BRACELET_<FLAG>`` (upper case, dashes as underscores), e.g.
``BRACELET_SERVER=127.0.0.1:8080``.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from . import rfid
from .cloud import CloudClient, CloudService, JournalError, ServiceError, make_server
from .device import RiskLevel
from .distance import fit_path_loss, read_calibration_csv
from .errors import BraceletError, ScenarioValidationError
from .simulator import Scenario, run

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2
SCHEMA_PATH = Path(__file__).parent / "data" / "scenario.schema.json"


def _env(flag: str, default=None):
    return os.environ.get("BRACELET_" + flag.upper().replace("-", "_"), default)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_output(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _locate(problem: str, text: str) -> str:
    """Prefix a validation message with the line of the agent it names."""
    m = re.match(r"agent '([^']*)'", problem)
    if m:
        hit = re.search(r'"id"\s*:\s*"%s"' % re.escape(m.group(1)), text)
        if hit:
            return f"line {text.count(chr(10), 0, hit.start()) + 1}: {problem}"
    return problem


# -- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    try:
        text = Path(args.scenario).read_text()
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read scenario: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        return _fail(EXIT_INVALID, f"{args.scenario}: line {exc.lineno}: {exc.msg}")
    if isinstance(data, dict):
        if args.mode:
            data["matching_mode"] = args.mode
        if args.seed is not None:
            data["seed"] = int(args.seed)
    try:
        scenario = Scenario.from_dict(data)
    except ScenarioValidationError as exc:
        print(f"error: {args.scenario} is not a valid scenario "
              f"(schema: {SCHEMA_PATH})", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {args.scenario}: {_locate(problem, text)}", file=sys.stderr)
        return EXIT_INVALID

    report = run(scenario)
    out = report.risk_timeline_csv() if args.format == "csv" else report.to_json()
    try:
        _write_output(args.output, out)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write report: {exc}")
    summary = report.score
    print(f"precision={summary['precision']:.4f} recall={summary['recall']:.4f}",
          file=sys.stdout if args.output not in (None, "-") else sys.stderr)
    return EXIT_OK


def cmd_serve(args) -> int:
    host, _, port = args.listen.rpartition(":")
    try:
        service = CloudService(args.journal, threshold_s=float(args.threshold_s))
        # Touch the journal so an unwritable path fails before binding.
        with open(args.journal, "a"):
            pass
    except (JournalError, OSError) as exc:
        return _fail(EXIT_IO, f"journal unusable: {exc}")
    try:
        server = make_server(service, host or "127.0.0.1", int(port))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_IO, f"cannot listen on {args.listen}: {exc}")
    bound = "%s:%d" % server.server_address[:2]
    print(f"serving on {bound} ({len(service.index.groups)} groups replayed)",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_fit_model(args) -> int:
    try:
        samples = read_calibration_csv(args.calibration)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read calibration: {exc}")
    except ValueError as exc:
        return _fail(EXIT_INVALID, str(exc))
    try:
        model = fit_path_loss(samples)
    except BraceletError as exc:
        return _fail(EXIT_INVALID, str(exc))
    try:
        _write_output(args.output, model.to_json() + "\n")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write model: {exc}")
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        request = json.loads(Path(args.contacts).read_text())
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read contacts: {exc}")
    except json.JSONDecodeError as exc:
        return _fail(EXIT_INVALID, f"{args.contacts}: line {exc.lineno}: {exc.msg}")
    if isinstance(request, list):
        request = {"contacts": request}
    if args.threshold_s is not None:
        request["threshold_s"] = float(args.threshold_s)
    if not args.server:
        return _fail(EXIT_INVALID, "--server is required")
    try:
        decision = CloudClient(args.server).check(request)
    except ServiceError as exc:
        return _fail(EXIT_INVALID, f"server rejected request ({exc.status}): {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot reach {args.server}: {exc}")
    _write_output(args.output, json.dumps(decision, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_rfid(args) -> int:
    try:
        if args.action == "encode":
            payload = rfid.encode_risk(RiskLevel.parse(args.risk), int(args.epoch))
            print(payload.hex())
            return EXIT_OK
        decoded = rfid.decode_risk(bytes.fromhex(args.hex))
        risk, epoch = decoded
        result = {"risk": risk.label, "level": int(risk), "issued_epoch": epoch}
        if args.action == "access":
            policy = rfid.AccessPolicy(RiskLevel.parse(args.max_risk),
                                       int(args.max_age_epochs))
            verdict = rfid.access_decision(decoded, int(args.now_epoch), policy)
            result["granted"] = verdict.granted
            result["reason"] = verdict.reason
        print(json.dumps(result, sort_keys=True))
        return EXIT_OK
    except (BraceletError, ValueError) as exc:
        return _fail(EXIT_INVALID, str(exc))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bracelet",
        description="Privacy-preserving distancing bracelet toolkit.",
        epilog=f"Scenario JSON schema: {SCHEMA_PATH}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scenario and write its report",
                       epilog=f"Scenario JSON schema: {SCHEMA_PATH}")
    p.add_argument("--scenario", default=_env("scenario"), required=not _env("scenario"))
    p.add_argument("--output", default=_env("output", "-"))
    p.add_argument("--mode", choices=("local", "cloud"), default=_env("mode"))
    p.add_argument("--seed", type=int, default=_env("seed"))
    p.add_argument("--format", choices=("json", "csv"), default=_env("format", "json"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the infected-tag service")
    p.add_argument("--listen", default=_env("listen", "127.0.0.1:8080"))
    p.add_argument("--journal", default=_env("journal"), required=not _env("journal"))
    p.add_argument("--threshold-s", default=_env("threshold-s", 900.0), type=float)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("fit-model", help="fit a path-loss model from a CSV")
    p.add_argument("--calibration", default=_env("calibration"),
                   required=not _env("calibration"))
    p.add_argument("--output", default=_env("output", "-"))
    p.set_defaults(func=cmd_fit_model)

    p = sub.add_parser("check", help="ask a server for an exposure decision")
    p.add_argument("--contacts", default=_env("contacts"), required=not _env("contacts"))
    p.add_argument("--server", default=_env("server"))
    p.add_argument("--threshold-s", type=float, default=_env("threshold-s"))
    p.add_argument("--output", default=_env("output", "-"))
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("rfid", help="encode, decode or evaluate an RFID risk payload")
    actions = p.add_subparsers(dest="action", required=True)
    enc = actions.add_parser("encode")
    enc.add_argument("risk", help="NoRisk|LowRisk|HighRisk or 0|1|2")
    enc.add_argument("epoch", type=int)
    dec = actions.add_parser("decode")
    dec.add_argument("hex")
    acc = actions.add_parser("access")
    acc.add_argument("hex")
    acc.add_argument("--now-epoch", type=int, required=True)
    acc.add_argument("--max-risk", default="LowRisk")
    acc.add_argument("--max-age-epochs", type=int, default=96)
    p.set_defaults(func=cmd_rfid)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

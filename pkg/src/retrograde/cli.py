"""Command-line front end: map, run, trace, probe, stage.

Only payload output is written to stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from typing import Optional

from . import addr_map
from .debug_port import open_session, probe_self
from .errors import (
    BackendError,
    DecodeError,
    ImageError,
    MapFormatError,
    MapMismatch,
    SpawnFailed,
    StageFailed,
    StepFailed,
    TraceRefused,
    UnsupportedPlatform,
)
from .exec_director import DEFAULT_RULES, DirectionPolicy, run_directed, run_rewriter
from .payload_image import build_elf, load_payload, memfd_stage, native_supported, parse_rgf, RGF_MAGIC, unstage

log = logging.getLogger("retrograde")

EXIT_INPUT = 2
EXIT_MAP_MISMATCH = 3
EXIT_BACKEND = 4
EXIT_STEP = 5
EXIT_CONTROLLER_STOPPED = 6
BACKEND_ENV = "RETROGRADE_BACKEND"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    backend: str
    mode: str
    payload: str
    map_source: str = "auto"
    quirk_paper_indexing: bool = False
    report_path: Optional[str] = None

    def __post_init__(self):
        if self.backend not in ("native", "emu"):
            raise CliError(f"unknown backend {self.backend!r}", EXIT_INPUT)
        if self.backend == "native" and not native_supported():
            raise CliError("native backend needs a Linux x86-64 host", EXIT_BACKEND)


def _read_payload(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CliError(f"cannot read payload: {exc}", EXIT_INPUT) from exc
    if not data:
        raise CliError(f"{path}: empty payload", EXIT_INPUT)
    return data


def _load_image(path):
    try:
        return load_payload(_read_payload(path))
    except ImageError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from exc


def _read_map(path):
    try:
        with open(path, encoding="utf-8") as f:
            return addr_map.import_map(f.read())
    except OSError as exc:
        raise CliError(f"cannot read map: {exc}", EXIT_INPUT) from exc
    except MapFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from exc


def _address_map(image, payload_path, map_source):
    if map_source != "auto":
        return _read_map(map_source)
    try:
        return addr_map.build_map(image)
    except DecodeError as exc:
        sidecar = payload_path + ".map.json"
        if os.path.exists(sidecar):
            log.info("decoder stopped (%s); using %s", exc, sidecar)
            return _read_map(sidecar)
        raise CliError(f"{payload_path}: cannot build address map: {exc}", EXIT_INPUT) from exc


def _emit_report(report, report_path):
    if report_path is None:
        return
    text = report.to_jsonl()
    if report_path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(text)


def _exit_for(report):
    if report.controller_stopped:
        return EXIT_CONTROLLER_STOPPED
    if report.killed_signal is not None:
        return 128 + report.killed_signal
    return report.exit_code


def _mirror(output):
    sys.stdout.buffer.write(output)
    sys.stdout.buffer.flush()


def _backend_error_code(exc):
    if isinstance(exc, StepFailed):
        return EXIT_STEP
    if isinstance(exc, (UnsupportedPlatform, SpawnFailed, TraceRefused)):
        return EXIT_BACKEND
    return EXIT_STEP


def cmd_map(payload, out=None):
    image = _load_image(payload)
    try:
        amap = addr_map.build_map(image)
    except DecodeError as exc:
        raise CliError(f"{payload}: {exc}", EXIT_INPUT) from exc
    text = addr_map.dump_map(amap)
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    print(f"{len(amap)} records", file=sys.stderr)
    return 0


def cmd_run(config: RunConfig):
    image = _load_image(config.payload)
    amap = _address_map(image, config.payload, config.map_source)
    addresses = addr_map.resolve(amap, image.text_start)
    policy = DirectionPolicy(config.mode, addresses, quirk_paper_indexing=config.quirk_paper_indexing)
    try:
        with open_session(image, config.backend) as session:
            report = run_directed(session, policy)
    except MapMismatch as exc:
        raise CliError(str(exc), EXIT_MAP_MISMATCH) from exc
    except BackendError as exc:
        raise CliError(str(exc), _backend_error_code(exc)) from exc
    _mirror(report.output)
    _emit_report(report, config.report_path)
    log.info("%s run finished: %d steps, exit %s", config.mode, len(report.steps), report.exit)
    return _exit_for(report)


def cmd_trace(payload, rules="default", backend="emu", report_path=None):
    if backend == "native" and not native_supported():
        raise CliError("native backend needs a Linux x86-64 host", EXIT_BACKEND)
    image = _load_image(payload)
    try:
        with open_session(image, backend) as session:
            report = run_rewriter(session, DEFAULT_RULES if rules == "default" else ())
    except BackendError as exc:
        raise CliError(str(exc), _backend_error_code(exc)) from exc
    _mirror(report.output)
    _emit_report(report, report_path)
    log.info("trace finished: %d rewrites, exit %s", report.rewrites, report.exit)
    return _exit_for(report)


def cmd_probe():
    try:
        verdict = probe_self()
    except UnsupportedPlatform as exc:
        raise CliError(str(exc), EXIT_BACKEND) from exc
    print(verdict)
    sys.stdout.flush()
    return 0 if verdict == "free" else 1


def cmd_stage(payload):
    if not sys.platform.startswith("linux"):
        raise CliError("in-memory staging needs a Linux host", EXIT_BACKEND)
    try:
        with open(payload, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CliError(f"cannot read payload: {exc}", EXIT_INPUT) from exc
    try:
        if data[:4] == RGF_MAGIC:
            data = build_elf(parse_rgf(data))
        path = memfd_stage(data)
    except (StageFailed, ImageError) as exc:
        raise CliError(f"{payload}: {exc}", EXIT_INPUT) from exc
    except UnsupportedPlatform as exc:
        raise CliError(str(exc), EXIT_BACKEND) from exc
    log.info("staged at %s", path)
    sys.stdout.flush()
    try:
        proc = subprocess.run([path], env={})
    except OSError as exc:
        raise CliError(f"cannot execute staged payload: {exc}", EXIT_INPUT) from exc
    finally:
        unstage(path)
    return proc.returncode if proc.returncode >= 0 else 128 - proc.returncode


def build_parser():
    parser = argparse.ArgumentParser(prog="retrograde", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("map", parents=[verbose], help="write the address map of a payload")
    p.add_argument("payload")
    p.add_argument("-o", "--out")

    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=("native", "emu"))
    backend.add_argument("--report", help="write the JSON-lines report here ('-' for stdout)")

    p = sub.add_parser("run", parents=[verbose, backend], help="single-step a payload forward or in reverse")
    p.add_argument("payload")
    p.add_argument("--mode", choices=("forward", "reverse"), default="forward")
    p.add_argument("--map", dest="map_file")
    p.add_argument("--quirk-paper-indexing", action="store_true",
                   help="use the original listing's off-by-two reverse index arithmetic")

    p = sub.add_parser("trace", parents=[verbose, backend], help="run a payload under the syscall rewriter")
    p.add_argument("payload")
    p.add_argument("--rules", choices=("default", "none"), default="default")

    sub.add_parser("probe", parents=[verbose], help="check whether a tracer already holds this process")

    p = sub.add_parser("stage", parents=[verbose], help="run a payload from a memory-backed descriptor")
    p.add_argument("payload")
    return parser


def _default_backend(flag):
    return flag or os.environ.get(BACKEND_ENV) or "emu"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="retrograde: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.command == "map":
            return cmd_map(args.payload, args.out)
        if args.command == "run":
            config = RunConfig(_default_backend(args.backend), args.mode, args.payload,
                               args.map_file or "auto", args.quirk_paper_indexing, args.report)
            return cmd_run(config)
        if args.command == "trace":
            backend = _default_backend(args.backend)
            RunConfig(backend, "forward", args.payload)
            return cmd_trace(args.payload, args.rules, backend, args.report)
        if args.command == "probe":
            return cmd_probe()
        if args.command == "stage":
            return cmd_stage(args.payload)
    except CliError as exc:
        print(f"retrograde: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

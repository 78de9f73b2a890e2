"""Command line entry point.

Settings are resolved from lowest to highest precedence: built-in defaults,
an INI run-config file (``--config``, section ``[run]``), environment
variables prefixed ``CAUSALKV_`` (e.g. ``CAUSALKV_ENGINE=cclo``) and finally
command line flags.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import fields
from typing import Optional, Sequence

from .bench import WorkloadConfig, report, run_experiment
from .checker import check_trace, report_json
from .cluster import SCENARIOS, run_scenario
from .config import ENGINES, ROT_MODES, ConfigError
from .transport import dump_trace

ENV_PREFIX = "CAUSALKV_"

# setting name -> (type, flag); the names double as INI keys and env suffixes
SETTINGS: dict[str, tuple[type, str]] = {
    "engine": (str, "--engine"),
    "rot_mode": (str, "--rot-mode"),
    "w": (float, "--w"),
    "p": (int, "--p"),
    "z": (float, "--z"),
    "b": (int, "--b"),
    "clients": (int, "--clients"),
    "partitions": (int, "--partitions"),
    "dcs": (int, "--dcs"),
    "keyspace": (int, "--keyspace"),
    "seed": (int, "--seed"),
    "duration": (float, "--duration"),
    "backend": (str, "--backend"),
    "delay_law": (str, "--delay-law"),
    "service_ms": (float, "--service-ms"),
    "trace_out": (str, "--trace-out"),
    "report": (str, "--report"),
    "scenario": (str, "--scenario"),
    "check": (bool, "--check"),
}

DEFAULTS = {"report": "human", "trace_out": None, "scenario": None, "check": False}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(name: str, raw: str):
    typ = SETTINGS[name][0]
    try:
        return _parse_bool(raw) if typ is bool else typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causalkv", description="Causally consistent KV store simulator and benchmark.")
    ap.add_argument("--config", help="INI run-config file with a [run] section")
    ap.add_argument("--engine", choices=ENGINES)
    ap.add_argument("--rot-mode", choices=ROT_MODES)
    ap.add_argument("--w", type=float, help="write ratio #PUT/(#PUT+#reads)")
    ap.add_argument("--p", type=int, help="partitions touched per ROT")
    ap.add_argument("--z", type=float, help="zipf parameter, 0 is uniform")
    ap.add_argument("--b", type=int, help="value size in bytes")
    ap.add_argument("--clients", type=int, help="closed-loop clients per DC")
    ap.add_argument("--partitions", type=int)
    ap.add_argument("--dcs", type=int)
    ap.add_argument("--keyspace", type=int, help="keys per partition")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--duration", type=float, help="simulated ms (sim) or ms of wall time (socket)")
    ap.add_argument("--backend", choices=("sim", "socket"))
    ap.add_argument("--delay-law", choices=("uniform", "fixed", "adversarial"))
    ap.add_argument("--service-ms", type=float, help="per-message CPU cost at partitions")
    ap.add_argument("--trace-out", metavar="PATH", help="write the trace as JSON lines")
    ap.add_argument("--report", choices=("csv", "jsonl", "human"))
    ap.add_argument("--scenario", choices=SCENARIOS, help="replay a scripted scenario instead of a workload")
    ap.add_argument("--check", action="store_const", const=True, default=None, help="run the consistency checker on the trace")
    return ap


def resolve(args: argparse.Namespace, environ: Optional[dict] = None) -> dict:
    """Merge defaults, config file, environment and flags."""
    environ = os.environ if environ is None else environ
    base = WorkloadConfig()
    settings: dict = {f.name: getattr(base, f.name) for f in fields(WorkloadConfig) if f.name in SETTINGS}
    settings.update(DEFAULTS)
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise ConfigError(f"cannot read config file {args.config!r}")
        if parser.has_section("run"):
            for key, raw in parser.items("run"):
                if key not in SETTINGS:
                    raise ConfigError(f"unknown config key {key!r}")
                settings[key] = _convert(key, raw)
    for name in SETTINGS:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            settings[name] = _convert(name, raw)
    for name in SETTINGS:
        val = getattr(args, name, None)
        if val is not None:
            settings[name] = val
    return settings


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        s = resolve(args)
        if s["scenario"]:
            res = run_scenario(s["scenario"], s["engine"], s["rot_mode"])
            if s["trace_out"]:
                dump_trace(res.trace, s["trace_out"])
            out = {"scenario": res.name, "engine": res.engine, "returned": {}, "report": res.report}
            for c in res.report.get("readers", []):
                out["returned"][c] = [[list(v) if v else None for v in r] for r in res.returned(c)]
            sys.stdout.write(report_json(out) + "\n")
            return 0
        wl = {k: v for k, v in s.items() if k not in DEFAULTS}
        cfg = WorkloadConfig(**wl)
        trace_level = "full" if s["check"] else "ops" if s["trace_out"] else "none"
        result = run_experiment(cfg, trace_level=trace_level)
    except ConfigError as exc:
        print(f"causalkv: {exc}", file=sys.stderr)
        return 2
    if s["trace_out"]:
        dump_trace(result.trace, s["trace_out"])
    sys.stdout.write(report([result.metrics], s["report"]))
    if s["check"]:
        rep = check_trace(result.trace, engine=cfg.engine, latency=True, visibility=cfg.heartbeats)
        sys.stdout.write(report_json(rep) + "\n")
        if not all(sec["pass"] for name, sec in rep.items() if isinstance(sec, dict) and "pass" in sec):
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

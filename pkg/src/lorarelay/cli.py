"""Command-line front end: analyze, simulate, sweep, optimal-nr, validate."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import analysis, sim
from .core import AUTO, ConfigError, Protocol, ScenarioConfig, derive_seed, validate_config

log = logging.getLogger("lorarelay")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2

SWEEP_SCHEMA = "lorarelay-sweep/1"
SWEEP_COLUMNS = (
    "protocol", "axis", "value", "n_r", "mlr_analysis", "mlr_sim", "mlr_sim_stderr",
    "rdc_analysis", "rdc_sim", "optimal", "replications", "seeds", "error",
)
AXES = {"n_r": int, "n_sensors": int, "lambda_rate": float, "gamma_db": float}

MLR_ABS_TOL = 0.015
MLR_SIGMAS = 4.0
RDC_REL_TOL = 0.03


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # bad command lines are configuration errors, not validation failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- scenario loading and output --


def load_scenario(path: Optional[str]) -> ScenarioConfig:
    if path is None:
        return ScenarioConfig()
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: scenario must be a JSON object")
    return ScenarioConfig.from_dict(doc)


def _clean(x):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _write(text: str, out: Optional[str]):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _flatten(doc: dict, prefix: str = ""):
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple)):
            if v and isinstance(v[0], dict):
                for i, item in enumerate(v):
                    yield from _flatten(item, f"{key}.{i}.")
            else:
                yield key, ";".join(_fmt(e) for e in v)
        else:
            yield key, _fmt(v)


def _flat_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    w.writerows(_flatten(doc))
    return buf.getvalue()


def _emit(doc: dict, fmt: str, out: Optional[str]):
    if fmt == "csv":
        _write(_flat_csv(doc), out)
    else:
        _write(json.dumps(_clean(doc), indent=2, sort_keys=False) + "\n", out)


def _for_protocol(cfg: ScenarioConfig, protocol: Protocol, **changes) -> ScenarioConfig:
    # the sleep window follows the receive window for cooperative relays
    n_s = AUTO if protocol is Protocol.COOPERATIVE else cfg.n_s
    return cfg.with_(protocol=protocol, n_s=n_s, **changes)


# -- analyze / simulate / optimal-nr --


def cmd_analyze(cfg: ScenarioConfig) -> dict:
    cfg = validate_config(cfg)
    result = analysis.analyze(cfg)
    return {"scenario": cfg.to_dict(), "result": result.to_dict()}


def cmd_simulate(cfg: ScenarioConfig, seed: int, n_slots: int, trace: Optional[str] = None,
                 backend: str = "auto") -> dict:
    cfg = validate_config(cfg)
    if trace is not None:
        with open(trace, "w") as fh:
            metrics = sim.run(cfg, seed, n_slots, trace=fh, backend="python")
    else:
        metrics = sim.run(cfg, seed, n_slots, backend=backend)
    return {"scenario": cfg.to_dict(), "metrics": metrics.to_dict()}


def cmd_optimal_nr(cfg: ScenarioConfig, n_r_max: int) -> dict:
    cfg = validate_config(cfg)
    if not cfg.protocol.is_proposed:
        raise analysis.UnsupportedProtocolForAnalysis(f"no closed form for protocol {cfg.protocol.value}")
    if n_r_max < 1:
        raise UsageError("--n-r-max must be >= 1")
    best, best_mlr, results = analysis.optimal_nr(cfg, n_r_max)
    return {
        "protocol": cfg.protocol.value,
        "n_sensors": cfg.n_sensors,
        "n_r_opt": best,
        "mlr_opt": best_mlr,
        "scan": [{"n_r": r.n_r, "mlr": r.mlr, "rdc": r.rdc} for r in results],
    }


# -- sweep --


@dataclass
class SweepSpec:
    base: ScenarioConfig
    axis: str
    values: list
    protocols: list = field(default_factory=lambda: list(Protocol))
    replications: int = 5
    seed_base: int = 1
    n_slots: int = 10**6
    out: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if self.axis not in AXES:
            raise UsageError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if not self.values:
            raise UsageError("sweep value list is empty")
        if self.replications < 1:
            raise UsageError("replications must be >= 1")
        if not self.protocols:
            raise UsageError("protocol list is empty")

    def seeds(self) -> list[int]:
        # the same seeds at every point: common random numbers across the axis
        return [derive_seed(self.seed_base, r) for r in range(self.replications)]


@dataclass
class ResultRow:
    protocol: str
    axis: str
    value: float
    n_r: Optional[int] = None
    mlr_analysis: Optional[float] = None
    mlr_sim: Optional[float] = None
    mlr_sim_stderr: Optional[float] = None
    rdc_analysis: Optional[float] = None
    rdc_sim: Optional[float] = None
    optimal: bool = False
    replications: int = 0
    seeds: tuple = ()
    error: str = ""

    @property
    def mlr(self) -> Optional[float]:
        return self.mlr_analysis if self.mlr_analysis is not None else self.mlr_sim

    def as_list(self) -> list[str]:
        return [
            self.protocol, self.axis, _fmt(self.value), _fmt(self.n_r),
            _fmt(self.mlr_analysis), _fmt(self.mlr_sim), _fmt(self.mlr_sim_stderr),
            _fmt(self.rdc_analysis), _fmt(self.rdc_sim), _fmt(self.optimal),
            str(self.replications), ";".join(str(s) for s in self.seeds), self.error,
        ]

    def to_dict(self) -> dict:
        d = dict(zip(SWEEP_COLUMNS, [
            self.protocol, self.axis, self.value, self.n_r, self.mlr_analysis, self.mlr_sim,
            self.mlr_sim_stderr, self.rdc_analysis, self.rdc_sim, self.optimal,
            self.replications, list(self.seeds), self.error,
        ]))
        return _clean(d)


def sweep_point(base: ScenarioConfig, protocol: Protocol, axis: str, value, seeds: Sequence[int],
                n_slots: int) -> ResultRow:
    """Analysis (where it exists) and replicated simulation of one sweep point."""
    row = ResultRow(protocol.value, axis, value, replications=len(seeds), seeds=tuple(seeds))
    try:
        cfg = validate_config(_for_protocol(base, protocol, **{axis: value}))
        row.n_r = cfg.n_r
        if protocol.is_proposed:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", analysis.CodedFrameOverflow)
                res = analysis.analyze(cfg)
            row.mlr_analysis, row.rdc_analysis = res.mlr, res.rdc
        runs = [sim.run(cfg, s, n_slots) for s in seeds]
        mlrs = np.array([r.mlr for r in runs])
        row.mlr_sim = float(mlrs.mean())
        row.rdc_sim = float(np.mean([r.rdc for r in runs]))
        # pooled batch-means errors of the replication means
        ses = np.array([r.mlr_stderr for r in runs])
        row.mlr_sim_stderr = float(np.sqrt(np.sum(ses**2)) / len(runs))
    except Exception as exc:  # recorded in-row; the sweep goes on
        log.warning("sweep point %s %s=%s failed: %s", protocol.value, axis, value, exc)
        row.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def _mark_optimal(rows: list[ResultRow], axis: str):
    # along n_r: best window per protocol; along other axes: best protocol per value
    groups: dict = {}
    for r in rows:
        key = r.protocol if axis == "n_r" else r.value
        groups.setdefault(key, []).append(r)
    for members in groups.values():
        ok = [r for r in members if r.mlr is not None and not r.error and not math.isnan(r.mlr)]
        if ok:
            min(ok, key=lambda r: (r.mlr, r.value if axis == "n_r" else 0)).optimal = True


def cmd_sweep(spec: SweepSpec) -> list[ResultRow]:
    seeds = spec.seeds()
    tasks = [(spec.base, p, spec.axis, v, seeds, spec.n_slots) for v in spec.values for p in spec.protocols]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = [pool.submit(sweep_point, *t) for t in tasks]
            rows = [f.result() for f in futures]
    else:
        rows = [sweep_point(*t) for t in tasks]
    _mark_optimal(rows, spec.axis)
    return rows


def sweep_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {SWEEP_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def sweep_json(rows: list[ResultRow]) -> str:
    return json.dumps({"schema": SWEEP_SCHEMA, "rows": [r.to_dict() for r in rows]}, indent=2) + "\n"


def parse_values(text: str, kind=float) -> list:
    """``"1..15"``, ``"1..15:2"`` or a comma list."""
    text = text.strip()
    if not text:
        return []
    if ".." in text:
        lo, _, rest = text.partition("..")
        hi, _, step = rest.partition(":")
        lo, hi, step = int(lo), int(hi), int(step or 1)
        if step < 1:
            raise UsageError("range step must be >= 1")
        return [kind(v) for v in range(lo, hi + 1, step)]
    return [kind(v) for v in text.split(",") if v.strip()]


# -- validate --


def _override(cfg: ScenarioConfig, pairs: Sequence[str]) -> ScenarioConfig:
    doc = cfg.to_dict()
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UsageError(f"override {pair!r} is not KEY=VALUE")
        doc[key.strip()] = json.loads(raw)
    return ScenarioConfig.from_dict(doc)


def validate_point(cfg_ana: ScenarioConfig, cfg_sim: ScenarioConfig, seed: int, n_slots: int) -> dict:
    point = {"protocol": cfg_ana.protocol.value, "n_sensors": cfg_ana.n_sensors, "n_r": cfg_ana.n_r, "seed": seed}
    m = sim.run(cfg_sim, seed, n_slots)
    if m.messages_generated == 0:
        point.update(status="skipped", reason="no traffic: MLR undefined")
        return point
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", analysis.CodedFrameOverflow)
        a = analysis.analyze(cfg_ana)
    mlr_tol = max(MLR_ABS_TOL, MLR_SIGMAS * m.mlr_stderr)
    mlr_ok = abs(a.mlr - m.mlr) <= mlr_tol
    rdc_err = abs(a.rdc - m.rdc) / a.rdc if a.rdc > 0 else (0.0 if m.rdc == 0 else math.inf)
    rdc_ok = rdc_err <= RDC_REL_TOL
    point.update(
        mlr_analysis=a.mlr, mlr_sim=m.mlr, mlr_sim_stderr=m.mlr_stderr, mlr_tolerance=mlr_tol,
        rdc_analysis=a.rdc, rdc_sim=m.rdc, rdc_rel_error=rdc_err, rdc_tolerance=RDC_REL_TOL,
        mlr_ok=mlr_ok, rdc_ok=rdc_ok, status="pass" if mlr_ok and rdc_ok else "fail",
    )
    return point


def _validate_task(args):
    return validate_point(*args)


def cmd_validate(base: ScenarioConfig, sensors: Sequence[int], windows: Sequence[int],
                 protocols: Sequence[Protocol], seed: int, n_slots: int,
                 sim_overrides: Sequence[str] = (), workers: int = 1) -> dict:
    tasks = []
    for p in protocols:
        if not p.is_proposed:
            raise analysis.UnsupportedProtocolForAnalysis(f"cannot validate {p.value}: no closed form")
        for n in sensors:
            for n_r in windows:
                cfg = validate_config(_for_protocol(base, p, n_sensors=n, n_r=n_r))
                cfg_sim = validate_config(_override(cfg, sim_overrides)) if sim_overrides else cfg
                tasks.append((cfg, cfg_sim, seed, n_slots))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_validate_task, tasks))
    else:
        points = [_validate_task(t) for t in tasks]
    summary = {s: sum(p["status"] == s for p in points) for s in ("pass", "fail", "skipped")}
    return {
        "n_slots": n_slots,
        "seed": seed,
        "sim_overrides": list(sim_overrides),
        "summary": summary,
        "ok": summary["fail"] == 0,
        "points": points,
    }


# -- argument parsing --


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=1)
    common.add_argument("--slots", type=int, default=10**6, help="simulated slots per run")
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--protocol", help="override the scenario protocol")
    common.add_argument("--workers", type=int, default=1, help="worker processes for sweeps and validation")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="lorarelay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("analyze", parents=[common], help="closed-form MLR/RDC with all intermediates")

    p = sub.add_parser("simulate", parents=[common], help="one Monte Carlo run")
    p.add_argument("--trace", help="write a JSON-lines event trace (uses the python engine)")
    p.add_argument("--backend", choices=("auto", "compiled", "python"), default="auto")

    p = sub.add_parser("sweep", parents=[common], help="sweep one axis for several protocols")
    p.add_argument("--axis", choices=sorted(AXES), default="n_r")
    p.add_argument("--values", default="1..15", help="e.g. 1..15 or 10,20,30,40")
    p.add_argument("--protocols", default=",".join(x.value for x in Protocol))
    p.add_argument("--replications", type=int, default=5)

    p = sub.add_parser("optimal-nr", parents=[common], help="scan n_r with the analysis")
    p.add_argument("--n-r-max", type=int, default=20)

    p = sub.add_parser("validate", parents=[common], help="analysis against simulation on a grid")
    p.add_argument("--sensors", default="10,20,40")
    p.add_argument("--n-r", dest="windows", default="1,5,11")
    p.add_argument("--protocols", default="single-relay,cooperative")
    p.add_argument("--sim-override", action="append", default=[], metavar="KEY=JSON",
                   help="change a field of the simulated scenario only (negative control)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)
    try:
        cfg = load_scenario(args.scenario)
        if args.protocol:
            cfg = _for_protocol(cfg, Protocol.parse(args.protocol))
        if args.slots < 1:
            raise UsageError("--slots must be positive")

        if args.command == "analyze":
            _emit(cmd_analyze(cfg), args.format or "json", args.out)
        elif args.command == "simulate":
            _emit(cmd_simulate(cfg, args.seed, args.slots, args.trace, args.backend), args.format or "json", args.out)
        elif args.command == "optimal-nr":
            _emit(cmd_optimal_nr(cfg, args.n_r_max), args.format or "json", args.out)
        elif args.command == "sweep":
            kind = AXES.get(args.axis, float)
            spec = SweepSpec(
                base=cfg,
                axis=args.axis,
                values=parse_values(args.values, kind),
                protocols=[Protocol.parse(x) for x in args.protocols.split(",") if x.strip()],
                replications=args.replications,
                seed_base=args.seed,
                n_slots=args.slots,
                out=args.out,
                workers=max(1, min(args.workers, os.cpu_count() or 1)),
            )
            rows = cmd_sweep(spec)
            _write(sweep_json(rows) if args.format == "json" else sweep_csv(rows), args.out)
        elif args.command == "validate":
            report = cmd_validate(
                cfg,
                parse_values(args.sensors, int),
                parse_values(args.windows, int),
                [Protocol.parse(x) for x in args.protocols.split(",") if x.strip()],
                args.seed,
                args.slots,
                args.sim_override,
                workers=max(1, min(args.workers, os.cpu_count() or 1)),
            )
            if args.format == "csv":
                rows = [{k: v for k, v in pt.items()} for pt in report["points"]]
                keys = list(dict.fromkeys(k for r in rows for k in r))
                buf = io.StringIO()
                w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(v) for k, v in r.items()})
                _write(buf.getvalue(), args.out)
            else:
                _emit(report, "json", args.out)
            s = report["summary"]
            log.info("validate: %d pass, %d fail, %d skipped", s["pass"], s["fail"], s["skipped"])
            if not report["ok"]:
                print(f"validation failed at {s['fail']} point(s)", file=sys.stderr)
                return EXIT_VALIDATION
    except (ConfigError, UsageError, analysis.UnsupportedProtocolForAnalysis, ValueError, OSError) as exc:
        print(f"lorarelay: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

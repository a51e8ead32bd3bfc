"""Experiment runner and command line interface.

Usage::

    lpeig run config.json -o out.csv [--threads N] [--timings]
    lpeig table out.csv
    lpeig export-vtk config.json -o outdir

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

from .corrector import RunConfig, Trace, multilevel_correction
from .decomp import PartitionError, build_partition
from .fespace import LaplaceSpectrum, write_vtk
from .mesh import MeshSizeError, build_structured_mesh

log = logging.getLogger(__name__)

__all__ = [
    "CSV_HEADER",
    "VARIABLE_REFERENCE",
    "ConfigError",
    "SolverFailure",
    "ExperimentReport",
    "estimate_orders",
    "load_config",
    "references_for",
    "run_experiment",
    "read_csv",
    "format_table",
    "main",
]

CSV_HEADER = ["level", "h", "dofs", "eig_index", "lambda", "eig_err", "h1_err", "order",
              "local_s", "iface_s", "aug_s"]

# extrapolated eigenvalues of the variable-coefficient problem on (-1,1)^2
VARIABLE_REFERENCE = (17.982932, 33.384973, 38.381968, 47.670103, 66.874113, 68.323961)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class SolverFailure(RuntimeError):
    """A run stopped early; ``report`` holds whatever was completed."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def estimate_orders(errors: Sequence[float], beta: float = 2.0) -> List[float]:
    """Observed orders ``log(e[k-1] / e[k]) / log(beta)`` for successive levels."""
    if not beta > 1:
        raise ValueError(f"refinement factor must exceed 1, got {beta}")
    errs = [float(e) for e in errors]
    for e in errs:
        if not (e > 0 and math.isfinite(e)):
            raise ValueError(f"errors must be positive and finite, got {e!r}")
    lb = math.log(beta)
    return [math.log(errs[k - 1] / errs[k]) / lb for k in range(1, len(errs))]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def config_from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = set(RunConfig.field_names())
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; allowed: {sorted(known)}")
    try:
        cfg = RunConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    check_geometry(cfg)
    return cfg


def check_geometry(cfg: RunConfig) -> None:
    """Raise ConfigError when the mesh or partition cannot be built."""
    try:
        coarse = build_structured_mesh(cfg.rect(), cfg.H)
        build_partition(coarse, cfg.m, cfg.effective_delta)
    except (MeshSizeError, PartitionError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.example == "variable" and cfg.domain != (-1.0, 1.0, -1.0, 1.0):
        log.warning("variable-coefficient references are for (-1,1)^2; "
                    "errors will be meaningless on %s", cfg.domain)


def load_config(path) -> RunConfig:
    """Read a JSON config; OSError propagates, bad content raises ConfigError."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def references_for(cfg: RunConfig):
    """Per-eigenpair references: exact eigenspaces or extrapolated eigenvalues."""
    if cfg.example == "laplace":
        spectrum = LaplaceSpectrum(cfg.rect())
        return [spectrum.eigenspace(i) for i in range(cfg.nev)]
    return [VARIABLE_REFERENCE[i] if i < len(VARIABLE_REFERENCE) else None
            for i in range(cfg.nev)]


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: RunConfig
    rows: List[dict]
    trace: Trace = field(repr=False)

    def column(self, name, eig_index=None):
        return [r[name] for r in self.rows
                if eig_index is None or r["eig_index"] == eig_index]

    def orders(self, eig_index: int) -> List[Optional[float]]:
        """Order column of one eigenpair, level by level (None where blank)."""
        return self.column("order", eig_index)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    return "%.17g" % v


def build_rows(trace: Trace, timings: bool) -> List[dict]:
    rows = []
    nev = trace.config.nev
    prev = [None] * nev
    for rec in trace.records:
        for i in range(nev):
            err = rec.eig_err[i]
            order = None
            if prev[i] is not None and err is not None and prev[i] > 0 and err > 0:
                order = estimate_orders([prev[i], err])[0]
            prev[i] = err
            t = rec.timings if timings else {}
            rows.append({
                "level": rec.level,
                "h": rec.h,
                "dofs": rec.dofs,
                "eig_index": i + 1,
                "lambda": rec.lambdas[i],
                "eig_err": err,
                "h1_err": rec.h1_err[i],
                "order": order,
                "local_s": t.get("local"),
                "iface_s": t.get("iface"),
                "aug_s": t.get("aug"),
            })
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CSV_HEADER])


def read_csv(path) -> List[dict]:
    """Rows of a report CSV with numeric columns parsed (blank -> None)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for r in reader:
            row = {}
            for c in CSV_HEADER:
                s = r[c]
                if s == "":
                    row[c] = None
                elif c in ("level", "dofs", "eig_index"):
                    row[c] = int(s)
                else:
                    row[c] = float(s)
            out.append(row)
    return out


def run_experiment(config: RunConfig, out_path=None, timings: bool = False) -> ExperimentReport:
    """Run the multilevel scheme and write its CSV report to ``out_path``.

    Timing columns are filled only with ``timings`` or a non-deterministic
    config, so that default reports are reproducible byte for byte.  On a
    solver failure the partial report is still written, then SolverFailure
    is raised.
    """
    trace = multilevel_correction(config, references_for(config), raise_errors=False)
    rows = build_rows(trace, timings or not config.deterministic)
    report = ExperimentReport(config, rows, trace)
    if out_path is not None:
        write_csv(rows, out_path)
    if trace.error is not None:
        raise SolverFailure(
            f"run stopped after level {trace.records[-1].level}: {trace.error}", report)
    return report


def format_table(rows) -> str:
    """Human-readable view of report rows, one block per eigenpair."""

    def cell(v, fmt):
        return "-" if v is None else format(v, fmt)

    lines = []
    for i in sorted({r["eig_index"] for r in rows}):
        lines.append(f"eigenpair {i}")
        lines.append(f"{'level':>5} {'h':>10} {'dofs':>8} {'lambda':>18} "
                     f"{'eig_err':>11} {'order':>7} {'h1_err':>11}")
        for r in rows:
            if r["eig_index"] != i:
                continue
            lines.append(
                f"{r['level']:>5} {r['h']:>10.5g} {r['dofs']:>8} {r['lambda']:>18.12f} "
                f"{cell(r['eig_err'], '11.4e'):>11} {cell(r['order'], '7.4f'):>7} "
                f"{cell(r['h1_err'], '11.4e'):>11}")
        lines.append("")
    timed = [r for r in rows if r["local_s"] is not None and r["eig_index"] == 1]
    if timed:
        lines.append(f"{'level':>5} {'local_s':>10} {'iface_s':>10} {'aug_s':>10}")
        for r in timed:
            lines.append(f"{r['level']:>5} {r['local_s']:>10.4f} {r['iface_s']:>10.4f} "
                         f"{r['aug_s']:>10.4f}")
    return "\n".join(lines).rstrip() + "\n"


def export_vtk(config: RunConfig, out_dir) -> List[str]:
    """Write the finest-level eigenfunctions as legacy VTK files."""
    trace = multilevel_correction(config, None, raise_errors=False)
    if trace.error is not None:
        raise SolverFailure(str(trace.error))
    os.makedirs(out_dir, exist_ok=True)
    lev = trace.hierarchy[trace.final.level]
    paths = []
    for i, pair in enumerate(trace.final.pairs, start=1):
        path = os.path.join(out_dir, f"eigenfunction_{i}.vtk")
        write_vtk(path, lev.space, {f"u{i}": lev.space.extend(pair.coeffs)})
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="lpeig", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per level")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write the CSV report")
    r.add_argument("config")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--threads", type=int, default=None, help="override the worker count")
    r.add_argument("--timings", action="store_true", help="fill the timing columns")

    t = sub.add_parser("table", help="pretty-print a CSV report")
    t.add_argument("csv")

    e = sub.add_parser("export-vtk", help="write finest-level eigenfunctions as VTK")
    e.add_argument("config")
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--threads", type=int, default=None)
    return p


def _config_with_threads(path, threads):
    cfg = load_config(path)
    if threads is not None:
        data = asdict(cfg)
        data["workers"] = threads
        cfg = config_from_dict(data)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config_with_threads(args.config, args.threads)
            out_dir = os.path.dirname(os.path.abspath(args.output))
            if not os.path.isdir(out_dir):
                raise OSError(f"output directory {out_dir} does not exist")
            report = run_experiment(cfg, args.output, timings=args.timings)
            print(format_table(report.rows), end="")
        elif args.command == "table":
            print(format_table(read_csv(args.csv)), end="")
        else:
            cfg = _config_with_threads(args.config, args.threads)
            for path in export_vtk(cfg, args.output):
                print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

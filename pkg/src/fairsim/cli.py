"""Command-line entry points.

``simrun`` sweeps (delay, seed, mode) cells for one workload and writes
per-cell CSVs plus a combined ``comparison.csv``; ``simtable`` renders
seed-averaged Delay x {TCP, Fair-TCP} x {Mean, SD, %SD} tables from it.

Exit status: 0 success, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .experiment import cell_name, run_cell
from .iscsi import FAIR, STANDARD
from .metrics import fmt, write_cwnd_trace, write_csv, write_ecb_trace, write_turnaround

log = logging.getLogger("fairsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

COMPARISON_COLUMNS = [
    "cell", "workload", "mode", "delay_ms", "seed", "elapsed_s", "throughput_MBps", "read_MBps",
    "write_MBps", "bytes_read", "bytes_written", "commands", "retx_fast", "retx_timeout",
    "retx_total", "timeouts", "recoveries", "write_tat_mean_ms", "write_tat_sd_ms",
    "write_tat_pct_sd", "read_tat_mean_ms", "read_tat_sd_ms", "read_tat_pct_sd",
    "aggr_cwnd_mean_seg", "aggr_cwnd_sd_seg", "aggr_cwnd_pct_sd", "diff01_sd_seg",
    "conn0_cwnd_sd_seg", "conn1_cwnd_sd_seg", "max_share_spread_seg", "seeks_per_s",
    "loss_rate", "lossy_packets", "queue_drops", "conservation_ok",
]

# Short aliases for the most common overrides.
ALIASES = {
    "mode": "modes",
    "loss": "loss_prob",
    "connections": "n_conns",
    "seed": "seeds",
}

TABLES = {
    "aggr_cwnd": ("Aggregate congestion window (segments)", "aggr_cwnd"),
    "write_tat": ("SCSI command turnaround times for writes (ms)", "write_tat"),
    "read_tat": ("SCSI command turnaround times for reads (ms)", "read_tat"),
}


class CliError(Exception):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


# -- simrun ----------------------------------------------------------------

def _run_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simrun", description=(
        "Run a (delay x seed x mode) sweep and write per-cell CSVs plus comparison.csv."))
    p.add_argument("--config", help="config file with [section] headers and key = value lines")
    p.add_argument("-v", "--verbose", action="store_true", help="log each cell as it finishes")
    for alias, target in ALIASES.items():
        p.add_argument(f"--{alias}", dest=target, metavar="VALUE", default=None,
                       help=f"alias for --{target.replace('_', '-')}")
    for name in cfgmod.FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, metavar="VALUE", default=None,
                       help=f"override [{cfgmod.FIELDS[name].metadata['section']}] {name}")
    return p


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for name in cfgmod.FIELDS:
        raw = getattr(ns, name, None)
        if raw is not None:
            try:
                out[name] = cfgmod.parse_value(name, raw)
            except ConfigError as exc:
                raise ConfigError(f"--{name.replace('_', '-')}: {exc}") from None
    return out


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    if path is None:
        return cfgmod.build(overrides, "<command line>")
    try:
        return cfgmod.load(path, overrides)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror or exc}", EXIT_IO) from None


def plan_cells(cfg: ExperimentConfig) -> list[tuple[str, float, int]]:
    return [(mode, delay, seed) for delay in cfg.delays_ms for seed in cfg.seeds
            for mode in cfg.modes]


def _run_one(args) -> dict:
    cfg, mode, delay, seed, out_dir = args
    result = run_cell(cfg, mode, delay, seed)
    cell_dir = Path(out_dir) / result.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    write_cwnd_trace(cell_dir / "cwnd_trace.csv", result.sampler)
    write_turnaround(cell_dir / "turnaround.csv", result.records)
    write_ecb_trace(cell_dir / "ecb_trace.csv", result.ecb_rows)
    write_csv(cell_dir / "summary.csv", ["cell", "workload", "mode", "delay_ms", "seed", "metric",
                                         "value"],
              ((result.name, cfg.workload, mode, delay, seed, k, v)
               for k, v in sorted(result.metrics.items())))
    row = dict(result.metrics)
    row["cell"] = result.name
    return row


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Run every cell and write ``comparison.csv`` and ``config.echo`` under ``out_dir``."""
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(cfgmod.dumps(cfg))
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc.strerror or exc}", EXIT_IO) from None
    jobs = [(cfg, mode, delay, seed, str(out)) for mode, delay, seed in plan_cells(cfg)]
    try:
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                rows = list(pool.map(_run_one, jobs))
        else:
            rows = []
            for job in jobs:
                rows.append(_run_one(job))
                log.info("%s done: %.3f MB/s", rows[-1]["cell"], rows[-1]["throughput_MBps"])
        write_csv(out / "comparison.csv", COMPARISON_COLUMNS,
                  ([row.get(c) for c in COMPARISON_COLUMNS] for row in rows))
    except OSError as exc:
        raise CliError(f"cannot write results under {out}: {exc.strerror or exc}", EXIT_IO) from None
    return rows


def simrun(argv: list[str] | None = None) -> int:
    ns = _run_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = load_config(ns.config, _overrides(ns))
        rows = run_experiment(cfg)
    except ConfigError as exc:
        print(f"simrun: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"simrun: {exc}", file=sys.stderr)
        return exc.status
    print(f"{len(rows)} cells written to {Path(cfg.out_dir) / 'comparison.csv'}")
    return EXIT_OK


# -- simtable --------------------------------------------------------------

def _num(text: str) -> float | None:
    return float(text) if text not in ("", None) else None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def emit_table(path: str | Path, table: str) -> str:
    """Seed-averaged Mean/SD/%SD per delay for standard TCP and Fair-TCP."""
    if table not in TABLES:
        raise ConfigError(f"unknown table {table!r}; choose from {', '.join(TABLES)}")
    title, prefix = TABLES[table]
    if table == "aggr_cwnd":
        cols = (f"{prefix}_mean_seg", f"{prefix}_sd_seg", f"{prefix}_pct_sd")
    else:
        cols = (f"{prefix}_mean_ms", f"{prefix}_sd_ms", f"{prefix}_pct_sd")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cells: dict = {}
    for row in rows:
        key = (float(row["delay_ms"]), row["mode"])
        vals = cells.setdefault(key, [[], [], []])
        for i, c in enumerate(cols):
            v = _num(row.get(c, ""))
            if v is not None:
                vals[i].append(v)
    delays = sorted({d for d, _ in cells})

    def group(delay, mode) -> str:
        vals = cells.get((delay, mode))
        parts = []
        for i, width in enumerate((8, 8, 6)):
            m = _mean(vals[i]) if vals else None
            parts.append(f"{m:{width}.1f}" if m is not None else f"{'-':>{width}}")
        return "".join(parts)

    lines = [title,
             f"{'Delay':>6} | {'TCP':^22} | {'Fair-TCP':^22}",
             f"{'(ms)':>6} | {'Mean':>8}{'SD':>8}{'%SD':>6} | {'Mean':>8}{'SD':>8}{'%SD':>6}"]
    lines.append("-" * len(lines[-1]))
    for d in delays:
        lines.append(f"{d:>6g} | {group(d, STANDARD)} | {group(d, FAIR)}")
    return "\n".join(lines) + "\n"


def simtable(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="simtable",
                                description="Render a comparison table from comparison.csv.")
    p.add_argument("--in", dest="path", required=True, help="comparison.csv from simrun")
    p.add_argument("--table", required=True, choices=sorted(TABLES))
    ns = p.parse_args(argv)
    try:
        sys.stdout.write(emit_table(ns.path, ns.table))
    except OSError as exc:
        print(f"simtable: cannot read {ns.path}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"simtable: malformed {ns.path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_run() -> None:
    sys.exit(simrun())


def main_table() -> None:
    sys.exit(simtable())


__all__ = ["simrun", "simtable", "run_experiment", "emit_table", "plan_cells", "cell_name",
           "COMPARISON_COLUMNS", "fmt"]

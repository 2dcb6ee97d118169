"""Command line front end: single runs and CSV sweeps.

A flag given several comma-separated values (``--nodes 2,4,8,16``) becomes
the sweep axis; at most one of ``--nodes``, ``--snr-db`` and
``--packet-bits`` may be a list. Every output file starts with the fully
resolved configuration as ``# key=value`` comment lines.
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .config import (PROTOCOLS, ConfigError, ExperimentConfig, build_config,
                     coerce, parse_kv_text)
from .engine import Metrics, run, write_trace

CSV_VERSION = "1"
CSV_COLUMNS = ("protocol", "axis_name", "axis_value", "seed", "throughput_bps",
               "mean_delay_us", "p95_delay_us", "share_direct", "share_coop",
               "share_ancol", "retx_count")
AXES = {"nodes": "n_nodes", "snr": "avg_snr_db", "packet_bits": "packet_bits"}
SUMMARY_METRICS = ("throughput_bps", "mean_delay_us", "p95_delay_us",
                   "share_direct", "share_coop", "share_ancol", "retx_count")


class SweepError(RuntimeError):
    pass


def parse_seeds(text: str) -> List[int]:
    """``"1-10"``, ``"1,3,5"`` or a mix of both."""
    out: List[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError("seeds: cannot parse %r" % text)
    if not out:
        raise ConfigError("seeds: empty seed list")
    return out


def _split(text: Optional[str]) -> List[str]:
    if text is None:
        return []
    return [p.strip() for p in text.split(",") if p.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cancmac",
        description="Compare 802.11 DCF, COOP-MAC and CANC-MAC in a single cell.")
    p.add_argument("--config", help="flat key=value file")
    p.add_argument("--protocol", help="DOT11, COOP_MAC, CANC_MAC or a comma list")
    p.add_argument("--nodes", help="node count (comma list sweeps it)")
    p.add_argument("--snr-db", help="average SNR in dB (comma list sweeps it)")
    p.add_argument("--packet-bits", help="payload bits (comma list sweeps it)")
    p.add_argument("--scenario", choices=("s1", "s2"))
    p.add_argument("--seeds", help="e.g. 1-10 or 1,2,3 (default: 1-10 for a sweep, "
                   "else the config seed)")
    p.add_argument("--packets", type=int, help="completed packets per run")
    p.add_argument("--fidelity", choices=("symbol", "rate"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key (repeatable)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--trace", help="write the per-event trace of a single run here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


@dataclass
class Plan:
    base: ExperimentConfig
    protocols: List[str]
    axis: str
    values: List[str]
    seeds: List[int]


def parse_config(args: argparse.Namespace) -> Plan:
    """Layer defaults < config file < flags and work out the sweep plan."""
    file_layer: Dict[str, object] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config file %s does not exist" % path)
        file_layer = parse_kv_text(path.read_text())
    flags: Dict[str, object] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--set expects KEY=VALUE, got %r" % item)
        flags[key.strip()] = value
    if args.scenario:
        flags["scenario"] = args.scenario
    if args.packets is not None:
        flags["n_packets"] = args.packets
    if args.fidelity:
        flags["phy_fidelity"] = args.fidelity

    axis, values = "", []
    for name, raw in (("nodes", args.nodes), ("snr", args.snr_db),
                      ("packet_bits", args.packet_bits)):
        vals = _split(raw)
        if len(vals) > 1:
            if axis:
                raise ConfigError("only one of --nodes/--snr-db/--packet-bits may be a list")
            axis, values = name, vals
        elif vals:
            flags[AXES[name]] = vals[0]

    protocols = [p.upper() for p in _split(args.protocol)]
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigError("protocol: one of %s (got %r)" % (PROTOCOLS, p))
    if len(protocols) == 1:
        flags["protocol"] = protocols[0]
    base = build_config(file_layer, flags)
    if not protocols:
        protocols = [base.protocol]
    if not axis:
        axis = "nodes"
        values = [str(base.n_nodes)]
    for v in values:
        axis_config(base, axis, v)       # validate every point up front
    if args.seeds:
        seeds = parse_seeds(args.seeds)
    else:
        # A real sweep gets the CI seed set; a single point keeps its seed.
        seeds = list(range(1, 11)) if len(values) > 1 else [base.seed]
    return Plan(base, protocols, axis, values, seeds)


def axis_config(base: ExperimentConfig, axis: str, value: str,
                protocol: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    key = AXES[axis]
    kw: Dict[str, object] = {key: coerce(key, str(value))}
    if protocol is not None:
        kw["protocol"] = protocol
    if seed is not None:
        kw["seed"] = seed
    cfg = base.replace(**kw)
    cfg.validate()
    return cfg


def _fmt(x: float) -> str:
    return "%.6f" % x


def metrics_row(protocol: str, axis: str, value: str, seed: int,
                m: Metrics) -> Tuple[str, ...]:
    return (protocol, axis, str(value), str(seed), "%.3f" % m.throughput_bps,
            "%.3f" % m.mean_delay_us, "%.3f" % m.p95_delay_us,
            _fmt(m.share("DIRECT")), _fmt(m.share("COOP")), _fmt(m.share("ANCOL")),
            str(m.retx_count))


def run_point(base: ExperimentConfig, protocol: str, axis: str, value: str,
              seed: int) -> Tuple[str, ...]:
    """Rebuild one row from the echoed base config and the row's keys."""
    cfg = axis_config(base, axis, value, protocol, seed)
    try:
        metrics, _ = run(cfg)
    except Exception as exc:  # abort the sweep with the offending config
        raise SweepError("run failed (%s) for config:\n%s" % (exc, cfg.dumps())) from exc
    return metrics_row(protocol, axis, value, seed, metrics)


def sweep(axis: str, values: Sequence, base: ExperimentConfig,
          protocols: Sequence[str] = PROTOCOLS,
          seeds: Sequence[int] = (1,), progress=None) -> List[Tuple[str, ...]]:
    """One row per (protocol, value, seed), in that sorted order."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in AXES:
        raise ConfigError("axis: one of %s (got %r)" % (tuple(AXES), axis))
    rows = []
    for protocol in protocols:
        for value in values:
            for seed in seeds:
                rows.append(run_point(base, protocol, axis, str(value), seed))
                if progress:
                    progress(rows[-1])
    return rows


def header_lines(base: ExperimentConfig, axis: str, values: Sequence,
                 protocols: Sequence[str], seeds: Sequence[int]) -> List[str]:
    lines = ["# cancmac sweep csv v%s" % CSV_VERSION,
             "# sweep.axis=%s" % axis,
             "# sweep.values=%s" % ",".join(map(str, values)),
             "# sweep.protocols=%s" % ",".join(protocols),
             "# sweep.seeds=%s" % ",".join(map(str, seeds))]
    lines += ["# %s=%s" % kv for kv in base.to_items()]
    return lines


def write_csv(fh, rows: Iterable[Sequence[str]], header: Sequence[str]) -> None:
    for line in header:
        fh.write(line + "\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)


def read_csv(path_or_text: str):
    """Parse a sweep CSV back into ``(base_config, sweep_meta, rows)``."""
    text = path_or_text
    if "\n" not in path_or_text and Path(path_or_text).exists():
        text = Path(path_or_text).read_text()
    meta: Dict[str, str] = {}
    cfg_items: Dict[str, object] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, sep, value = line[2:].partition("=")
            if not sep:
                continue
            if key.startswith("sweep."):
                meta[key[6:]] = value
            else:
                cfg_items[key] = value
        elif line:
            body.append(line)
    rows = [tuple(r) for r in csv.reader(body)]
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ConfigError("not a sweep CSV: header row missing")
    return build_config(cfg_items), meta, rows[1:]


def summarize(rows: Sequence[Sequence[str]]) -> List[Dict[str, object]]:
    """Mean and 95% t-interval half-width per (protocol, axis value)."""
    groups: Dict[Tuple[str, str, str], List[Sequence[str]]] = {}
    for r in rows:
        groups.setdefault((r[0], r[1], r[2]), []).append(r)
    out = []
    for (protocol, axis, value), rs in groups.items():
        item: Dict[str, object] = {"protocol": protocol, "axis_name": axis,
                                   "axis_value": value, "n_seeds": len(rs)}
        for name in SUMMARY_METRICS:
            col = CSV_COLUMNS.index(name)
            x = np.array([float(r[col]) for r in rs])
            item[name + "_mean"] = float(x.mean())
            item[name + "_ci95"] = ci95(x)
        out.append(item)
    return out


def ci95(x) -> float:
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(stats.t.ppf(0.975, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x)))


def write_summary(fh, summary: Sequence[Dict[str, object]], header: Sequence[str]) -> None:
    if not summary:
        return
    for line in header:
        fh.write(line + "\n")
    cols = list(summary[0])
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for item in summary:
        w.writerow(["%.6f" % v if isinstance(v, float) else v for v in
                    (item[c] for c in cols)])


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        plan = parse_config(args)
    except ConfigError as exc:
        print("cancmac: config error: %s" % exc, file=sys.stderr)
        return 2

    def progress(row):
        if args.verbose:
            print(" ".join(row), file=sys.stderr)

    single = (len(plan.protocols) == 1 and len(plan.values) == 1
              and len(plan.seeds) == 1)
    if args.trace and not single:
        print("cancmac: --trace needs a single run", file=sys.stderr)
        return 2
    header = header_lines(plan.base, plan.axis, plan.values, plan.protocols, plan.seeds)
    try:
        if args.trace:
            cfg = axis_config(plan.base, plan.axis, plan.values[0],
                              plan.protocols[0], plan.seeds[0])
            metrics, trace = run(cfg)
            rows = [metrics_row(cfg.protocol, plan.axis, plan.values[0],
                                cfg.seed, metrics)]
            with open(args.trace, "w", newline="") as fh:
                write_trace(trace, fh)
        else:
            rows = sweep(plan.axis, plan.values, plan.base, plan.protocols,
                         plan.seeds, progress)
    except SweepError as exc:
        print("cancmac: %s" % exc, file=sys.stderr)
        return 1

    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(fh, rows, header)
        if len(plan.seeds) > 1:
            out = Path(args.out)
            with open(out.with_name(out.stem + "_summary.csv"), "w", newline="") as fh:
                write_summary(fh, summarize(rows), header)
    else:
        write_csv(sys.stdout, rows, header)
    return 0


if __name__ == "__main__":
    sys.exit(main())

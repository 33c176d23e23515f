"""Command-line experiment runner.

``anongoss run --config <path> --out <dir> [--seed N] [--sweep key=v1,v2]``
runs every sweep cell and writes ``summary.csv``, ``events.jsonl`` and
``reports.jsonl``. ``anongoss report --out <dir>`` summarises them.

Exit codes: 0 success, 1 missing data for ``report``, 2 configuration error,
3 internal invariant violation. ``ANONGOSS_LOG`` sets the log level.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import click

from .analysis import InvariantViolation
from .config import ConfigError, expand_sweeps, load_config, parse_sweep
from .scenario import ScenarioResult, run_scenario

EXIT_OK = 0
EXIT_MISSING = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

SUMMARY = "summary.csv"
EVENTS = "events.jsonl"
REPORTS = "reports.jsonl"

log = logging.getLogger("anongoss")


class MissingData(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("ANONGOSS_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_outputs(out_dir: Path, cells: list[tuple[dict[str, str], ScenarioResult]]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "params", "metric", "value", "unit"])
    events: list[dict] = []
    reports: list[dict] = []
    for axes, res in cells:
        params = ";".join(f"{k}={v}" for k, v in axes.items())
        for m in res.metrics:
            w.writerow([m.scenario, params, m.metric, repr(m.value), m.unit])
        events += res.events
        reports += res.reports
    (out_dir / SUMMARY).write_text(buf.getvalue())
    (out_dir / EVENTS).write_text(_jsonl(events))
    (out_dir / REPORTS).write_text(_jsonl(reports))


def run(config_path: str, out_dir: str, seed: int | None = None, sweeps: tuple[str, ...] = ()) -> int:
    try:
        base = load_config(config_path)
        if seed is not None:
            base = base.with_value("sim.seed", seed)
        cells = expand_sweeps(base, [parse_sweep(s) for s in sweeps])
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    done = []
    try:
        for i, (axes, cfg) in enumerate(cells):
            log.info("running cell s%d %s", i, axes)
            done.append((axes, run_scenario(cfg, f"s{i}")))
    except InvariantViolation as e:
        click.echo(f"invariant violation: {e}", err=True)
        return EXIT_INVARIANT
    write_outputs(Path(out_dir), done)
    return EXIT_OK


def report(out_dir: str) -> str:
    path = Path(out_dir) / SUMMARY
    if not path.is_file():
        raise MissingData(f"no {SUMMARY} in {out_dir}")
    rows = list(csv.DictReader(path.read_text().splitlines()))
    if not rows:
        raise MissingData(f"{SUMMARY} has no rows")
    blocks: dict[str, dict] = defaultdict(dict)
    params: dict[str, str] = {}
    for r in rows:
        blocks[r["scenario"]][r["metric"]] = float(r["value"])
        params[r["scenario"]] = r["params"]
    lines = []
    for sid, m in blocks.items():
        lines.append(f"scenario {sid}" + (f" [{params[sid]}]" if params[sid] else ""))
        lines.append(f"  delegations              {m.get('delegations', 0):.0f}")
        lines.append(f"  delivery rate            {m.get('delegation_delivery_rate', 0):.4f}")
        lines.append(f"  result rate              {m.get('result_rate', 0):.4f}")
        lines.append(f"  messages per delegation  {m.get('messages_per_delegation', 0):.2f}")
        lines.append(f"  mean route length        {m.get('mean_route_length', 0):.2f}")
        lines.append(f"  delegate view degree     {m.get('delegate_degree_mean', 0):.4f}")
        if "collusion_deanon_rate" in m:
            lines.append(
                f"  collusion degree         mean {m['collusion_degree_mean']:.4f} min {m['collusion_degree_min']:.4f}"
                f" deanonymized {m['collusion_deanon_rate']:.4f}"
            )
        if "sniffer_identification_rate" in m:
            lines.append(
                f"  sniffer                  identified {m['sniffer_identification_rate']:.4f}"
                f" degree {m['sniffer_degree_mean']:.4f} links {m['sniffer_multi_hop_links']:.0f}"
            )
    return "\n".join(lines) + "\n"


@click.group()
def main() -> None:
    """Anonymous gossiping simulator."""
    _setup_logging()


@main.command("run")
@click.option("--config", "config_path", required=True, help="scenario config (INI)")
@click.option("--out", "out_dir", required=True, help="output directory")
@click.option("--seed", type=int, default=None, help="override sim.seed")
@click.option("--sweep", "sweeps", multiple=True, help="key=v1,v2,... (repeatable)")
def run_cmd(config_path: str, out_dir: str, seed: int | None, sweeps: tuple[str, ...]) -> None:
    """Run a scenario (or a sweep) and write metrics."""
    sys.exit(run(config_path, out_dir, seed, sweeps))


@main.command("report")
@click.option("--out", "out_dir", required=True, help="directory written by run")
def report_cmd(out_dir: str) -> None:
    """Print per-scenario summaries."""
    try:
        click.echo(report(out_dir), nl=False)
    except MissingData as e:
        click.echo(f"missing data: {e}", err=True)
        sys.exit(EXIT_MISSING)


if __name__ == "__main__":  # pragma: no cover
    main()

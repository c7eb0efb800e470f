"""
Console entry point ``mve-offload``.

  mve-offload serve --config <settings.json> [--seconds S]
  mve-offload bots --config <scenario.json> --target host:port [--seed N]
  mve-offload bench --scenario <scenario.json> --out <dir> [--seed N] [--repeat K] [--throughput-steps N]
  mve-offload report --in <dir>

Every configuration key can be overridden with ``MVE_<SECTION>__<KEY>`` environment
variables (``MVE_SCENARIO__<KEY>`` for scenario keys).
"""

import argparse
import asyncio
import logging
import sys

from collections import Counter
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

from mve_offload.bench import (
    cost_report,
    efficiency_summary,
    emit,
    max_supported_players,
    report,
    samples_by_players,
    throughput_rows,
)
from mve_offload.config import ScenarioConfig, Settings
from mve_offload.errors import MveBaseError
from mve_offload.protocol import ProtocolListener
from mve_offload.server import GameServer
from mve_offload.typings import ClockMode
from mve_offload.workload import JoinSchedule, ScenarioRunner, ScFixture, run_tcp_bots


logger = logging.getLogger("mve_offload.cli")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of the console script."""
    parser = argparse.ArgumentParser(prog="mve-offload", description="MVE server with serverless offloading")
    parser.add_argument("--log-level", default="INFO", help="root log level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a server on the real clock behind the TCP protocol")
    serve.add_argument("--config", type=Path, help="settings file (JSON)")
    serve.add_argument("--seconds", type=float, help="stop after this many seconds")
    serve.add_argument("--seed", type=int, default=0)

    bots = sub.add_parser("bots", help="drive the bots of a scenario against a running server")
    bots.add_argument("--config", type=Path, required=True, help="scenario file (JSON)")
    bots.add_argument("--target", required=True, help="server address host:port")
    bots.add_argument("--seed", type=int)

    bench = sub.add_parser("bench", help="run a scenario in-process and write its CSV series")
    bench.add_argument("--scenario", type=Path, required=True, help="scenario file (JSON)")
    bench.add_argument("--out", type=Path, required=True, help="output directory")
    bench.add_argument("--seed", type=int, help="first seed (default: the scenario's)")
    bench.add_argument("--repeat", type=int, help="repetitions (default: the scenario's)")
    bench.add_argument("--throughput-steps", type=int, default=0, help="also benchmark the construct template")

    rep = sub.add_parser("report", help="print percentile tables of written series")
    rep.add_argument("--in", dest="in_dir", type=Path, required=True, help="directory written by bench")
    return parser


def _serve(args: argparse.Namespace) -> int:
    settings = Settings.from_file(args.config) if args.config else Settings.from_dict({})
    settings = settings._replace(server=settings.server._replace(clock_mode=ClockMode.real))
    server = GameServer.from_settings(settings, seed=args.seed)
    host, port = server.config.host_port
    with server, ProtocolListener(server, host, port):
        try:
            server.run(seconds=args.seconds)
        except KeyboardInterrupt:
            logger.info("Interrupted")
    return 0


def _bots(args: argparse.Namespace) -> int:
    scenario = ScenarioConfig.from_file(args.config).validate()
    runner = ScenarioRunner(scenario)
    host, _, port = args.target.rpartition(":")
    seed = scenario.seed if args.seed is None else args.seed
    received = asyncio.run(
        run_tcp_bots(
            host or "127.0.0.1",
            int(port),
            runner.behavior(seed),
            JoinSchedule(scenario.players, scenario.join_interval_s),
            duration_s=scenario.duration_s,
            forbidden=ScFixture(scenario.sc_count, scenario.sc_template).bounds(),
        )
    )
    total: Counter = Counter()
    for counts in received:
        total.update(counts)
    print(f"{len(received)} bots finished; received {dict(sorted(total.items()))}")
    return 0


def _bench(args: argparse.Namespace) -> int:
    scenario = ScenarioConfig.from_file(args.scenario)
    if args.seed is not None:
        scenario = scenario._replace(seed=args.seed)
    if args.repeat is not None:
        scenario = scenario._replace(repetitions=args.repeat)
    runner = ScenarioRunner(scenario)
    throughput = throughput_rows(scenario.sc_template, args.throughput_steps) if args.throughput_steps else None
    for result in runner.run_all():
        qos = result.metrics.after_warmup(scenario.warmup_s)
        measured_s = max(scenario.duration_s - scenario.warmup_s, 0.0)
        groups = samples_by_players(qos.tick_samples)
        manifest = {
            "scenario": scenario.as_dict(),
            "settings": runner.settings.as_dict(),
            "seed": result.seed,
            "summary": result.summary,
            "max_supported_players": max_supported_players(groups) if groups else 0,
            "efficiency_by_lead": efficiency_summary(qos.efficiency, "tick_lead"),
            "cost": cost_report(qos.invocations, run_seconds=measured_s)._asdict(),
        }
        out = args.out / f"{scenario.name}-{result.seed}"
        emit(result.metrics, out, manifest=manifest, throughput=throughput)
        print(f"{scenario.name} seed {result.seed}: {len(result.metrics)} ticks -> {out}")
    return 0


def _report(args: argparse.Namespace) -> int:
    print(report(args.in_dir))
    return 0


_COMMANDS = {"serve": _serve, "bots": _bots, "bench": _bench, "report": _report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the console script; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(asctime)s %(name)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (MveBaseError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":  # no cov
    sys.exit(main())

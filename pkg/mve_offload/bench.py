"""
Metrics aggregation, derived statistics and CSV artifacts of experiment runs.

CSV schemas (one file per series, header row first):

  tick_durations.csv   tick_index, time_ms, players, charged_ms, duration_ms, actions_ms, sc_ms, chunk_load_ms, emit_ms
  efficiency.csv       invocation_id, construct_id, issued_tick, total_steps, duplicated_steps, efficiency, lead, stale
  invocations.csv      invocation_id, function, enqueue_tick, enqueue_ms, end_to_end_ms, worker_duration_ms,
                       was_cold, payload_bytes, reply_bytes, instance_id
  storage_latency.csv  time_ms, key, latency_ms, hit, prefetch
  distance.csv         time_s, blocks
  tick_rolling.csv     time_s, mean_ms, p5_ms, p95_ms
  players_over_time.csv time_s, players
  storage_rcdf.csv     latency_ms, fraction
  sc_throughput.csv    step, blocks_per_s          (only when a throughput benchmark ran)

Columns listed in ``WALL_CLOCK_COLUMNS`` carry measured wall time; every other
column is a pure function of the run seed under the virtual clock.

Percentiles use the nearest-rank method.
"""

import csv
import json
import math
import platform
import time

from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple, Optional, Union

import numpy as np

from mve_offload.constructs import throughput
from mve_offload.errors import MveValueError
from mve_offload.typings import (
    ConstructTemplate,
    DistanceSample,
    EfficiencyRecord,
    FunctionName,
    InvocationRecord,
    Sentinel,
    StorageRead,
    TickSample,
)


try:
    import psutil
except ImportError:  # no cov
    psutil = Sentinel

if TYPE_CHECKING:
    from mve_offload.server import GameServer


DEFAULT_BUDGET_MS = 50.0
OVER_BUDGET_LIMIT = 0.05
ROLLING_WINDOW_S = 2.5
REPORT_PERCENTILES = (50.0, 95.0, 99.0, 99.9)
WALL_CLOCK_COLUMNS = {
    "tick_durations.csv": ("duration_ms", "actions_ms", "sc_ms", "chunk_load_ms", "emit_ms"),
    "tick_rolling.csv": ("mean_ms", "p5_ms", "p95_ms"),
    "sc_throughput.csv": ("blocks_per_s",),
}
_REPORT_COLUMNS = {
    "tick_durations.csv": "duration_ms",
    "efficiency.csv": "efficiency",
    "invocations.csv": "end_to_end_ms",
    "storage_latency.csv": "latency_ms",
    "distance.csv": "blocks",
}


class MetricsLog:
    """Raw series of one run, timestamped against the tick clock."""

    def __init__(
        self,
        tick_samples: Optional[list[TickSample]] = None,
        invocations: Optional[list[InvocationRecord]] = None,
        efficiency: Optional[list[EfficiencyRecord]] = None,
        storage_reads: Optional[list[StorageRead]] = None,
        distance_series: Optional[list[DistanceSample]] = None,
    ) -> None:
        self.tick_samples = tick_samples or []
        self.invocations = invocations or []
        self.efficiency = efficiency or []
        self.storage_reads = storage_reads or []
        self.distance_series = distance_series or []

    def extend(self, other: "MetricsLog") -> "MetricsLog":
        """Append every series of another log."""
        self.tick_samples.extend(other.tick_samples)
        self.invocations.extend(other.invocations)
        self.efficiency.extend(other.efficiency)
        self.storage_reads.extend(other.storage_reads)
        self.distance_series.extend(other.distance_series)
        return self

    def after_warmup(self, warmup_s: float) -> "MetricsLog":
        """A copy without the first ``warmup_s`` seconds of the run.

        Invocations are filtered by enqueue time and efficiency records by the
        tick they were issued at.
        """
        if not self.tick_samples:
            return MetricsLog([], list(self.invocations), list(self.efficiency), [], [])
        start_ms = self.tick_samples[0].time_ms
        cutoff_ms = start_ms + warmup_s * 1000.0
        kept = [s for s in self.tick_samples if s.time_ms >= cutoff_ms]
        cutoff_tick = kept[0].tick_index if kept else self.tick_samples[-1].tick_index + 1
        return MetricsLog(
            kept,
            [r for r in self.invocations if r.enqueue_ms >= cutoff_ms],
            [r for r in self.efficiency if r.issued_tick >= cutoff_tick],
            [r for r in self.storage_reads if r.time_ms >= cutoff_ms],
            [d for d in self.distance_series if d.time_s * 1000.0 >= cutoff_ms],
        )

    def __len__(self) -> int:
        return len(self.tick_samples)

    def __repr__(self) -> str:
        return (
            f"MetricsLog(ticks={len(self.tick_samples)}, invocations={len(self.invocations)}, "
            f"efficiency={len(self.efficiency)}, reads={len(self.storage_reads)}, "
            f"distance={len(self.distance_series)})"
        )


def collect_metrics(server: "GameServer") -> MetricsLog:
    """Snapshot the series recorded by a server and its subsystems.

    Invocations are limited to those delivered by the start of the last tick;
    replies still in flight are left out.
    """
    invocations: list[InvocationRecord] = []
    if server.runtime is not None and server.samples:
        delivered_by = server.samples[-1].time_ms
        invocations = sorted(
            (r for r in server.runtime.records if r.enqueue_ms + r.end_to_end_ms <= delivered_by),
            key=lambda r: r.invocation_id,
        )
    return MetricsLog(
        list(server.samples),
        invocations,
        sorted(server.sc.records, key=lambda r: r.invocation_id),
        list(server.store.reads),
        list(server.distance),
    )


def percentile(values: Union[Sequence[float], np.ndarray], q: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``q`` percent of samples at or below it.

    :raises MveValueError: no values, or ``q`` outside ``[0, 100]``
    """
    if not 0 <= q <= 100:
        raise MveValueError("q must be within [0, 100].")
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise MveValueError("Cannot compute a percentile of no values.")
    rank = max(1, math.ceil(q * data.size / 100))
    return float(data[rank - 1])


def percentile_table(
    values: Union[Sequence[float], np.ndarray], qs: Sequence[float] = REPORT_PERCENTILES
) -> dict[str, float]:
    """``{"p50": ..., "p95": ...}`` plus ``count``, ``mean`` and ``max``; empty input gives ``count`` only."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return {"count": 0}
    table = {"count": int(data.size), "mean": float(data.mean()), "max": float(data.max())}
    for q in qs:
        table[f"p{q:g}"] = percentile(data, q)
    return table


def samples_by_players(samples: Iterable[TickSample]) -> dict[int, list[float]]:
    """Tick durations grouped by the number of connected players."""
    groups: dict[int, list[float]] = defaultdict(list)
    for s in samples:
        groups[s.players].append(s.duration_ms)
    return dict(groups)


def over_budget_fraction(durations: Sequence[float], budget_ms: float = DEFAULT_BUDGET_MS) -> float:
    """Fraction of durations strictly above the budget."""
    if not durations:
        return 0.0
    return sum(1 for d in durations if d > budget_ms) / len(durations)


def max_supported_players(
    groups: Mapping[int, Sequence[float]],
    budget_ms: float = DEFAULT_BUDGET_MS,
    limit: float = OVER_BUDGET_LIMIT,
) -> int:
    """Largest player count whose group has strictly fewer than ``limit`` of its ticks over budget.

    :param groups: tick durations per player count
    :raises MveValueError: no groups
    :return: 0 if no group qualifies
    """
    if not groups:
        raise MveValueError("At least one player-count group is required.")
    supported = [n for n, durations in groups.items() if durations and over_budget_fraction(durations, budget_ms) < limit]
    return max(supported, default=0)


def efficiency_summary(records: Iterable[EfficiencyRecord], group_by: str = "tick_lead") -> dict[int, dict[str, float]]:
    """Median, p5 and p95 efficiency per group, plus the share of invocations at exactly 1.0.

    :param group_by: ``"tick_lead"`` (the lead an invocation was issued with) or ``"num_steps"``
    :return: one row per non-empty group
    """
    if group_by not in ("tick_lead", "num_steps"):
        raise MveValueError("group_by must be 'tick_lead' or 'num_steps'.")
    groups: dict[int, list[float]] = defaultdict(list)
    for r in records:
        groups[r.lead if group_by == "tick_lead" else r.total_steps].append(r.efficiency)
    table = {}
    for key in sorted(groups):
        values = groups[key]
        table[key] = {
            "count": len(values),
            "median": percentile(values, 50),
            "p5": percentile(values, 5),
            "p95": percentile(values, 95),
            "full": sum(1 for v in values if v == 1.0) / len(values),
        }
    return table


class RateCard(NamedTuple):
    """FaaS prices; defaults follow public list prices for 1 GB functions."""

    usd_per_gb_second: float = 0.0000166667
    memory_gb: float = 1.0
    usd_per_million_requests: float = 0.20


class CostReport(NamedTuple):
    """Invocation-seconds and their price."""

    invocations: int
    invocation_seconds: float
    usd: float
    usd_per_hour: float


def cost_report(
    invocations: Iterable[InvocationRecord],
    rate_card: RateCard = RateCard(),
    run_seconds: Optional[float] = None,
    function: Optional[FunctionName] = None,
) -> CostReport:
    """Price the handler time of the invocations; ``usd_per_hour`` needs ``run_seconds``."""
    selected = [r for r in invocations if function is None or r.function == function]
    seconds = sum(r.worker_duration_ms for r in selected) / 1000.0
    usd = seconds * rate_card.memory_gb * rate_card.usd_per_gb_second
    usd += len(selected) * rate_card.usd_per_million_requests / 1_000_000
    per_hour = usd * 3600.0 / run_seconds if run_seconds else 0.0
    return CostReport(len(selected), seconds, usd, per_hour)


def rolling_tick_stats(
    samples: Sequence[TickSample], window_s: float = ROLLING_WINDOW_S
) -> list[tuple[float, float, float, float]]:
    """``(time_s, mean, p5, p95)`` of tick durations over the trailing window ending at every tick."""
    window_ms = window_s * 1000.0
    times = np.array([s.time_ms for s in samples], dtype=np.float64)
    durations = np.array([s.duration_ms for s in samples], dtype=np.float64)
    starts = np.searchsorted(times, times - window_ms, side="right")
    rows = []
    for i, start in enumerate(starts):
        window = durations[start : i + 1]
        rows.append((times[i] / 1000.0, float(window.mean()), percentile(window, 5), percentile(window, 95)))
    return rows


def rcdf(values: Union[Sequence[float], np.ndarray]) -> list[tuple[float, float]]:
    """Reverse CDF: ``(value, fraction of samples >= value)`` in ascending value order."""
    data = np.sort(np.asarray(values, dtype=np.float64))
    n = data.size
    return [(float(v), (n - i) / n) for i, v in enumerate(data)]


def players_over_time(samples: Iterable[TickSample]) -> list[tuple[float, int]]:
    """``(time_s, players)`` at every change of the player count."""
    rows: list[tuple[float, int]] = []
    for s in samples:
        if not rows or rows[-1][1] != s.players:
            rows.append((s.time_ms / 1000.0, s.players))
    return rows


def throughput_rows(template: ConstructTemplate, steps: int = 1000) -> list[tuple[int, float]]:
    """Measured block updates per second of a reference construct."""
    return list(enumerate(throughput(template, steps)))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _num(value: float) -> str:
    return f"{value:.6f}"


def host_info() -> dict[str, Any]:
    """Machine description stored in the run manifest."""
    info: dict[str, Any] = {"python": platform.python_version(), "platform": platform.platform()}
    if psutil is not Sentinel:
        info["cpu_count"] = psutil.cpu_count(logical=True)
        info["memory_bytes"] = psutil.virtual_memory().total
    return info


def emit(
    log: MetricsLog,
    out_dir: Union[str, Path],
    *,
    manifest: Optional[dict[str, Any]] = None,
    throughput: Optional[Sequence[tuple[int, float]]] = None,
) -> list[Path]:
    """Write every series of a log plus ``manifest.json`` into ``out_dir``.

    :param manifest: run description merged into the manifest
    :param throughput: rows from ``throughput_rows``
    :return: written files
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
        path = out / name
        _write_csv(path, header, rows)
        written.append(path)

    write(
        "tick_durations.csv",
        ("tick_index", "time_ms", "players", "charged_ms", "duration_ms", "actions_ms", "sc_ms", "chunk_load_ms", "emit_ms"),
        (
            (
                s.tick_index,
                _num(s.time_ms),
                s.players,
                _num(s.charged_ms),
                _num(s.duration_ms),
                *(_num(v) for v in s.breakdown),
            )
            for s in log.tick_samples
        ),
    )
    write(
        "efficiency.csv",
        EfficiencyRecord._fields,
        (
            (r.invocation_id, r.construct_id, r.issued_tick, r.total_steps, r.duplicated_steps, _num(r.efficiency), r.lead, int(r.stale))
            for r in log.efficiency
        ),
    )
    write(
        "invocations.csv",
        InvocationRecord._fields,
        (
            (
                r.invocation_id,
                FunctionName(r.function).name,
                r.enqueue_tick,
                _num(r.enqueue_ms),
                _num(r.end_to_end_ms),
                _num(r.worker_duration_ms),
                int(r.was_cold),
                r.payload_bytes,
                r.reply_bytes,
                r.instance_id,
            )
            for r in log.invocations
        ),
    )
    write(
        "storage_latency.csv",
        StorageRead._fields,
        ((_num(r.time_ms), r.key, _num(r.latency_ms), int(r.hit), int(r.prefetch)) for r in log.storage_reads),
    )
    write("distance.csv", DistanceSample._fields, ((_num(d.time_s), d.blocks) for d in log.distance_series))
    write(
        "tick_rolling.csv",
        ("time_s", "mean_ms", "p5_ms", "p95_ms"),
        ((_num(t), _num(m), _num(p5), _num(p95)) for t, m, p5, p95 in rolling_tick_stats(log.tick_samples)),
    )
    write("players_over_time.csv", ("time_s", "players"), ((_num(t), n) for t, n in players_over_time(log.tick_samples)))
    write(
        "storage_rcdf.csv",
        ("latency_ms", "fraction"),
        ((_num(v), _num(f)) for v, f in rcdf([r.latency_ms for r in log.storage_reads])),
    )
    if throughput is not None:
        write("sc_throughput.csv", ("step", "blocks_per_s"), ((k, _num(v)) for k, v in throughput))

    data = dict(manifest or {})
    data.update(
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        host=host_info(),
        files=[p.name for p in written],
        wall_clock_columns={k: list(v) for k, v in WALL_CLOCK_COLUMNS.items()},
    )
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str), encoding="utf-8")
    written.append(manifest_path)
    return written


def read_column(path: Union[str, Path], column: str) -> list[float]:
    """Numeric values of one CSV column."""
    with Path(path).open(newline="", encoding="utf-8") as f:
        return [float(row[column]) for row in csv.DictReader(f)]


def report(in_dir: Union[str, Path], qs: Sequence[float] = REPORT_PERCENTILES) -> str:
    """Percentile tables of the headline column of every series found in ``in_dir``.

    Sub-directories (one per repetition) are reported one after another.
    """
    root = Path(in_dir)
    if not root.is_dir():
        raise MveValueError(f"{root} is not a directory.")
    dirs = [root] if (root / "manifest.json").exists() else sorted(p for p in root.iterdir() if p.is_dir())
    lines = []
    for d in dirs:
        lines.append(f"== {d.name}")
        header = ["series", "count", "mean", *(f"p{q:g}" for q in qs), "max"]
        lines.append("  ".join(f"{h:>18}" for h in header))
        for name, column in _REPORT_COLUMNS.items():
            path = d / name
            if not path.exists():
                continue
            table = percentile_table(read_column(path, column), qs)
            cells = [f"{name[:-4]}.{column}", str(table["count"])]
            cells += [f"{table[k]:.3f}" if k in table else "-" for k in ("mean", *(f"p{q:g}" for q in qs), "max")]
            lines.append("  ".join(f"{c:>18}" for c in cells))
        tick_path = d / "tick_durations.csv"
        if tick_path.exists():
            with tick_path.open(newline="", encoding="utf-8") as f:
                groups: dict[int, list[float]] = defaultdict(list)
                for row in csv.DictReader(f):
                    groups[int(row["players"])].append(float(row["duration_ms"]))
            if groups:
                lines.append(f"max supported players: {max_supported_players(groups)}")
    return "\n".join(lines)

import csv
import json
import math

import numpy as np
import pytest

from mve_offload.bench import (
    WALL_CLOCK_COLUMNS,
    MetricsLog,
    RateCard,
    collect_metrics,
    cost_report,
    efficiency_summary,
    emit,
    max_supported_players,
    over_budget_fraction,
    percentile,
    percentile_table,
    players_over_time,
    rcdf,
    read_column,
    report,
    rolling_tick_stats,
    samples_by_players,
    throughput_rows,
)
from mve_offload.errors import MveValueError
from mve_offload.typings import (
    ConstructTemplate,
    DistanceSample,
    EfficiencyRecord,
    FunctionName,
    InvocationRecord,
    Position,
    StorageRead,
    TickBreakdown,
    TickSample,
)
from tests.parameters import oscillator


def sample(k, duration, players=1, period_ms=50.0):
    return TickSample(k + 1, k * period_ms, duration, TickBreakdown(sc_ms=duration / 2), players, duration / 4)


def invocation(k, worker_ms=100.0, fn=FunctionName.ScSimulate):
    return InvocationRecord(k, fn, k, k * 50.0, worker_ms + 20.0, worker_ms, k == 1, 64, 128, 1)


def efficiency(k, value, lead=20, steps=100):
    duplicated = round(steps * (1 - value))
    return EfficiencyRecord(k, 1, k, steps, duplicated, (steps - duplicated) / steps, lead)


@pytest.fixture
def metrics():
    return MetricsLog(
        [sample(k, 10.0 + k, players=1 + k // 10) for k in range(30)],
        [invocation(k) for k in range(1, 4)],
        [efficiency(1, 1.0), efficiency(2, 0.5)],
        [StorageRead(0.0, "c_0_0", 5.0, False), StorageRead(1000.0, "c_0_1", 1.0, True, True)],
        [DistanceSample(0.25, 32), DistanceSample(1.0, 17)],
    )


class TestPercentiles:
    @pytest.mark.parametrize("n", [1, 2, 7, 100, 1001])
    @pytest.mark.parametrize("q", [0, 5, 50, 95, 99, 99.9, 100])
    def test_nearest_rank(self, n, q):
        values = np.random.default_rng(n).normal(50.0, 10.0, size=n)
        ordered = sorted(values.tolist())
        expected = ordered[max(1, math.ceil(q * n / 100)) - 1]
        assert percentile(values, q) == expected
        assert percentile(list(values), q) == expected

    @pytest.mark.parametrize(("values", "q"), [([], 50), ([1.0], -1), ([1.0], 100.1)])
    def test_invalid(self, values, q):
        with pytest.raises(MveValueError):
            percentile(values, q)

    def test_table(self):
        table = percentile_table([4.0, 1.0, 3.0, 2.0], qs=(50, 100))
        assert table == {"count": 4, "mean": 2.5, "max": 4.0, "p50": 2.0, "p100": 4.0}
        assert percentile_table([]) == {"count": 0}


class TestSupportedPlayers:
    def test_over_budget_is_strict(self):
        assert over_budget_fraction([50.0, 50.0, 50.1, 10.0]) == 0.25
        assert over_budget_fraction([]) == 0.0

    def test_five_percent_boundary(self):
        groups = {
            10: [60.0] * 4 + [10.0] * 96,
            20: [60.0] * 5 + [10.0] * 95,
            5: [10.0] * 100,
        }
        assert max_supported_players(groups) == 10
        assert max_supported_players(groups, budget_ms=100.0) == 20

    def test_no_group_qualifies(self):
        assert max_supported_players({1: [70.0], 2: []}) == 0
        with pytest.raises(MveValueError):
            max_supported_players({})

    def test_groups(self):
        groups = samples_by_players([sample(0, 1.0, 1), sample(1, 2.0, 2), sample(2, 3.0, 1)])
        assert groups == {1: [1.0, 3.0], 2: [2.0]}


class TestEfficiency:
    def test_by_lead(self):
        records = [efficiency(k, 1.0) for k in range(3)] + [efficiency(9, 0.2, lead=5)]
        table = efficiency_summary(records)
        assert sorted(table) == [5, 20]
        assert table[20]["count"] == 3
        assert table[20]["full"] == 1.0
        assert table[5]["median"] == pytest.approx(0.2)

    def test_by_steps(self):
        records = [efficiency(1, 0.5, steps=10), efficiency(2, 1.0, steps=100), efficiency(3, 0.0, steps=100)]
        table = efficiency_summary(records, group_by="num_steps")
        assert table[10]["full"] == 0.0
        assert table[100]["p5"] == 0.0
        assert table[100]["p95"] == 1.0
        assert table[100]["full"] == 0.5

    def test_invalid_grouping(self):
        with pytest.raises(MveValueError):
            efficiency_summary([], group_by="construct")


class TestCost:
    def test_linear_in_handler_time(self):
        card = RateCard(usd_per_million_requests=0.0)
        one = cost_report([invocation(1)], card)
        two = cost_report([invocation(1), invocation(2)], card)
        assert one.invocation_seconds == pytest.approx(0.1)
        assert two.usd == pytest.approx(2 * one.usd)
        assert one.usd == pytest.approx(0.1 * card.usd_per_gb_second)

    def test_requests_and_hourly_rate(self):
        records = [invocation(k, worker_ms=0.0) for k in range(1, 11)]
        report_ = cost_report(records, RateCard(usd_per_million_requests=1_000_000.0), run_seconds=60.0)
        assert report_.usd == pytest.approx(10.0)
        assert report_.usd_per_hour == pytest.approx(600.0)
        assert cost_report(records).usd_per_hour == 0.0

    def test_function_filter(self):
        records = [invocation(1), invocation(2, fn=FunctionName.TerrainGenerate)]
        assert cost_report(records, function=FunctionName.TerrainGenerate).invocations == 1


class TestSeries:
    def test_rolling_window(self):
        samples = [TickSample(k + 1, k * 1000.0, float(k), TickBreakdown()) for k in range(4)]
        rows = rolling_tick_stats(samples, window_s=2.5)
        assert rows[0] == (0.0, 0.0, 0.0, 0.0)
        assert rows[3][0] == 3.0
        assert rows[3][1] == pytest.approx(2.0)
        assert rows[3][2:] == (1.0, 3.0)

    def test_rcdf(self):
        assert rcdf([3.0, 1.0, 2.0]) == [(1.0, 1.0), (2.0, pytest.approx(2 / 3)), (3.0, pytest.approx(1 / 3))]
        assert rcdf([]) == []

    def test_players_over_time(self):
        samples = [sample(0, 1.0, 0), sample(1, 1.0, 1), sample(2, 1.0, 1), sample(3, 1.0, 2)]
        assert players_over_time(samples) == [(0.0, 0), (0.05, 1), (0.15, 2)]

    def test_after_warmup(self, metrics):
        qos = metrics.after_warmup(0.5)
        assert [s.tick_index for s in qos.tick_samples] == list(range(11, 31))
        assert qos.storage_reads == metrics.storage_reads[1:]
        assert qos.distance_series == metrics.distance_series[1:]
        assert qos.invocations == []
        assert qos.efficiency == []
        assert len(MetricsLog().after_warmup(10.0)) == 0

    def test_after_warmup_uses_issue_time(self, metrics):
        # one tick of warm-up drops tick 1 and the record issued at it
        qos = metrics.after_warmup(0.05)
        assert qos.tick_samples[0].tick_index == 2
        assert [r.invocation_id for r in qos.invocations] == [1, 2, 3]
        assert [r.invocation_id for r in qos.efficiency] == [2]
        assert metrics.after_warmup(60.0).efficiency == []

    def test_extend(self, metrics):
        log = MetricsLog().extend(metrics).extend(metrics)
        assert len(log) == 60
        assert len(log.efficiency) == 4
        assert repr(log).startswith("MetricsLog(ticks=60")

    def test_collect_from_server(self, server):
        server.run(ticks=3)
        log = collect_metrics(server)
        assert len(log) == 3
        assert log.invocations == []

    def test_invocations_in_flight_are_left_out(self, offloaded_server):
        offloaded_server.place_construct(oscillator(), Position(0, 0, 0))
        # the cold reply is delivered 122.2 ms after the first tick
        offloaded_server.run(ticks=3)
        assert collect_metrics(offloaded_server).invocations == []
        offloaded_server.run(ticks=1)
        (record,) = collect_metrics(offloaded_server).invocations
        assert record.was_cold
        assert record.enqueue_ms + record.end_to_end_ms <= 150.0


class TestArtifacts:
    def test_emit(self, metrics, tmp_path):
        rows = throughput_rows(ConstructTemplate.Clock252, 5)
        assert [k for k, _ in rows] == list(range(5))
        written = emit(metrics, tmp_path / "run", manifest={"seed": 3}, throughput=rows)
        names = sorted(p.name for p in written)
        assert names == sorted(
            [
                "tick_durations.csv",
                "efficiency.csv",
                "invocations.csv",
                "storage_latency.csv",
                "distance.csv",
                "tick_rolling.csv",
                "players_over_time.csv",
                "storage_rcdf.csv",
                "sc_throughput.csv",
                "manifest.json",
            ]
        )
        with (tmp_path / "run" / "tick_durations.csv").open(newline="") as f:
            header = next(csv.reader(f))
        assert header[:5] == ["tick_index", "time_ms", "players", "charged_ms", "duration_ms"]
        assert read_column(tmp_path / "run" / "tick_durations.csv", "duration_ms") == [10.0 + k for k in range(30)]
        assert read_column(tmp_path / "run" / "storage_rcdf.csv", "fraction") == [1.0, 0.5]
        with (tmp_path / "run" / "invocations.csv").open(newline="") as f:
            assert next(csv.DictReader(f))["function"] == "ScSimulate"

        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert "manifest.json" not in manifest["files"]
        assert manifest["wall_clock_columns"]["tick_durations.csv"] == list(WALL_CLOCK_COLUMNS["tick_durations.csv"])
        assert "python" in manifest["host"]

    def test_emit_without_throughput(self, metrics, tmp_path):
        written = emit(metrics, tmp_path)
        assert "sc_throughput.csv" not in [p.name for p in written]

    def test_report(self, metrics, tmp_path):
        emit(metrics, tmp_path / "a-0")
        emit(MetricsLog(), tmp_path / "a-1")
        text = report(tmp_path)
        assert "== a-0" in text
        assert "== a-1" in text
        assert "tick_durations.duration_ms" in text
        # ten ticks at 1, 2 and 3 players, all within budget
        assert "max supported players: 3" in text
        assert report(tmp_path / "a-0").startswith("== a-0")

    def test_report_needs_a_directory(self, tmp_path):
        with pytest.raises(MveValueError):
            report(tmp_path / "missing")

from mve_offload.bench import MetricsLog, cost_report, efficiency_summary, emit, max_supported_players
from mve_offload.config import ScenarioConfig, ServerConfig, Settings
from mve_offload.errors import MveBaseError, MveConfigurationError, MveValueError, ServerFullError
from mve_offload.server import GameServer
from mve_offload.speculation import OffloadPolicy
from mve_offload.typings import BehaviorKind, ScMode, TerrainMode, TickSample
from mve_offload.workload import BehaviorSpec, Bot, JoinSchedule, ScenarioRunner, ScFixture, run_scenario


__all__ = [
    "BehaviorKind",
    "BehaviorSpec",
    "Bot",
    "GameServer",
    "JoinSchedule",
    "MetricsLog",
    "MveBaseError",
    "MveConfigurationError",
    "MveValueError",
    "OffloadPolicy",
    "ScFixture",
    "ScMode",
    "ScenarioConfig",
    "ScenarioRunner",
    "ServerConfig",
    "ServerFullError",
    "Settings",
    "TerrainMode",
    "TickSample",
    "cost_report",
    "efficiency_summary",
    "emit",
    "max_supported_players",
    "run_scenario",
]

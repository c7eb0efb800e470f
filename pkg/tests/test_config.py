import json

import pytest

from mve_offload.config import ScenarioConfig, ServerConfig, Settings, apply_env_overrides
from mve_offload.errors import MveConfigurationError, MveTypeError, MveValueError
from mve_offload.typings import BehaviorKind, ClockMode, ConstructTemplate, GenerationMode, ScMode, StorageMode


class TestServerConfig:
    def test_defaults(self):
        config = ServerConfig().validate()
        assert config.tick_budget_ms == 50.0
        assert config.host_port == ("127.0.0.1", 25600)
        assert config.sc_mode == ScMode.Offloaded
        assert config.clock_mode == ClockMode.virtual
        assert config.as_dict()["storage_mode"] == "emulated"

    def test_mode_names_are_normalized(self):
        config = ServerConfig(sc_mode="LocalOnly", storage_mode="local", generation_mode=1).validate()
        assert config.sc_mode == ScMode.LocalOnly
        assert config.storage_mode == StorageMode.local
        assert config.generation_mode == GenerationMode.Noise

    @pytest.mark.parametrize(
        ("kwargs", "error"),
        [
            ({"tick_rate_hz": 0}, MveValueError),
            ({"view_distance_blocks": "32"}, MveTypeError),
            ({"max_players": True}, MveTypeError),
            ({"world_seed": -1}, MveValueError),
            ({"sc_mode": "Remote"}, MveValueError),
            ({"listen_endpoint": "localhost"}, MveConfigurationError),
            ({"listen_endpoint": "localhost:70000"}, MveConfigurationError),
        ],
    )
    def test_invalid(self, kwargs, error):
        with pytest.raises(error):
            ServerConfig(**kwargs).validate()

    def test_endpoint_without_host(self):
        assert ServerConfig(listen_endpoint=":9000").host_port == ("127.0.0.1", 9000)


class TestSettings:
    def test_sections_and_unknown_keys(self):
        settings = Settings.from_dict({"server": {"tick_rate_hz": 10, "colour": "blue"}, "cost": {"chunk_load_ms": 2}}, env={})
        assert settings.server.tick_rate_hz == 10
        assert settings.cost.chunk_load_ms == 2
        assert settings.policy.num_steps == 100

    def test_env_overrides(self):
        env = {
            "MVE_SERVER__TICK_RATE_HZ": "30",
            "MVE_SERVER__SC_MODE": "LocalOnly",
            "MVE_POLICY__LOOP_DETECTION": "true",
            "MVE_CACHE__PREFETCH_MARGIN_BLOCKS": "0",
            "OTHER": "ignored",
        }
        settings = Settings.from_dict({"server": {"tick_rate_hz": 10}}, env=env)
        assert settings.server.tick_rate_hz == 30
        assert settings.server.sc_mode == ScMode.LocalOnly
        assert settings.policy.loop_detection is True
        assert settings.cache.prefetch_margin_blocks == 0

    def test_unknown_override(self):
        with pytest.raises(MveConfigurationError):
            Settings.from_dict({}, env={"MVE_SERVER__TICK_RATE": "30"})
        with pytest.raises(MveConfigurationError):
            apply_env_overrides("policy", {}, ["num_steps"], {"MVE_POLICY__LEAD": "1"})

    @pytest.mark.parametrize(
        "data",
        [
            {"policy": {"num_steps": 0}},
            {"server": {"tick_rate_hz": "fast"}},
            {"cache": 5},
            {"cost": {"chunk_load_ms": -1}},
            {"latency": {"warm": {"kind": "uniform", "params": [1]}}},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(MveConfigurationError):
            Settings.from_dict(data, env={})

    def test_file_round_trip(self, tmp_path):
        settings = Settings.from_dict({"server": {"sc_mode": "LocalOnly", "view_distance_blocks": 64}}, env={})
        path = tmp_path / "conf" / "server.json"
        settings.to_file(path)
        assert json.loads(path.read_text())["server"]["sc_mode"] == "LocalOnly"
        assert Settings.from_file(path, env={}) == settings
        assert Settings.from_file(str(path), env={"MVE_SERVER__VIEW_DISTANCE_BLOCKS": "16"}).server.view_distance_blocks == 16

    @pytest.mark.parametrize("content", ["not json", "[1, 2]"])
    def test_bad_file(self, content, tmp_path):
        path = tmp_path / "server.json"
        path.write_text(content)
        with pytest.raises(MveConfigurationError):
            Settings.from_file(path, env={})


class TestScenarioConfig:
    def test_from_dict(self):
        scenario = ScenarioConfig.from_dict(
            {"name": "walk", "players": 2, "behavior": "StarWalk", "sc_template": 252, "server": {"tick_rate_hz": 10}},
            env={},
        )
        assert scenario.behavior == BehaviorKind.StarWalk
        assert scenario.sc_template == ConstructTemplate.Clock252
        assert scenario.sections == {"server": {"tick_rate_hz": 10}}
        settings = scenario.settings({})
        assert settings.server.tick_rate_hz == 10
        assert settings.server.generation_mode == GenerationMode.Flat

    def test_modes_override_the_server_section(self):
        scenario = ScenarioConfig(
            sc_mode="LocalOnly", world="Noise", sections={"server": {"sc_mode": "Offloaded"}}
        ).validate()
        settings = scenario.settings({})
        assert settings.server.sc_mode == ScMode.LocalOnly
        assert settings.server.generation_mode == GenerationMode.Noise

    def test_seeds(self):
        assert ScenarioConfig(seed=5, repetitions=3).seeds == [5, 6, 7]

    def test_env_overrides(self):
        scenario = ScenarioConfig.from_dict({"players": 2}, env={"MVE_SCENARIO__PLAYERS": "7"})
        assert scenario.players == 7
        with pytest.raises(MveConfigurationError):
            ScenarioConfig.from_dict({}, env={"MVE_SCENARIO__BOTS": "7"})

    @pytest.mark.parametrize(
        "data",
        [
            {"speed": 9},
            {"speed": 0},
            {"players": -1},
            {"duration_s": 0},
            {"warmup_s": -1},
            {"behavior": "Fly"},
            {"server": {"tick_rate_hz": 0}},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(MveConfigurationError):
            ScenarioConfig.from_dict(data, env={})

    def test_file_round_trip(self, tmp_path):
        scenario = ScenarioConfig.from_dict(
            {"name": "rt", "behavior": "RandomActions", "sc_count": 2, "policy": {"loop_detection": True}}, env={}
        )
        path = tmp_path / "scenario.json"
        scenario.to_file(path)
        assert ScenarioConfig.from_file(path, env={}) == scenario

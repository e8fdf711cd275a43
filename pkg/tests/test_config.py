import pytest
import yaml

from cmmsim.config import FIELD_NAMES, ConfigError, Mechanism, ScenarioConfig, config_from_dict, load_config, save_config


def test_defaults_are_valid():
    cfg = config_from_dict({})
    assert cfg.n_particles == 100 and cfg.n_sats == 8 and cfg.comm_range_m == 1000.0
    assert cfg.n_steps == 3000 and cfg.dt == 0.1 and cfg.provenance_window == 10
    assert cfg.central_particle_count == cfg.n_vehicles * cfg.n_particles


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"n_vehicles": 4, "colour": "red"})
    assert "colour" in info.value.problems[0]


@pytest.mark.parametrize("doc, fragment", [
    ({"n_vehicles": "four"}, "n_vehicles must be an integer"),
    ({"n_vehicles": True}, "n_vehicles must be an integer"),
    ({"dt": "fast"}, "dt must be a number"),
    ({"road_constraints": "yes"}, "road_constraints must be true or false"),
    ({"speed_range_mps": [1]}, "speed_range_mps"),
    ({"channel": 3}, "channel"),
    ({"mode": "flying"}, "mode must be one of"),
    ({"fusion": "magic"}, "unknown fusion"),
    ({"fusion": "constant_alpha", "alpha": 2.0}, "alpha must lie in [0, 1]"),
    ({"alpha": 0.5}, "alpha is required for constant_alpha and only for it"),
    ({"channel": "moon"}, "bad channel"),
    ({"channel": {"er_m": 100}}, "bad channel"),
    ({"topology": "ring", "mode": "full_dynamic"}, "ring topology requires mode: stationary"),
    ({"n_steps": 0}, "n_steps must be >= 1"),
    ({"n_sats": 3}, "n_sats must be >= 4"),
    ({"map": "/no/such/map.yaml"}, "map file not found"),
    ({"seed": -1}, "seed must be >= 0"),
    ({"central_particles": 1}, "central_particles must be >= 2"),
])
def test_invalid_values_reported(doc, fragment):
    with pytest.raises(ConfigError) as info:
        config_from_dict(doc)
    assert any(fragment in p for p in info.value.problems), info.value.problems


def test_several_problems_reported_together():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"n_steps": 0, "n_vehicles": 0})
    assert len(info.value.problems) == 2


def test_mechanism_parsing():
    assert Mechanism.parse("constant_alpha(0.4)") == Mechanism("constant_alpha", 0.4)
    assert Mechanism.parse("max_degree").label == "max_degree"
    assert config_from_dict({"fusion": "constant_alpha", "alpha": 0.25}).mechanism.label == "constant_alpha(0.25)"
    assert config_from_dict({"fusion": "constant_alpha(0.6)"}).mechanism.alpha == 0.6


def test_channel_forms():
    assert ScenarioConfig().pdr_profile is None
    assert ScenarioConfig(channel="scaled").pdr_profile.er == 1000.0
    custom = ScenarioConfig(channel={"er_m": 100, "mr_m": 300, "pdr_er": 0.9, "pdr_mr": 0.2})
    assert custom.channel_label == "pdr(100,300,0.9,0.2)"


def test_yaml_round_trip(tmp_path):
    cfg = ScenarioConfig(n_vehicles=6, fusion="constant_alpha(0.3)", channel="empirical")
    path = save_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert set(yaml.safe_load(path.read_text())) == set(FIELD_NAMES)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("n_vehicles: [1,\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(bad)
    seq = tmp_path / "seq.yaml"
    seq.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(seq)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == ScenarioConfig()

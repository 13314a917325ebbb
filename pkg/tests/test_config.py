import pytest

from rtlsim import config as cfgmod
from rtlsim.energy import SYNTHETIC_TARGETS
from rtlsim.sim import ConfigError


def test_empty_file_matches_bundled_default(tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    a, sim_a = cfgmod.load(empty)
    b, sim_b = cfgmod.load(cfgmod.default_config_path())
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert len(sim_a.world.anchors) == len(sim_b.world.anchors) == 89
    assert len(sim_a.world.tags) == 20


def test_normalize_collects_every_error():
    with pytest.raises(ConfigError) as exc:
        cfgmod.normalize({"seed": 1.5, "duration_days": 0, "world": {"nlos_range": "x"},
                          "solver": {"name": "simplex", "with_solvers": "yes"}, "nope": {}})
    text = "\n".join(exc.value.errors)
    for field in ("config.seed", "config.duration_days", "world.nlos_range", "solver.name",
                  "solver.with_solvers", "nope"):
        assert field in text


def test_hash_is_order_independent():
    a = cfgmod.normalize({"seed": 3, "scheduler": {"beta1": -2.0, "gamma": 1.0}})
    b = cfgmod.normalize({"scheduler": {"gamma": 1.0, "beta1": -2.0}, "seed": 3})
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.normalize({"seed": 4}))


def test_overrides_are_merged_deeply(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("scheduler:\n  gamma: 0.25\n")
    cfg, sim = cfgmod.load(p, {"scheduler": {"beta1": -12.0}})
    assert (sim.scheduler.gamma, sim.scheduler.beta1) == (0.25, -12.0)


def test_profiles(tmp_path):
    (tmp_path / "t.csv").write_text("timestamp,watts\n2024-01-01T00:00:00,1e-6\n2024-01-01T00:01:00,2e-6\n")
    p = tmp_path / "c.yaml"
    p.write_text("energy:\n  profiles:\n    flat:\n      constant_w: 1.0e-5\n"
                 "    logged:\n      trace: t.csv\n    sunny:\n      synthetic: bright\n")
    _, sim = cfgmod.load(p)
    assert sim.profiles["flat"].samples[0] == 1e-5
    assert list(sim.profiles["logged"].samples) == [1e-6, 2e-6]
    assert sim.profiles["sunny"].daily_energy() == pytest.approx(SYNTHETIC_TARGETS["bright"], rel=1e-6)


def test_bad_profile_and_anchor_reported_together(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("world:\n  layout: custom\n  anchors:\n    - position: [1, 2]\n"
                 "energy:\n  profiles:\n    odd:\n      colour: red\n")
    with pytest.raises(ConfigError) as exc:
        cfgmod.load(p)
    text = "\n".join(exc.value.errors)
    assert "world.anchors[0].position" in text and "energy.profiles.odd" in text


def test_explicit_tag_list_with_waypoints(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("world:\n  tags:\n    - id: walker\n      position: [5.0, 5.0, 1.0]\n"
                 "      waypoints: [[60, [6.0, 5.0, 1.0]]]\n")
    _, sim = cfgmod.load(p)
    (tag,) = sim.world.tags
    assert tag.id == "walker" and tag.waypoints[0][0] == 60


def test_invalid_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1\n")
    with pytest.raises(ConfigError):
        cfgmod.load(p)


def test_bundled_grid_expands():
    raw = cfgmod.read_yaml(cfgmod.bundled_grid_path())
    grid = cfgmod.tuning_grid(cfgmod.normalize({"tuning": {"grid": raw}}))
    # pairs with beta1 > beta2 are dropped
    want = sum(b1 <= b2 for b1 in raw["beta1"] for b2 in raw["beta2"]) * len(raw["gamma"])
    assert len(grid) == want
    assert all(b1 <= b2 for b1, b2, _ in grid)

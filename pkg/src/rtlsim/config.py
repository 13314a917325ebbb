"""YAML configuration: schema defaults, validation and conversion to a SimConfig.

Every model constant has a default, so an empty file reproduces the
reference setup. Validation collects all problems before failing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import fields
from importlib import resources
from pathlib import Path

import yaml

from . import energy as en
from .protocol import EnergyCostModel, ProtocolParams
from .scheduler import DEFAULT_GRID, AimdParams, Variant, expand_grid
from .sim import (AnchorSpec, ConfigError, SimConfig, TagSpec, WorldConfig, default_floor_plan,
                  random_tag_positions)
from .solvers import Position, SolverConfig

CONFIG_DIR_ENV = "RTLSIM_CONFIG_DIR"

DEFAULTS = {
    "seed": 0,
    "duration_days": 30,
    "world": {
        "layout": "default",
        "los_range": 20.0,
        "nlos_range": 5.0,
        "min_anchor_responses": 5,
        "anchor_profile": "typical",
        "anchors": None,
        "walls": None,
        "tags": {"count": 20, "profile": "typical"},
    },
    "protocol": {f.name: f.default for f in fields(ProtocolParams)},
    "energy": {
        "capacity_j": en.DEFAULT_CAPACITY_J,
        "initial_soc": 0.0,
        "costs": {f.name: f.default for f in fields(EnergyCostModel)},
        "profiles": {},
    },
    "scheduler": {f.name: f.default for f in fields(AimdParams)},
    "solver": {
        **{f.name: f.default for f in fields(SolverConfig)},
        "name": "lm",
        "noise_sigma": 0.10,
        "with_solvers": False,
    },
    "tuning": {"grid": {k: list(v) for k, v in DEFAULT_GRID.items()}, "workers": 1},
}
DEFAULTS["scheduler"]["variant"] = Variant.AIMD.value


# fields that accept either a mapping merged over the default or an explicit list
LIST_OR_MAPPING = {"world.tags"}


def _merge(base: dict, override: dict, path: str, errors: list) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            errors.append(f"{where}: unknown field")
        elif where in LIST_OR_MAPPING and isinstance(val, list):
            out[key] = val
        elif isinstance(base[key], dict) and key not in ("profiles",) and base[key] and val is not None:
            if not isinstance(val, dict):
                errors.append(f"{where}: expected a mapping")
            else:
                out[key] = _merge(base[key], val, where, errors)
        else:
            out[key] = val
    return out


def _num(section: dict, key: str, where: str, errors: list, kind=float):
    val = section.get(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append(f"{where}.{key}: expected a number, got {val!r}")
        return None
    if kind is int and float(val) != int(val):
        errors.append(f"{where}.{key}: expected an integer, got {val!r}")
        return None
    section[key] = kind(val)
    return section[key]


def _point(val, n, where, errors):
    if not isinstance(val, (list, tuple)) or len(val) != n or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        errors.append(f"{where}: expected a list of {n} numbers, got {val!r}")
        return None
    return tuple(float(v) for v in val)


def normalize(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults; raise ConfigError listing every bad field."""
    errors: list[str] = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    cfg = _merge(DEFAULTS, raw, "", errors)

    for key in ("seed", "duration_days"):
        if _num(cfg, key, "config", errors, int) is not None and key == "duration_days" and cfg[key] < 1:
            errors.append("config.duration_days: must be >= 1")
    for key in ("los_range", "nlos_range"):
        _num(cfg["world"], key, "world", errors)
    _num(cfg["world"], "min_anchor_responses", "world", errors, int)
    for key, val in cfg["protocol"].items():
        _num(cfg["protocol"], key, "protocol", errors, int if key == "n_hat_a" else float)
    for key in ("capacity_j", "initial_soc"):
        _num(cfg["energy"], key, "energy", errors)
    for key in cfg["energy"]["costs"]:
        _num(cfg["energy"]["costs"], key, "energy.costs", errors)
    sched = cfg["scheduler"]
    for key in ("beta1", "beta2", "gamma", "capacity_b"):
        _num(sched, key, "scheduler", errors)
    for key in ("k_max", "constant_rate_k", "initial_k"):
        _num(sched, key, "scheduler", errors, int)
    if sched.get("variant") not in [v.value for v in Variant]:
        errors.append(f"scheduler.variant: expected one of {[v.value for v in Variant]}, got {sched.get('variant')!r}")
    sol = cfg["solver"]
    for key in ("tolerance", "lm_damping_init", "noise_sigma"):
        _num(sol, key, "solver", errors)
    for key in ("max_lm_iterations", "max_power_iterations"):
        _num(sol, key, "solver", errors, int)
    if sol.get("name") not in ("lm", "larsson"):
        errors.append(f"solver.name: expected lm or larsson, got {sol.get('name')!r}")
    if not isinstance(sol.get("with_solvers"), bool):
        errors.append("solver.with_solvers: expected true or false")
    grid = cfg["tuning"]["grid"]
    if not isinstance(grid, dict) or set(grid) != {"beta1", "beta2", "gamma"}:
        errors.append("tuning.grid: expected keys beta1, beta2, gamma")
    else:
        for key, vals in grid.items():
            if not isinstance(vals, list) or not vals or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
                errors.append(f"tuning.grid.{key}: expected a non-empty list of numbers")
            else:
                grid[key] = [float(v) for v in vals]
    _num(cfg["tuning"], "workers", "tuning", errors, int)
    if not isinstance(cfg["energy"]["profiles"], dict):
        errors.append("energy.profiles: expected a mapping")
    if cfg["world"]["layout"] not in ("default", "custom"):
        errors.append("world.layout: expected default or custom")
    if errors:
        raise ConfigError(errors)
    return cfg


def _profiles(spec: dict, base_dir: Path, errors: list) -> dict:
    out = {}
    for label, entry in spec.items():
        where = f"energy.profiles.{label}"
        if not isinstance(entry, dict) or len(entry) == 0:
            errors.append(f"{where}: expected a mapping with trace, constant_w or synthetic")
            continue
        try:
            if "trace" in entry:
                path = Path(entry["trace"])
                if not path.is_absolute():
                    path = base_dir / path
                out[label] = en.ingest_trace(path, entry.get("format"), label=label)
            elif "constant_w" in entry:
                out[label] = en.HarvestProfile.constant(float(entry["constant_w"]), label=label)
            elif "synthetic" in entry:
                out[label] = en.synthetic_profile(str(entry["synthetic"]))
            else:
                errors.append(f"{where}: expected trace, constant_w or synthetic")
        except (OSError, ValueError, KeyError) as exc:
            errors.append(f"{where}: {exc}")
    return out


def build(cfg: dict, base_dir: Path | str = ".") -> SimConfig:
    """Turn a normalised config dict into a SimConfig; raise ConfigError on any bad field."""
    errors: list[str] = []
    w = cfg["world"]
    seed = int(cfg["seed"])
    plan_anchors, plan_walls, rects = default_floor_plan()

    anchors = []
    if w["anchors"] is None:
        anchors = [AnchorSpec(f"A{i + 1:03d}", Position(*p), i + 1, w["anchor_profile"])
                   for i, p in enumerate(plan_anchors)]
    elif not isinstance(w["anchors"], list):
        errors.append("world.anchors: expected a list")
    else:
        for i, a in enumerate(w["anchors"]):
            where = f"world.anchors[{i}]"
            if not isinstance(a, dict) or "position" not in a:
                errors.append(f"{where}: expected a mapping with position")
                continue
            pos = _point(a["position"], 3, f"{where}.position", errors)
            if pos is not None:
                anchors.append(AnchorSpec(str(a.get("id", f"A{i + 1:03d}")), Position(*pos),
                                          int(a.get("slot_index", i + 1)), str(a.get("profile", w["anchor_profile"]))))

    walls = []
    if w["walls"] is None:
        walls = list(plan_walls) if w["layout"] == "default" else []
    elif not isinstance(w["walls"], list):
        errors.append("world.walls: expected a list")
    else:
        for i, seg in enumerate(w["walls"]):
            if not isinstance(seg, list) or len(seg) != 2:
                errors.append(f"world.walls[{i}]: expected two points")
                continue
            p = _point(seg[0], 2, f"world.walls[{i}][0]", errors)
            q = _point(seg[1], 2, f"world.walls[{i}][1]", errors)
            if p and q:
                walls.append((p, q))

    tags = []
    t = w["tags"]
    if isinstance(t, dict):
        count = t.get("count")
        if isinstance(count, bool) or not isinstance(count, int) or count < 0:
            errors.append(f"world.tags.count: expected a non-negative integer, got {count!r}")
        else:
            tags = [TagSpec(f"T{i + 1:03d}", p, str(t.get("profile", "typical")))
                    for i, p in enumerate(random_tag_positions(count, rects, seed, float(t.get("height", 1.0))))]
    elif isinstance(t, list):
        for i, spec in enumerate(t):
            where = f"world.tags[{i}]"
            if not isinstance(spec, dict):
                errors.append(f"{where}: expected a mapping")
                continue
            pos = _point(spec["position"], 3, f"{where}.position", errors) if "position" in spec else None
            wps = []
            for j, wp in enumerate(spec.get("waypoints", []) or []):
                if not isinstance(wp, list) or len(wp) != 2:
                    errors.append(f"{where}.waypoints[{j}]: expected [minute, [x, y, z]]")
                    continue
                p = _point(wp[1], 3, f"{where}.waypoints[{j}]", errors)
                if p:
                    wps.append((int(wp[0]), Position(*p)))
            tags.append(TagSpec(str(spec.get("id", f"T{i + 1:03d}")), Position(*pos) if pos else None,
                                str(spec.get("profile", "typical")), tuple(wps)))
    else:
        errors.append("world.tags: expected {count, profile} or a list of tags")

    profiles = _profiles(cfg["energy"]["profiles"], Path(base_dir), errors)
    parts = {}
    for name, factory in (
            ("protocol", lambda: ProtocolParams(**cfg["protocol"])),
            ("energy.costs", lambda: EnergyCostModel(**cfg["energy"]["costs"])),
            ("scheduler", lambda: AimdParams(**cfg["scheduler"])),
            ("solver", lambda: SolverConfig(**{f.name: cfg["solver"][f.name] for f in fields(SolverConfig)}))):
        try:
            parts[name] = factory()
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc}")
    world = None
    try:
        world = WorldConfig(tuple(anchors), tuple(tags), tuple(walls), float(w["los_range"]), float(w["nlos_range"]),
                            int(w["min_anchor_responses"]), int(cfg["duration_days"]), seed)
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    e, s = cfg["energy"], cfg["solver"]
    return SimConfig(world, parts["protocol"], parts["energy.costs"], parts["scheduler"], parts["solver"],
                     float(e["capacity_j"]), float(e["initial_soc"]), profiles, bool(s["with_solvers"]),
                     str(s["name"]), float(s["noise_sigma"]))


def tuning_grid(cfg: dict) -> list[tuple[float, float, float]]:
    g = cfg["tuning"]["grid"]
    return expand_grid(g["beta1"], g["beta2"], g["gamma"])


def read_yaml(path: Path) -> dict:
    with Path(path).open() as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML: {exc}"]) from None
    return data or {}


def default_config_path() -> Path:
    """``$RTLSIM_CONFIG_DIR/default.yaml`` if set, else the bundled file."""
    env = os.environ.get(CONFIG_DIR_ENV)
    if env:
        return Path(env) / "default.yaml"
    return Path(str(resources.files("rtlsim") / "data" / "default.yaml"))


def bundled_grid_path() -> Path:
    return Path(str(resources.files("rtlsim") / "data" / "grid.yaml"))


def load(path: Path | str | None = None, overrides: dict | None = None) -> tuple[dict, SimConfig]:
    """Read, merge overrides, validate and build. Returns ``(normalised dict, SimConfig)``."""
    path = Path(path) if path is not None else default_config_path()
    raw = read_yaml(path)
    if overrides:
        raw = _deep_update(raw if isinstance(raw, dict) else {}, overrides)
    cfg = normalize(raw)
    return cfg, build(cfg, path.parent)


def _deep_update(base: dict, upd: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of a normalised config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()

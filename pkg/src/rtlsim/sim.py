"""Deterministic minute-step simulator of an energy-harvesting locating network.

Every minute each node first receives its harvest, then pays sleep power
and battery leakage. Tags whose hourly schedule fires are visited in a
seeded random order; each runs an active exchange with the anchors it can
reach, and every other tag that hears enough of the successful replies
localizes passively. Energy is tracked in integer picojoules and every
node keeps a ledger that balances exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import energy as en
from .protocol import EnergyCostModel, ProtocolParams, anchor_event_cost
from .scheduler import AimdController, AimdParams, MINUTES_PER_HOUR, Variant, hourly_update, schedule_hour
from .solvers import (MultilaterationProblem, Position, SolverConfig, SolverError, TdoaProblem,
                      larsson_multilaterate, lm_multilaterate, lm_tdoa)

MINUTES_PER_DAY = 1440


class ConfigError(ValueError):
    """Invalid simulation setup; ``errors`` lists every violated field."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# world description


@dataclass(frozen=True)
class AnchorSpec:
    id: str
    position: Position
    slot_index: int
    profile: str = "typical"


@dataclass(frozen=True)
class TagSpec:
    """A tag at a fixed ``position`` or moving along ``waypoints``.

    ``waypoints`` are ``(minute, Position)`` pairs; the position is
    interpolated linearly between them and held outside their span.
    """

    id: str
    position: Position | None = None
    profile: str = "typical"
    waypoints: tuple = ()

    def position_at(self, minute: int) -> Position:
        if not self.waypoints:
            return self.position
        times = np.array([w[0] for w in self.waypoints], dtype=float)
        pts = np.array([w[1].as_array() for w in self.waypoints])
        xyz = [np.interp(minute, times, pts[:, i]) for i in range(3)]
        return Position(*map(float, xyz))


Wall = tuple  # ((x1, y1), (x2, y2))


@dataclass(frozen=True)
class WorldConfig:
    anchors: tuple
    tags: tuple
    walls: tuple = ()
    los_range: float = 20.0
    nlos_range: float = 5.0
    min_anchor_responses: int = 5
    duration_days: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "walls", tuple(tuple(tuple(map(float, p)) for p in w) for w in self.walls))
        errors = self.validate()
        if errors:
            raise ConfigError(errors)

    def validate(self) -> list[str]:
        errors = []
        ids = [a.id for a in self.anchors] + [t.id for t in self.tags]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            errors.append(f"world: duplicate node ids {dup}")
        for a in self.anchors:
            if a.slot_index < 1:
                errors.append(f"world.anchors[{a.id}].slot_index must be >= 1")
        for t in self.tags:
            if t.position is None and not t.waypoints:
                errors.append(f"world.tags[{t.id}] needs a position or waypoints")
            minutes = [w[0] for w in t.waypoints]
            if minutes != sorted(set(minutes)):
                errors.append(f"world.tags[{t.id}].waypoints must have increasing minutes")
        for w in self.walls:
            if len(w) != 2 or any(len(p) != 2 for p in w):
                errors.append("world.walls entries must be two 2D points")
                break
        if not self.los_range > 0:
            errors.append("world.los_range must be > 0")
        if not self.nlos_range > 0:
            errors.append("world.nlos_range must be > 0")
        if self.min_anchor_responses < 4:
            errors.append("world.min_anchor_responses must be >= 4")
        if self.duration_days < 1:
            errors.append("world.duration_days must be >= 1")
        return errors


@dataclass(frozen=True)
class SimConfig:
    world: WorldConfig
    protocol: ProtocolParams = ProtocolParams()
    costs: EnergyCostModel = EnergyCostModel()
    scheduler: AimdParams = AimdParams()
    solver: SolverConfig = SolverConfig()
    capacity_j: float = en.DEFAULT_CAPACITY_J
    initial_soc: float = 0.0
    # label -> HarvestProfile; labels not listed fall back to the bundled synthetic ones
    profiles: Mapping = field(default_factory=dict)
    with_solvers: bool = False
    solver_name: str = "lm"
    noise_sigma: float = 0.10

    def __post_init__(self):
        errors = []
        if not self.capacity_j > 0:
            errors.append("battery.capacity_j must be > 0")
        if not 0.0 <= self.initial_soc <= 1.0:
            errors.append("battery.initial_soc must be in [0, 1]")
        if self.solver_name not in ("lm", "larsson"):
            errors.append("solver.name must be lm or larsson")
        if not self.noise_sigma >= 0:
            errors.append("solver.noise_sigma must be >= 0")
        labels = {a.profile for a in self.world.anchors} | {t.profile for t in self.world.tags}
        unknown = sorted(l for l in labels if l not in self.profiles and l not in en.SYNTHETIC_TARGETS)
        if unknown:
            errors.append(f"harvest profiles not defined: {unknown}")
        if errors:
            raise ConfigError(errors)

    @property
    def seed(self) -> int:
        return self.world.seed

    @property
    def days(self) -> int:
        return self.world.duration_days

    def profile(self, label: str) -> en.HarvestProfile:
        if label in self.profiles:
            return self.profiles[label]
        return _synthetic(label)


_SYNTH_CACHE: dict = {}


def _synthetic(label: str) -> en.HarvestProfile:
    if label not in _SYNTH_CACHE:
        _SYNTH_CACHE[label] = en.synthetic_profile(label)
    return _SYNTH_CACHE[label]


# ---------------------------------------------------------------------------
# default geometry

ROOM_W, ROOM_D = 60.0, 50.0
CORRIDOR_W, CORRIDOR_L = 4.0, 95.5
ANCHOR_GRID = (5, 7)
HALL_MARGIN = (3.0, 2.0)  # m from the walls to the outer anchor columns/rows
CORRIDOR_ANCHORS = 19
TAG_HEIGHT = 1.0


def default_floor_plan():
    """Two 60 m x 50 m halls joined by a 4 m x 95.5 m corridor (6382 m^2, 89 anchors).

    Returns ``(anchor positions, walls, rectangles)`` where rectangles are
    ``(x0, y0, x1, y1)`` floor areas used to place tags.
    """
    y0, y1 = (ROOM_D - CORRIDOR_W) / 2, (ROOM_D + CORRIDOR_W) / 2
    xa, xb = ROOM_W, ROOM_W + CORRIDOR_L
    xe = xb + ROOM_W
    walls = (
        ((0, 0), (xa, 0)), ((0, ROOM_D), (xa, ROOM_D)), ((0, 0), (0, ROOM_D)),
        ((xa, 0), (xa, y0)), ((xa, y1), (xa, ROOM_D)),
        ((xa, y0), (xb, y0)), ((xa, y1), (xb, y1)),
        ((xb, 0), (xb, y0)), ((xb, y1), (xb, ROOM_D)),
        ((xb, 0), (xe, 0)), ((xb, ROOM_D), (xe, ROOM_D)), ((xe, 0), (xe, ROOM_D)),
    )
    rects = ((0.0, 0.0, xa, ROOM_D), (xa, y0, xb, y1), (xb, 0.0, xe, ROOM_D))
    nx, ny = ANCHOR_GRID
    mx, my = HALL_MARGIN
    xs = np.linspace(mx, ROOM_W - mx, nx)
    ys = np.linspace(my, ROOM_D - my, ny)
    positions = []
    for x_off in (0.0, xb):
        for i in range(nx):
            for j in range(ny):
                z = 2.0 if (i + j) % 2 == 0 else 3.0
                positions.append((x_off + float(xs[i]), float(ys[j]), z))
    # two staggered rows so every corridor point hears five anchors off one line
    for i in range(CORRIDOR_ANCHORS):
        y = y0 + 0.5 if i % 2 == 0 else y1 - 0.5
        positions.append((xa + (i + 0.5) * CORRIDOR_L / CORRIDOR_ANCHORS, y, 2.0 if i % 4 < 2 else 3.0))
    return positions, walls, rects


def random_tag_positions(n: int, rects, seed: int, height: float = TAG_HEIGHT) -> list[Position]:
    """Uniform positions over the union of floor rectangles."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A65]))
    areas = np.array([(r[2] - r[0]) * (r[3] - r[1]) for r in rects])
    which = rng.choice(len(rects), size=n, p=areas / areas.sum())
    out = []
    for k in which:
        x0, y0, x1, y1 = rects[k]
        out.append(Position(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), height))
    return out


def default_world(n_tags: int = 20, days: int = 30, seed: int = 0, profile: str = "typical",
                  anchor_profile: str | None = None) -> WorldConfig:
    positions, walls, rects = default_floor_plan()
    anchors = tuple(AnchorSpec(f"A{i + 1:03d}", Position(*p), i + 1, anchor_profile or profile)
                    for i, p in enumerate(positions))
    tags = tuple(TagSpec(f"T{i + 1:03d}", p, profile)
                 for i, p in enumerate(random_tag_positions(n_tags, rects, seed)))
    return WorldConfig(anchors, tags, walls, duration_days=days, seed=seed)


# ---------------------------------------------------------------------------
# reachability


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _blocked(p: np.ndarray, q: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Whether the 2D segment p->q touches any wall; p, q broadcast to (..., 2)."""
    if len(walls) == 0:
        return np.zeros(np.broadcast_shapes(p.shape, q.shape)[:-1], dtype=bool)
    px, py = p[..., 0, None], p[..., 1, None]
    qx, qy = q[..., 0, None], q[..., 1, None]
    wx1, wy1, wx2, wy2 = walls[:, 0, 0], walls[:, 0, 1], walls[:, 1, 0], walls[:, 1, 1]
    o1 = np.sign(_orient(px, py, qx, qy, wx1, wy1))
    o2 = np.sign(_orient(px, py, qx, qy, wx2, wy2))
    o3 = np.sign(_orient(wx1, wy1, wx2, wy2, px, py))
    o4 = np.sign(_orient(wx1, wy1, wx2, wy2, qx, qy))
    hit = (o1 * o2 <= 0) & (o3 * o4 <= 0)
    collinear = (o1 == 0) & (o2 == 0)
    overlap = ((np.maximum(np.minimum(px, qx), np.minimum(wx1, wx2)) <= np.minimum(np.maximum(px, qx), np.maximum(wx1, wx2)))
               & (np.maximum(np.minimum(py, qy), np.minimum(wy1, wy2)) <= np.minimum(np.maximum(py, qy), np.maximum(wy1, wy2))))
    hit = np.where(collinear, overlap, hit)
    return hit.any(axis=-1)


def reachability_matrix(points: np.ndarray, anchors: np.ndarray, world: WorldConfig) -> np.ndarray:
    """Boolean (points x anchors): within LOS range with a clear path, or within NLOS range."""
    points = np.atleast_2d(points)
    d = np.linalg.norm(points[:, None, :] - anchors[None, :, :], axis=2)
    walls = np.asarray(world.walls, dtype=float).reshape(-1, 2, 2)
    near = d <= world.nlos_range
    far = (d <= world.los_range) & ~near
    if far.any() and len(walls):
        clear = ~_blocked(points[:, None, :2], anchors[None, :, :2], walls)
        far &= clear
    return near | far


def reachable_anchors(tag_position: Position, world: WorldConfig) -> list[str]:
    anchors = np.array([a.position.as_array() for a in world.anchors]).reshape(-1, 3)
    if len(anchors) == 0:
        return []
    mask = reachability_matrix(tag_position.as_array(), anchors, world)[0]
    return [a.id for a, m in zip(world.anchors, mask) if m]


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class Exchange:
    """A successful active exchange as seen by the solvers."""

    initiator: Position
    anchors: np.ndarray  # responding anchor positions (n, 3)
    listeners: tuple = ()  # (Position, bool mask over ``anchors``) per passive tag


def synthesize_measurements(exchange: Exchange, noise_sigma: float, rng: np.random.Generator):
    """Noisy ranges for the initiator and noisy range differences for each listener.

    The TDOA problems carry the true initiator; substitute an estimate with
    ``dataclasses.replace(problem, initiator=...)``.
    """
    q = exchange.initiator.as_array()
    a = np.asarray(exchange.anchors, dtype=float)
    base = np.linalg.norm(a - q, axis=1)
    d = np.abs(base + rng.normal(0.0, noise_sigma, len(a))) if noise_sigma > 0 else base
    active = MultilaterationProblem(tuple(map(Position.from_array, a)), tuple(d))
    passive = []
    for pos, mask in exchange.listeners:
        sub = a[np.asarray(mask, dtype=bool)]
        p = pos.as_array()
        m = np.linalg.norm(sub - q, axis=1) + np.linalg.norm(p - sub, axis=1) - np.linalg.norm(p - q)
        if noise_sigma > 0:
            m = m + rng.normal(0.0, noise_sigma, len(sub))
        passive.append(TdoaProblem(exchange.initiator, tuple(map(Position.from_array, sub)), tuple(m)))
    return active, passive


@dataclass(frozen=True)
class FixRecord:
    minute: int
    tag_id: str
    kind: str  # "active" or "passive"
    error_m: float
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# statistics


@dataclass
class SimStats:
    node_ids: tuple
    roles: tuple  # "anchor" / "tag"
    days: int
    active: np.ndarray  # (days, nodes) successful active localizations
    failed: np.ndarray  # (days, nodes) failed active attempts (debited)
    skipped: np.ndarray  # (days, nodes) scheduled attempts skipped for lack of energy
    passive: np.ndarray  # (days, nodes)
    responses: np.ndarray  # (days, nodes) successful anchor responses
    soc_daily: np.ndarray  # (days, nodes) end-of-day state of charge
    soc_hourly: np.ndarray  # (hours, nodes) at the start of each hour
    k_hourly: np.ndarray  # (hours, tags) scheduled active attempts per hour
    ledger: dict  # name -> (nodes,) int64 pJ
    passive_observations: int = 0
    fixes: list = field(default_factory=list)

    def tag_indices(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == "tag"], dtype=int)

    def anchor_indices(self) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == "anchor"], dtype=int)

    def final_soc(self) -> np.ndarray:
        return self.soc_daily[-1]

    def daily_counts(self) -> np.ndarray:
        """Per day and node: localizations for tags, successful responses for anchors."""
        is_tag = np.array([r == "tag" for r in self.roles])
        return np.where(is_tag[None, :], self.active + self.passive, self.responses)

    def total_localizations(self) -> np.ndarray:
        return (self.active + self.passive).sum(axis=0)

    def node_summary(self) -> list[dict]:
        """One row per node with avg/md/std/min/max of its daily counts."""
        counts = self.daily_counts()
        rows = []
        for i, (nid, role) in enumerate(zip(self.node_ids, self.roles)):
            c = counts[:, i]
            rows.append({"node_id": nid, "role": role, **describe(c), "final_soc": float(self.soc_daily[-1, i])})
        return rows

    def table(self) -> dict:
        """Pooled per-day statistics for tags and for anchors."""
        counts = self.daily_counts()
        return {"tags": describe(counts[:, self.tag_indices()].ravel()),
                "anchors": describe(counts[:, self.anchor_indices()].ravel())}

    def ledger_balanced(self) -> np.ndarray:
        l = self.ledger
        return (l["stored_end"] - l["stored_start"]
                == l["harvested"] - l["overflow"] - l["drained"] - l["withdrawn"])


def describe(values) -> dict:
    """avg, md, std (population), min and max of a sample."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"avg": math.nan, "md": math.nan, "std": math.nan, "min": math.nan, "max": math.nan}
    return {"avg": float(v.mean()), "md": float(np.median(v)), "std": float(v.std()),
            "min": float(v.min()), "max": float(v.max())}


# ---------------------------------------------------------------------------
# engine


@dataclass(frozen=True)
class ActiveOutcome:
    success: bool
    n_responses: int
    responders: np.ndarray  # anchor indices that answered
    skipped: bool = False


class Simulation:
    """Mutable state of one run. Nodes are indexed anchors first, then tags."""

    def __init__(self, config: SimConfig):
        self.config = cfg = config
        w = cfg.world
        self.n_anchors = na = len(w.anchors)
        self.n_tags = nt = len(w.tags)
        self.n = na + nt
        self.node_ids = tuple(a.id for a in w.anchors) + tuple(t.id for t in w.tags)
        self.roles = ("anchor",) * na + ("tag",) * nt
        self.anchor_pos = np.array([a.position.as_array() for a in w.anchors]).reshape(-1, 3)
        self.mobile = [j for j, t in enumerate(w.tags) if t.waypoints]
        self.reach = np.zeros((nt, na), dtype=bool)
        if nt and na:
            self.reach[:] = reachability_matrix(self._tag_positions(0), self.anchor_pos, w)

        cap = en.joules_to_pj(cfg.capacity_j)
        self.capacity = np.full(self.n, cap, dtype=np.int64)
        self.stored = np.full(self.n, int(round(cfg.initial_soc * cap)), dtype=np.int64)
        self.sleep_power = cfg.costs.sleep_power
        self.active_pj = en.joules_to_pj(cfg.costs.active_tag_energy)
        self.passive_pj = en.joules_to_pj(cfg.costs.passive_tag_energy)
        self.anchor_pj = np.array([en.joules_to_pj(anchor_event_cost(a.slot_index, cfg.costs, cfg.protocol)[0])
                                   for a in w.anchors], dtype=np.int64)

        labels = [a.profile for a in w.anchors] + [t.profile for t in w.tags]
        self.harvest_groups = []
        for label in sorted(set(labels)):
            idx = np.array([i for i, l in enumerate(labels) if l == label], dtype=int)
            self.harvest_groups.append((idx, cfg.profile(label).minute_energy_pj()))

        self.ledger = {k: np.zeros(self.n, dtype=np.int64)
                       for k in ("harvested", "overflow", "drained", "withdrawn")}
        self.ledger["stored_start"] = self.stored.copy()

        ss = np.random.SeedSequence(cfg.seed)
        order_ss, sched_ss, noise_ss = ss.spawn(3)
        self.order_rng = np.random.default_rng(order_ss)
        self.sched_rngs = [np.random.default_rng(s) for s in sched_ss.spawn(nt)]
        self.noise_rng = np.random.default_rng(noise_ss)

        self.controllers = [AimdController.initial(cfg.scheduler) for _ in range(nt)]
        self.schedule = np.zeros((nt, MINUTES_PER_HOUR), dtype=bool)
        self.soc_prev_hour = None

        days, hours = w.duration_days, w.duration_days * 24
        shape = (days, self.n)
        self.active = np.zeros(shape, dtype=np.int64)
        self.failed = np.zeros(shape, dtype=np.int64)
        self.skipped = np.zeros(shape, dtype=np.int64)
        self.passive = np.zeros(shape, dtype=np.int64)
        self.responses = np.zeros(shape, dtype=np.int64)
        self.soc_daily = np.zeros(shape)
        self.soc_hourly = np.zeros((hours, self.n))
        self.k_hourly = np.zeros((hours, nt), dtype=np.int64)
        self.passive_observations = 0
        self.fixes: list[FixRecord] = []

    # -- helpers

    def _tag_positions(self, minute: int) -> np.ndarray:
        return np.array([t.position_at(minute).as_array() for t in self.config.world.tags]).reshape(-1, 3)

    def soc(self) -> np.ndarray:
        return self.stored / self.capacity

    def _withdraw(self, idx, amount) -> np.ndarray:
        """Vectorised strict withdrawal; returns the success mask."""
        cur = self.stored[idx]
        rem = cur - amount
        ok = rem > 0
        self.ledger["withdrawn"][idx] += np.where(ok, amount, cur)
        self.stored[idx] = np.where(ok, rem, 0)
        return ok

    # -- protocol

    def resolve_active(self, tag: int, day: int) -> ActiveOutcome:
        """One active attempt by tag ``tag`` (0-based among tags)."""
        node = self.n_anchors + tag
        if self.stored[node] - self.active_pj <= 0:
            self.skipped[day, node] += 1
            return ActiveOutcome(False, 0, np.zeros(0, dtype=int), skipped=True)
        self.stored[node] -= self.active_pj
        self.ledger["withdrawn"][node] += self.active_pj
        idx = np.flatnonzero(self.reach[tag])
        ok = self._withdraw(idx, self.anchor_pj[idx]) if len(idx) else np.zeros(0, dtype=bool)
        responders = idx[ok]
        self.responses[day, responders] += 1
        n_resp = len(responders)
        success = n_resp >= self.config.world.min_anchor_responses
        if success:
            self.active[day, node] += 1
        else:
            self.failed[day, node] += 1
        return ActiveOutcome(success, n_resp, responders)

    def resolve_passive(self, initiator: int, outcome: ActiveOutcome, day: int) -> np.ndarray:
        """Tags that hear enough replies of a successful exchange and can pay to listen."""
        need = self.config.world.min_anchor_responses
        heard = self.reach[:, outcome.responders].sum(axis=1)
        cand = heard >= need
        cand[initiator] = False
        tags = np.flatnonzero(cand)
        if len(tags) == 0:
            return tags
        nodes = self.n_anchors + tags
        can_pay = self.stored[nodes] - self.passive_pj > 0
        tags, nodes = tags[can_pay], nodes[can_pay]
        self.stored[nodes] -= self.passive_pj
        self.ledger["withdrawn"][nodes] += self.passive_pj
        self.passive[day, nodes] += 1
        self.passive_observations += len(tags)
        return tags

    def _record_fixes(self, minute: int, tag: int, outcome: ActiveOutcome, listeners: np.ndarray) -> None:
        cfg = self.config
        positions = self._tag_positions(minute)
        resp = outcome.responders
        ex = Exchange(Position.from_array(positions[tag]), self.anchor_pos[resp],
                      tuple((Position.from_array(positions[j]), self.reach[j, resp]) for j in listeners))
        active, passive = synthesize_measurements(ex, cfg.noise_sigma, self.noise_rng)
        solve = larsson_multilaterate if cfg.solver_name == "larsson" else (
            lambda p, c: lm_multilaterate(p, None, c))
        res = solve(active, cfg.solver)
        tag_ids = [t.id for t in cfg.world.tags]
        self.fixes.append(FixRecord(minute, tag_ids[tag], "active",
                                    res.position.distance_to(ex.initiator), res.converged, res.iterations))
        for j, prob in zip(listeners, passive):
            try:
                pres = lm_tdoa(replace(prob, initiator=res.position), None, cfg.solver)
            except SolverError:
                continue
            self.fixes.append(FixRecord(minute, tag_ids[j], "passive",
                                        pres.position.distance_to(Position.from_array(positions[j])),
                                        pres.converged, pres.iterations))

    # -- time stepping

    def _hourly(self, hour: int) -> None:
        soc = self.soc()
        tag_soc = soc[self.n_anchors:]
        prev = self.soc_prev_hour if self.soc_prev_hour is not None else tag_soc
        for j in range(self.n_tags):
            c = hourly_update(self.controllers[j], float(tag_soc[j]), float(prev[j]))
            self.controllers[j] = c
            minutes = schedule_hour(min(c.k, MINUTES_PER_HOUR), self.sched_rngs[j])
            self.schedule[j] = False
            self.schedule[j, list(minutes)] = True
            self.k_hourly[hour, j] = len(minutes)
        self.soc_prev_hour = tag_soc.copy()
        self.soc_hourly[hour] = soc

    def step_minute(self, minute: int) -> None:
        day = minute // MINUTES_PER_DAY
        # harvest
        for idx, pj in self.harvest_groups:
            e = pj[minute % len(pj)]
            total = self.stored[idx] + e
            kept = np.minimum(total, self.capacity[idx])
            self.ledger["harvested"][idx] += e
            self.ledger["overflow"][idx] += total - kept
            self.stored[idx] = kept
        # sleep and leakage
        drain = np.minimum(en.minute_drain_pj(self.stored, self.capacity, self.sleep_power), self.stored)
        self.stored -= drain
        self.ledger["drained"] += drain

        if minute % MINUTES_PER_HOUR == 0:
            self._hourly(minute // MINUTES_PER_HOUR)
        firing = np.flatnonzero(self.schedule[:, minute % MINUTES_PER_HOUR])
        if len(firing):
            if self.mobile:
                pos = self._tag_positions(minute)
                self.reach[self.mobile] = reachability_matrix(pos[self.mobile], self.anchor_pos,
                                                              self.config.world)
            for tag in firing[self.order_rng.permutation(len(firing))]:
                outcome = self.resolve_active(int(tag), day)
                if outcome.success:
                    listeners = self.resolve_passive(int(tag), outcome, day)
                    if self.config.with_solvers:
                        self._record_fixes(minute, int(tag), outcome, listeners)
        if minute % MINUTES_PER_DAY == MINUTES_PER_DAY - 1:
            self.soc_daily[day] = self.soc()

    def run(self) -> SimStats:
        for minute in range(self.config.world.duration_days * MINUTES_PER_DAY):
            self.step_minute(minute)
        return self.stats()

    def stats(self) -> SimStats:
        ledger = {k: v.copy() for k, v in self.ledger.items()}
        ledger["stored_end"] = self.stored.copy()
        return SimStats(self.node_ids, self.roles, self.config.world.duration_days, self.active.copy(),
                        self.failed.copy(), self.skipped.copy(), self.passive.copy(), self.responses.copy(),
                        self.soc_daily.copy(), self.soc_hourly.copy(), self.k_hourly.copy(), ledger,
                        self.passive_observations, list(self.fixes))


def run(config: SimConfig) -> SimStats:
    """Simulate ``config.world.duration_days`` days; identical configs give identical stats."""
    return Simulation(config).run()


def with_scheduler(config: SimConfig, variant: Variant | str) -> SimConfig:
    return replace(config, scheduler=replace(config.scheduler, variant=Variant(variant)))

"""Acceptance suite: one or more tests per criterion, summarised at the end of the run."""

import filecmp
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from instances import (LARSSON_STALL, LM_STALL, TDOA_STALL, noise_free_suite, noisy_suite, range_problem,
                       tdoa_problem)
from rtlsim import cli
from rtlsim import energy as en
from rtlsim.protocol import Role, anchor_event_cost, max_localization_rate, tag_event_cost
from rtlsim.scheduler import AimdController, AimdParams, FsmState, Variant, fsm_step, hourly_update
from rtlsim.sim import AnchorSpec, SimConfig, TagSpec, WorldConfig, default_world, run, with_scheduler
from rtlsim.solvers import (Position, SolverConfig, larsson_multilaterate, lm_multilaterate, lm_tdoa,
                            range_objective)

CRIT = pytest.mark.criterion


@pytest.fixture(scope="module")
def exact_suite():
    return noise_free_suite(1000, seed=2024)


@pytest.fixture(scope="module")
def noisy():
    return noisy_suite(1000, seed=7, sigma=0.10)


# ---------------------------------------------------------------------------
# solvers


@CRIT(1, "solver exactness on 1000 noise-free instances")
def test_c1_exactness(exact_suite, record_property):
    t0 = time.perf_counter()
    worst = {"larsson": 0.0, "lm": 0.0, "tdoa": 0.0}
    for a, p, q in exact_suite:
        rp, tp = range_problem(a, p), tdoa_problem(a, p, q)
        for name, res in (("larsson", larsson_multilaterate(rp)), ("lm", lm_multilaterate(rp)),
                          ("tdoa", lm_tdoa(tp))):
            worst[name] = max(worst[name], float(np.max(np.abs(res.position.as_array() - p))))
    elapsed = time.perf_counter() - t0
    record_property("detail", "max error " + ", ".join(f"{k} {v:.1e} m" for k, v in worst.items())
                    + f"; {elapsed:.1f} s")
    assert max(worst.values()) < 1e-6
    assert elapsed < 10.0


@CRIT(2, "Larsson objective <= LM objective + 1e-9")
def test_c2_dominance(exact_suite, record_property):
    checked, worst = 0, -np.inf
    for a, p, _ in exact_suite:
        rp = range_problem(a, p)
        lar, lm = larsson_multilaterate(rp), lm_multilaterate(rp)
        if not (lar.converged and lm.converged):
            continue
        d = rp.distance_array()
        gap = range_objective(lar.position.as_array(), a, d) - range_objective(lm.position.as_array(), a, d)
        worst = max(worst, gap)
        checked += 1
    record_property("detail", f"{checked} converged pairs, max gap {worst:.1e}")
    assert checked > 0
    assert worst <= 1e-9


def _grid_min(anchors, d, centre, half=1.0, pitch=0.01):
    """Brute-force minimum of the range objective on a cubic grid around ``centre``."""
    ax = np.round(np.arange(-half, half + pitch / 2, pitch), 10)
    gx, gy = np.meshgrid(centre[0] + ax, centre[1] + ax, indexing="ij")
    best, arg = np.inf, None
    for z in centre[2] + ax:
        r = np.sqrt((gx[..., None] - anchors[:, 0]) ** 2 + (gy[..., None] - anchors[:, 1]) ** 2
                    + (z - anchors[:, 2]) ** 2) - d
        f = np.sum(r * r, axis=-1)
        i = int(np.argmin(f))
        if f.flat[i] < best:
            best, arg = float(f.flat[i]), np.array([gx.flat[i], gy.flat[i], z])
    return best, arg


@CRIT(3, "LM within one grid cell of a 1 cm brute-force minimum")
def test_c3_grid_oracle(noisy, record_property):
    pitch = 0.01
    offsets = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                        if (i, j, k) != (0, 0, 0)]) * pitch
    worst_pos = 0.0
    for a, p, _, rp, _ in noisy[:50]:
        d = rp.distance_array()
        lm = lm_multilaterate(rp)
        x = lm.position.as_array()
        f_lm = range_objective(x, a, d)
        f_grid, g = _grid_min(a, d, np.round(p, 2), pitch=pitch)
        # largest objective change across one cell around the grid minimum
        cell_tol = max(abs(range_objective(g + o, a, d) - f_grid) for o in offsets)
        assert f_lm <= f_grid + 1e-12
        assert f_grid - f_lm <= cell_tol
        worst_pos = max(worst_pos, float(np.linalg.norm(x - g)))
        assert worst_pos <= np.sqrt(3) * pitch
    record_property("detail", f"max |x_lm - x_grid| {worst_pos * 1000:.2f} mm")


@CRIT(4, "iteration caps flag non-convergence; median LM iterations <= 6")
def test_c4_iteration_caps():
    cfg = SolverConfig()
    lm = lm_multilaterate(LM_STALL, None, cfg)
    assert (lm.converged, lm.iterations) == (False, 20)
    tdoa = lm_tdoa(TDOA_STALL, None, cfg)
    assert (tdoa.converged, tdoa.iterations) == (False, 20)
    lar = larsson_multilaterate(LARSSON_STALL, cfg)
    assert (lar.converged, lar.iterations) == (False, 1000)


@CRIT(4, "iteration caps flag non-convergence; median LM iterations <= 6")
def test_c4_median_iterations(noisy, record_property):
    its = [lm_multilaterate(rp).iterations for _, _, _, rp, _ in noisy]
    record_property("detail", f"median {np.median(its):g}, mean {np.mean(its):.2f} LM iterations")
    assert np.median(its) <= 6


@CRIT(5, "tolerance 1e-2 vs 1e-8 moves positions < 1 mm")
def test_c5_tolerance_insensitivity(noisy, record_property):
    lo, hi = SolverConfig(tolerance=1e-2), SolverConfig(tolerance=1e-8)
    worst = 0.0
    for _, _, _, rp, tp in noisy:
        for f in (lambda c: lm_multilaterate(rp, None, c), lambda c: larsson_multilaterate(rp, c),
                  lambda c: lm_tdoa(tp, None, c)):
            worst = max(worst, f(lo).position.distance_to(f(hi).position))
    record_property("detail", f"max shift {worst * 1000:.3f} mm")
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# energy and protocol


@CRIT(6, "event energy and duration formulas bit-exact")
def test_c6_energy_formulas(record_property):
    for i in range(1, 26):
        e, t = anchor_event_cost(i)
        k = (i - 1) % 10
        assert e == 338.30e-6 + 15.28e-6 * k
        assert t == 30.55e-3 + 290e-6 * k
    assert tag_event_cost(Role.ACTIVE) == (3.22e-3, 84.52e-3)
    assert tag_event_cost(Role.PASSIVE) == (951.16e-6, 34.18e-3)
    rate = max_localization_rate()
    record_property("detail", f"max rate {rate:.3f} Hz")
    assert round(rate, 1) == 11.8


def _random_world(seed=11, n_anchors=14, n_tags=6, days=7):
    rng = np.random.default_rng(seed)
    profiles = ("dim", "typical", "bright")
    anchors = tuple(AnchorSpec(f"A{i}", Position(*rng.uniform([0, 0, 2], [25, 25, 3])), i + 1,
                               profiles[rng.integers(3)]) for i in range(n_anchors))
    tags = tuple(TagSpec(f"T{i}", Position(*rng.uniform([0, 0, 0.5], [25, 25, 1.5])), profiles[rng.integers(3)])
                 for i in range(n_tags))
    return WorldConfig(anchors, tags, duration_days=days, seed=seed)


@CRIT(7, "exact per-node energy conservation and SoC bounds")
def test_c7_battery_ledger(record_property):
    stats = run(SimConfig(_random_world(), initial_soc=0.5))
    assert stats.ledger_balanced().all()
    assert np.all((stats.soc_hourly >= 0) & (stats.soc_hourly <= 1))
    assert np.all((stats.soc_daily >= 0) & (stats.soc_daily <= 1))
    n_events = int(stats.active.sum() + stats.failed.sum() + stats.passive.sum())
    record_property("detail", f"{len(stats.node_ids)} nodes, {n_events} tag events, ledger exact")
    assert n_events > 0


@CRIT(7, "exact per-node energy conservation and SoC bounds")
def test_c7_self_discharge():
    socs = np.linspace(0.0, 1.0, 101)
    expected = np.where(socs <= 0.3, 1e-6, 1e-6 + (socs - 0.3) * (3e-6 / 0.7))
    got = en.self_discharge_current(socs)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=0)
    for s, want in ((1.0, 4e-6), (0.3, 1e-6), (0.65, 2.5e-6), (0.1, 1e-6)):
        assert abs(en.self_discharge_current(s) - want) <= 1e-12 * want


# ---------------------------------------------------------------------------
# scheduler


# (metric, state after, k after) starting from k = 4: ramp up, hold, back off, recover.
SAWTOOTH = [
    (0.0, FsmState.INCREASE, 5), (0.0, FsmState.INCREASE, 6), (-8.0, FsmState.HOLD, 6),
    (-8.0, FsmState.HOLD, 6), (-10.0, FsmState.HALVE, 3), (-10.0, FsmState.HALVE, 1),
    (-8.0, FsmState.HOLD, 1), (-1.0, FsmState.INCREASE, 2), (-10.0, FsmState.HALVE, 1),
    (-10.0, FsmState.HALVE, 0), (-10.0, FsmState.HALVE, 0), (-1.0, FsmState.INCREASE, 1),
    (-8.0, FsmState.HOLD, 1), (-1.0, FsmState.INCREASE, 2), (-1.0, FsmState.INCREASE, 3),
    (-10.0, FsmState.HALVE, 1), (-7.0, FsmState.HOLD, 1), (-9.0, FsmState.HOLD, 1),
]


@CRIT(8, "AIMD trajectory and transition coverage; soc >= gamma increases")
def test_c8_aimd_trajectory():
    p = AimdParams(beta1=-9.0, beta2=-7.0)
    c = replace(AimdController.initial(p), k=4)
    seen = set()
    for m, state, k in SAWTOOTH:
        before = c.fsm_state
        c = fsm_step(c, m)
        assert (c.fsm_state, c.k) == (state, k), m
        seen.add((before, c.fsm_state))
    assert seen == {(a, b) for a in FsmState for b in FsmState}


@CRIT(8, "AIMD trajectory and transition coverage; soc >= gamma increases")
def test_c8_reward_forces_increase():
    for gamma in (0.5, 0.7, 0.9, 1.0):
        p = AimdParams(beta1=-9.0, beta2=-7.0, gamma=gamma)
        for soc_prev in (0.0, 0.2, 1.0):
            for start in FsmState:
                c = replace(AimdController.initial(p), k=3, fsm_state=start)
                out = hourly_update(c, gamma, soc_prev)
                assert (out.fsm_state, out.k) == (FsmState.INCREASE, 4)


# ---------------------------------------------------------------------------
# simulation scenarios

TUNE_SOC = 0.10


@pytest.fixture(scope="module")
def scenario():
    return SimConfig(default_world(n_tags=20, days=30, seed=1), initial_soc=TUNE_SOC)


@CRIT(9, "30-day ordering AIMD > bounded > constant, rate limits")
def test_c9_scheduler_ordering(scenario, record_property):
    t0 = time.perf_counter()
    per_day, kmax = {}, {}
    for v in Variant:
        stats = run(with_scheduler(scenario, v))
        tags = stats.tag_indices()
        per_day[v] = float(stats.daily_counts()[:, tags].mean())
        kmax[v] = stats.k_hourly
    elapsed = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{v.value} {per_day[v]:.1f}/day" for v in Variant) + f"; {elapsed:.1f} s")
    assert per_day[Variant.AIMD] > per_day[Variant.BOUNDED_AIMD] > per_day[Variant.CONSTANT_RATE]
    assert kmax[Variant.BOUNDED_AIMD].max() <= 6
    assert np.all(kmax[Variant.CONSTANT_RATE] == 1)
    assert elapsed < 60.0


@CRIT(10, "90 days from empty: every tag charged and localizing")
def test_c10_energy_neutrality(record_property):
    stats = run(SimConfig(default_world(n_tags=20, days=90, seed=1), initial_soc=0.0))
    tags = stats.tag_indices()
    final = stats.final_soc()[tags]
    locs = stats.total_localizations()[tags]
    record_property("detail", f"final tag SoC min {final.min():.4f} mean {final.mean():.4f}; "
                              f"localizations per tag min {locs.min()}")
    assert np.all(final > 0)
    assert np.all(locs > 0)


@CRIT(11, "3.59 uW harvest empties a full battery within a year")
def test_c11_starvation(record_property):
    world = WorldConfig((), (TagSpec("T1", Position(0.0, 0.0, 1.0), "weak"),), duration_days=365, seed=0)
    cfg = SimConfig(world, profiles={"weak": en.HarvestProfile.constant(3.59e-6)}, initial_soc=1.0)
    stats = run(cfg)
    soc = stats.soc_daily[:, 0]
    empty = np.flatnonzero(soc == 0.0)
    record_property("detail", f"empty on day {empty[0] + 1}" if len(empty) else f"final SoC {soc[-1]:.4f}")
    assert len(empty) > 0
    assert stats.ledger_balanced().all()


# ---------------------------------------------------------------------------
# determinism

TIME_FIELDS = ("start_time", "end_time")


def _same_outputs(a, b):
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        if name == "manifest.json":
            ma, mb = (json.loads((d / name).read_text()) for d in (a, b))
            for k in TIME_FIELDS:
                ma.pop(k), mb.pop(k)
            assert ma == mb
        else:
            assert filecmp.cmp(a / name, b / name, shallow=False), name
    return names


def _measurements(path):
    rng = np.random.default_rng(5)
    rows = ["problem_id,kind,anchor_x,anchor_y,anchor_z,value_m,initiator_x,initiator_y,initiator_z"]
    for pid in range(5):
        a = rng.uniform([0, 0, 2], [10, 10, 3], (6, 3))
        p = rng.uniform([2, 2, 0.5], [8, 8, 1.5])
        d = np.linalg.norm(a - p, axis=1) + rng.normal(0, 0.05, 6)
        rows += [f"P{pid},twr," + ",".join(repr(float(c)) for c in (*xyz, v)) + ",,," for xyz, v in zip(a, d)]
    path.write_text("\n".join(rows) + "\n")


@CRIT(12, "identical config and seed give byte-identical outputs")
def test_c12_determinism(tmp_path, record_property):
    meas = tmp_path / "m.csv"
    _measurements(meas)
    grid = tmp_path / "grid.yaml"
    grid.write_text("beta1: [-9.0]\nbeta2: [-7.0, -6.0]\ngamma: [0.5]\n")
    compared = []
    for run_id in ("a", "b"):
        out = tmp_path / run_id
        for sub in ("solve", "sim", "tune"):
            (out / sub).mkdir(parents=True)
        for solver in ("lm", "larsson"):
            assert cli.main(["solve", str(meas), "--solver", solver, "-o", str(out / "solve" / f"{solver}.csv")]) == 0
        assert cli.main(["simulate", "--seed", "3", "--days", "2", "--tags", "5", "--initial-soc", "0.5",
                         "--with-solvers", "-o", str(out / "sim")]) == 0
        assert cli.main(["report", str(out / "sim"), "-o", str(out / "report")]) == 0
        assert cli.main(["tune", "--grid", str(grid), "--days", "1", "-o", str(out / "tune")]) == 0
    for sub in ("solve", "sim", "report", "tune"):
        compared += _same_outputs(tmp_path / "a" / sub, tmp_path / "b" / sub)
    record_property("detail", f"{len(compared)} files identical")

import math
import warnings
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtlsim import energy as en
from rtlsim.energy import (BatteryState, HarvestProfile, TraceError, TraceGapWarning, battery_deposit,
                           battery_withdraw, ingest_trace, lux_to_power, self_discharge_current)
from rtlsim.scheduler import AimdParams
from rtlsim.sim import SimConfig, TagSpec, WorldConfig, run
from rtlsim.solvers import Position

CAP = 466.2


def test_capacity_default():
    assert en.DEFAULT_CAPACITY_J == pytest.approx(35e-3 * 3600 * 3.7, rel=1e-12)


def test_deposit_examples():
    s = battery_deposit(BatteryState.from_joules(CAP, 0.0), 1.0)
    assert s.stored == 1.0
    full, overflow = en.deposit_pj(BatteryState.from_joules(CAP, 466.0), en.joules_to_pj(1.0))
    assert full.stored == pytest.approx(466.2, abs=1e-12)
    assert en.pj_to_joules(overflow) == pytest.approx(0.8, abs=1e-12)
    assert battery_deposit(BatteryState.from_joules(CAP, 100.0), 0.0).stored == 100.0


def test_withdraw_examples():
    s, ok = battery_withdraw(BatteryState.from_joules(CAP, 1e-3), 338.30e-6)
    assert ok and s.stored == pytest.approx(1e-3 - 338.30e-6, abs=1e-12)
    s, ok = battery_withdraw(BatteryState.from_joules(CAP, 300e-6), 338.30e-6)
    assert not ok and s.stored_pj == 0
    s, ok = battery_withdraw(BatteryState.from_joules(CAP, 338.30e-6), 338.30e-6)
    assert not ok and s.stored_pj == 0


def test_negative_amounts_rejected():
    s = BatteryState.from_joules(CAP, 1.0)
    with pytest.raises(ValueError):
        battery_deposit(s, -1.0)
    with pytest.raises(ValueError):
        battery_withdraw(s, -1.0)
    with pytest.raises(ValueError):
        BatteryState(10, 11)


@settings(max_examples=200)
@given(st.integers(0, 10**15),
       st.lists(st.tuples(st.booleans(), st.integers(0, 10**14)), max_size=60))
def test_random_operation_sequences_stay_in_bounds(start, ops):
    cap = en.joules_to_pj(CAP)
    s = BatteryState(cap, min(start, cap))
    balance = s.stored_pj
    for is_deposit, amount in ops:
        if is_deposit:
            s, overflow = en.deposit_pj(s, amount)
            balance += amount - overflow
        else:
            before = s.stored_pj
            s, ok = en.withdraw_pj(s, amount)
            balance -= amount if ok else before
            assert ok == (before - amount > 0)
        assert 0 <= s.stored_pj <= cap
        assert s.stored_pj == balance
        assert 0.0 <= s.soc <= 1.0


@pytest.mark.parametrize("soc,amps", [(1.0, 4e-6), (0.30, 1e-6), (0.65, 2.5e-6), (0.0, 1e-6), (0.1, 1e-6)])
def test_self_discharge_examples(soc, amps):
    assert self_discharge_current(soc) == pytest.approx(amps, rel=1e-12)


def test_self_discharge_vectorised_and_validated():
    out = self_discharge_current(np.array([0.3, 1.0]))
    np.testing.assert_allclose(out, [1e-6, 4e-6], rtol=1e-12)
    with pytest.raises(ValueError):
        self_discharge_current(1.5)


def test_minute_drain_matches_formula():
    cap = np.array([en.joules_to_pj(CAP)] * 3)
    stored = (cap * np.array([1.0, 0.65, 0.1])).astype(np.int64)
    got = en.minute_drain_pj(stored, cap, 7.84e-6)
    want = [(i * 3.7 + 7.84e-6) * 60 * 1e12 for i in (4e-6, 2.5e-6, 1e-6)]
    np.testing.assert_allclose(got, want, rtol=1e-9)
    assert got.dtype == np.int64


# ---------------------------------------------------------------------------
# lux model


def test_lux_zero_and_thresholds():
    assert lux_to_power(0.0) == 0.0
    assert lux_to_power(0.19) == 0.0
    assert lux_to_power(0.2) > 0.0
    assert lux_to_power(50_000.0) == lux_to_power(10_000.0)
    with pytest.raises(ValueError):
        lux_to_power(-1.0)


def test_lux_model_continuous_and_increasing():
    lux = np.arange(1.0, 10_001.0)
    p = lux_to_power(lux)
    assert np.all(p > 0)
    rel_jump = np.abs(np.diff(p)) / p[:-1]
    # a 1-lux step changes the power by at most the local slope, ~1/lux
    assert np.all(rel_jump <= 2.0 / lux[:-1])
    assert np.all(np.diff(p) > 0)
    for b in en.REGION_BOUNDS:
        eps = 1e-9
        assert lux_to_power(b - eps) == pytest.approx(lux_to_power(b + eps), rel=1e-7)


def test_lux_model_refit_reproduces_frozen_default():
    fitted = en.fit_lux_model(en.REFERENCE_POINTS)
    for name in ("low", "mid", "high"):
        np.testing.assert_allclose(getattr(fitted, name), getattr(en.DEFAULT_LUX_MODEL, name), rtol=1e-9)


def test_lux_model_fits_reference_points():
    lux, watts = np.array(en.REFERENCE_POINTS).T
    pred = np.log10(lux_to_power(lux))
    obs = np.log10(watts)
    r2 = 1 - np.sum((obs - pred) ** 2) / np.sum((obs - obs.mean()) ** 2)
    assert r2 > 0.99


@pytest.mark.parametrize("name,centre,half", [("dim", 0.31, 0.30), ("typical", 1.81, 1.21), ("bright", 18.51, 5.0)])
def test_synthetic_profile_daily_energy(name, centre, half):
    prof = en.synthetic_profile(name)
    assert len(prof.samples) == 1440
    assert abs(prof.daily_energy() - centre) <= half
    assert prof.daily_energy() == pytest.approx(en.SYNTHETIC_TARGETS[name], rel=1e-6)


def test_synthetic_profile_unknown():
    with pytest.raises(KeyError):
        en.synthetic_profile("cave")


def test_harvest_profile_validation_and_readonly():
    prof = HarvestProfile.constant(1e-6, minutes=10)
    with pytest.raises(ValueError):
        prof.samples[0] = 1.0
    with pytest.raises(ValueError):
        HarvestProfile(np.array([-1.0]))
    with pytest.raises(ValueError):
        HarvestProfile(np.array([]))
    assert prof.minute_energy_pj()[0] == 60_000_000


# ---------------------------------------------------------------------------
# traces


def _write(path, header, rows):
    path.write_text("\n".join([header] + [f"{t.isoformat()},{v}" for t, v in rows]) + "\n")


T0 = datetime(2024, 3, 1, 8, 0, 0)


def test_one_hertz_constant_lux_trace(tmp_path):
    p = tmp_path / "lux.csv"
    _write(p, "timestamp,lux", [(T0 + timedelta(seconds=s), 500) for s in range(3600)])
    prof = ingest_trace(p)
    assert len(prof.samples) == 60
    np.testing.assert_allclose(prof.samples, lux_to_power(500.0), rtol=1e-12)


def test_watts_trace_and_minute_means(tmp_path):
    p = tmp_path / "w.csv"
    _write(p, "timestamp,watts", [(T0, 1e-6), (T0 + timedelta(seconds=30), 3e-6), (T0 + timedelta(minutes=1), 5e-6)])
    prof = ingest_trace(p)
    np.testing.assert_allclose(prof.samples, [2e-6, 5e-6])


def test_empty_trace(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(TraceError):
        ingest_trace(p)
    p.write_text("timestamp,lux\n")
    with pytest.raises(TraceError):
        ingest_trace(p)


def test_gap_is_zero_filled_with_warning(tmp_path):
    p = tmp_path / "gap.csv"
    rows = [(T0 + timedelta(minutes=m), 1e-6) for m in (0, 1, 4, 5)]
    _write(p, "timestamp,watts", rows)
    with pytest.warns(TraceGapWarning):
        prof = ingest_trace(p)
    np.testing.assert_allclose(prof.samples, [1e-6, 1e-6, 0.0, 0.0, 1e-6, 1e-6])


def test_no_warning_without_gap(tmp_path):
    p = tmp_path / "ok.csv"
    _write(p, "timestamp,watts", [(T0 + timedelta(minutes=m), 1e-6) for m in range(5)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ingest_trace(p)


def test_malformed_row_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(f"timestamp,lux\n{T0.isoformat()},10\n{(T0 + timedelta(minutes=1)).isoformat()},abc\n")
    with pytest.raises(TraceError, match=r"bad\.csv:3"):
        ingest_trace(p)


def test_non_monotone_timestamps(tmp_path):
    p = tmp_path / "order.csv"
    _write(p, "timestamp,lux", [(T0, 1), (T0 + timedelta(minutes=2), 1), (T0 + timedelta(minutes=1), 1)])
    with pytest.raises(TraceError, match="increasing"):
        ingest_trace(p)


def test_unknown_value_column(tmp_path):
    p = tmp_path / "x.csv"
    _write(p, "timestamp,volts", [(T0, 1)])
    with pytest.raises(TraceError):
        ingest_trace(p)


# ---------------------------------------------------------------------------
# long-run drain


def _closed_form_energy(e0, seconds, cap=CAP, sleep=7.84e-6):
    """Stored energy after ``seconds`` of sleep and leakage with no harvest."""
    v, i1 = 3.7, 1e-6
    slope = 3e-6 / 0.7
    beta = v * slope / cap
    alpha = sleep + v * i1 - 0.3 * v * slope
    knee = 0.3 * cap
    if e0 > knee:
        t_knee = math.log((e0 + alpha / beta) / (knee + alpha / beta)) / beta
        if seconds <= t_knee:
            return (e0 + alpha / beta) * math.exp(-beta * seconds) - alpha / beta
        seconds -= t_knee
        e0 = knee
    return max(e0 - (sleep + v * i1) * seconds, 0.0)


def test_zero_harvest_drain_matches_closed_form():
    days = 30
    world = WorldConfig((), (TagSpec("T1", Position(0, 0, 1), "none"),), duration_days=days)
    cfg = SimConfig(world, scheduler=AimdParams(variant="constant_rate", constant_rate_k=0),
                    profiles={"none": HarvestProfile.constant(0.0)}, initial_soc=1.0)
    stats = run(cfg)
    for d in (0, 9, days - 1):
        sim = stats.soc_daily[d, 0] * CAP
        exact = _closed_form_energy(CAP, (d + 1) * 86400.0)
        assert abs(sim - exact) <= 1e-3 * (CAP - exact)
    assert stats.ledger_balanced().all()


def test_sleep_and_leak_alone_outlast_a_year():
    assert _closed_form_energy(CAP, 365 * 86400.0) > 0.0

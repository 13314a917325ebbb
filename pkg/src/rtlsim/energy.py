"""Battery store, self-discharge, illuminance-to-power model and harvest traces.

Energy is held as an integer number of picojoules so that every deposit,
withdrawal and leak is exact and the simulator's ledger balances to the
last unit.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

PJ_PER_J = 10**12
NOMINAL_VOLTAGE = 3.7  # V
DEFAULT_CAPACITY_J = 466.2  # 35 mAh at 3.7 V
MINUTE = 60.0  # s

LEAK_FULL_A = 4e-6
LEAK_KNEE_A = 1e-6
LEAK_KNEE_SOC = 0.30


def joules_to_pj(energy: float) -> int:
    """Round an energy in joules to the nearest picojoule."""
    if not math.isfinite(energy):
        raise ValueError(f"energy must be finite, got {energy}")
    return int(round(energy * PJ_PER_J))


def pj_to_joules(energy_pj: int) -> float:
    return energy_pj / PJ_PER_J


# ---------------------------------------------------------------------------
# battery


@dataclass(frozen=True)
class BatteryState:
    """Energy store; ``stored_pj`` and ``capacity_pj`` are integer picojoules."""

    capacity_pj: int
    stored_pj: int = 0

    def __post_init__(self):
        if self.capacity_pj <= 0:
            raise ValueError("capacity must be positive")
        if not 0 <= self.stored_pj <= self.capacity_pj:
            raise ValueError(f"stored energy {self.stored_pj} pJ outside [0, {self.capacity_pj}]")

    @classmethod
    def from_joules(cls, capacity: float = DEFAULT_CAPACITY_J, stored: float = 0.0) -> "BatteryState":
        return cls(joules_to_pj(capacity), joules_to_pj(stored))

    @classmethod
    def from_soc(cls, soc: float, capacity: float = DEFAULT_CAPACITY_J) -> "BatteryState":
        if not 0.0 <= soc <= 1.0:
            raise ValueError(f"soc must be in [0, 1], got {soc}")
        cap = joules_to_pj(capacity)
        return cls(cap, int(round(soc * cap)))

    @property
    def capacity(self) -> float:
        return pj_to_joules(self.capacity_pj)

    @property
    def stored(self) -> float:
        return pj_to_joules(self.stored_pj)

    @property
    def soc(self) -> float:
        return self.stored_pj / self.capacity_pj


def deposit_pj(state: BatteryState, energy_pj: int) -> tuple[BatteryState, int]:
    """Add energy, clamping at capacity. Returns the new state and the discarded overflow."""
    if energy_pj < 0:
        raise ValueError("deposit must be non-negative")
    total = state.stored_pj + energy_pj
    kept = min(total, state.capacity_pj)
    return BatteryState(state.capacity_pj, kept), total - kept


def withdraw_pj(state: BatteryState, energy_pj: int) -> tuple[BatteryState, bool]:
    """Remove energy. Succeeds only if the battery stays strictly non-empty."""
    if energy_pj < 0:
        raise ValueError("withdrawal must be non-negative")
    remaining = state.stored_pj - energy_pj
    if remaining > 0:
        return BatteryState(state.capacity_pj, remaining), True
    return BatteryState(state.capacity_pj, 0), False


def battery_deposit(state: BatteryState, energy: float) -> BatteryState:
    """Deposit ``energy`` joules; harvest beyond capacity is discarded."""
    if energy < 0:
        raise ValueError("deposit must be non-negative")
    return deposit_pj(state, joules_to_pj(energy))[0]


def battery_withdraw(state: BatteryState, energy: float) -> tuple[BatteryState, bool]:
    """Withdraw ``energy`` joules; see :func:`withdraw_pj`."""
    if energy < 0:
        raise ValueError("withdrawal must be non-negative")
    return withdraw_pj(state, joules_to_pj(energy))


def self_discharge_current(soc):
    """Leakage current in amperes: 4 uA at full charge, 1 uA at 30 % and below.

    Linear between 30 % and 100 %. Accepts a scalar or an array.
    """
    s = np.asarray(soc, dtype=float)
    if np.any((s < 0.0) | (s > 1.0)):
        raise ValueError("soc must be in [0, 1]")
    slope = (LEAK_FULL_A - LEAK_KNEE_A) / (1.0 - LEAK_KNEE_SOC)
    cur = np.where(s >= LEAK_KNEE_SOC, LEAK_KNEE_A + slope * (s - LEAK_KNEE_SOC), LEAK_KNEE_A)
    return float(cur) if cur.ndim == 0 else cur


def minute_drain_pj(stored_pj: np.ndarray, capacity_pj: np.ndarray, sleep_power: float) -> np.ndarray:
    """Integer pJ of sleep plus leakage for one minute at the given charge levels."""
    soc = np.asarray(stored_pj, dtype=float) / np.asarray(capacity_pj, dtype=float)
    leak = self_discharge_current(np.clip(soc, 0.0, 1.0)) * NOMINAL_VOLTAGE * MINUTE
    return np.rint((leak + sleep_power * MINUTE) * PJ_PER_J).astype(np.int64)


# ---------------------------------------------------------------------------
# illuminance to harvested power

LUX_MIN = 0.2
LUX_MAX = 10_000.0
REGION_BOUNDS = (15.0, 1500.0)

# Reference operating points (lux, W into a 3.7 V sink) for a ~10 cm^2
# amorphous indoor cell behind an MPPT boost converter. The default model
# is the three-segment fit of these points.
REFERENCE_POINTS = (
    (0.2, 2.0e-8), (0.5, 6.0e-8), (1.0, 1.4e-7), (2.0, 3.2e-7), (5.0, 9.0e-7),
    (10.0, 1.9e-6), (15.0, 2.9e-6), (30.0, 6.0e-6), (60.0, 1.25e-5), (100.0, 2.1e-5),
    (200.0, 4.3e-5), (400.0, 8.8e-5), (700.0, 1.55e-4), (1000.0, 2.2e-4),
    (1500.0, 3.3e-4), (2500.0, 5.4e-4), (4000.0, 8.4e-4), (6000.0, 1.22e-3),
    (8000.0, 1.58e-3), (10000.0, 1.92e-3),
)


@dataclass(frozen=True)
class LuxPowerModel:
    """Three polynomials in ``log10(lux)`` giving ``log10(watts)``.

    Segments cover [0.2, 15], [15, 1500] and [1500, 10000] lux and are
    blended by logistic weights centred on the region boundaries with
    width ``blend_width`` decades.
    """

    low: tuple[float, ...]
    mid: tuple[float, ...]
    high: tuple[float, ...]
    blend_width: float = 0.05
    bounds: tuple[float, float] = REGION_BOUNDS

    def __post_init__(self):
        if not self.blend_width > 0:
            raise ValueError("blend_width must be positive")
        for name in ("low", "mid", "high"):
            coeffs = getattr(self, name)
            if len(coeffs) == 0 or not all(math.isfinite(c) for c in coeffs):
                raise ValueError(f"{name} coefficients must be finite and non-empty")

    def log_power(self, log_lux: np.ndarray) -> np.ndarray:
        b1, b2 = (math.log10(b) for b in self.bounds)
        s1 = 0.5 * (1.0 + np.tanh((log_lux - b1) / (2.0 * self.blend_width)))
        s2 = 0.5 * (1.0 + np.tanh((log_lux - b2) / (2.0 * self.blend_width)))
        return ((1.0 - s1) * np.polyval(self.low, log_lux)
                + s1 * (1.0 - s2) * np.polyval(self.mid, log_lux)
                + s2 * np.polyval(self.high, log_lux))


def fit_lux_model(points: Sequence[tuple[float, float]] = REFERENCE_POINTS, degree: int = 2,
                  blend_width: float = 0.05) -> LuxPowerModel:
    """Least-squares fit of the three log-log segments to ``(lux, watts)`` points.

    Boundary points belong to both adjacent segments.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or np.any(pts <= 0):
        raise ValueError("points must be positive (lux, watts) pairs")
    lx, lp = np.log10(pts[:, 0]), np.log10(pts[:, 1])
    b1, b2 = REGION_BOUNDS
    segments = []
    for lo, hi in ((LUX_MIN, b1), (b1, b2), (b2, LUX_MAX)):
        mask = (pts[:, 0] >= lo) & (pts[:, 0] <= hi)
        if mask.sum() <= degree:
            raise ValueError(f"not enough points in [{lo}, {hi}] lux for degree {degree}")
        segments.append(tuple(float(c) for c in np.polyfit(lx[mask], lp[mask], degree)))
    return LuxPowerModel(*segments, blend_width=blend_width)


# Frozen output of fit_lux_model(REFERENCE_POINTS); a test refits and compares.
DEFAULT_LUX_MODEL = LuxPowerModel(
    low=(-0.05364822699103326, 1.1831920461873193, -6.851268969879718),
    mid=(-0.016058951360197204, 1.0989495986759885, -6.808709977533215),
    high=(-0.06183131423619473, 1.372817164453022, -7.21814687181936),
)


def lux_to_power(lux, model: LuxPowerModel = DEFAULT_LUX_MODEL):
    """Harvested power in watts for an illuminance in lux (scalar or array).

    Zero below 0.2 lux; inputs above 10 klux are evaluated at 10 klux.
    """
    x = np.asarray(lux, dtype=float)
    if np.any(x < 0) or np.any(~np.isfinite(x)):
        raise ValueError("lux must be finite and non-negative")
    clipped = np.clip(x, LUX_MIN, LUX_MAX)
    p = np.where(x < LUX_MIN, 0.0, 10.0 ** model.log_power(np.log10(clipped)))
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# harvest profiles


@dataclass(frozen=True)
class HarvestProfile:
    """Harvested power (W) at one-minute resolution. Wraps when a run is longer."""

    samples: np.ndarray = field(repr=False)
    label: str = ""

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float).reshape(-1)
        if arr.size == 0:
            raise ValueError("harvest profile is empty")
        if np.any(~np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("harvest samples must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @classmethod
    def constant(cls, watts: float, minutes: int = 1440, label: str = "") -> "HarvestProfile":
        return cls(np.full(minutes, float(watts)), label or f"constant_{watts:g}W")

    def minute_energy_pj(self) -> np.ndarray:
        return np.rint(self.samples * MINUTE * PJ_PER_J).astype(np.int64)

    def daily_energy(self) -> float:
        """Mean energy per 1440 minutes in joules."""
        return float(self.samples.mean() * MINUTE * 1440)


def daylight_lux(peak: float, on_hour: float = 7.0, off_hour: float = 19.0, ramp_hours: float = 1.5,
                 night: float = 0.0) -> np.ndarray:
    """One day of illuminance per minute: flat-topped day with cosine ramps."""
    t = (np.arange(1440) + 0.5) / 60.0
    up = np.clip((t - on_hour) / ramp_hours, 0.0, 1.0)
    down = np.clip((off_hour - t) / ramp_hours, 0.0, 1.0)
    shape = 0.5 * (1.0 - np.cos(np.pi * np.minimum(up, down)))
    return night + (peak - night) * shape


# Target daily energies (J) of the bundled synthetic profiles.
SYNTHETIC_TARGETS = {"dim": 0.31, "typical": 1.81, "bright": 18.51}


def synthetic_profile(name: str, model: LuxPowerModel = DEFAULT_LUX_MODEL) -> HarvestProfile:
    """Bundled day/night profile whose daily energy matches ``SYNTHETIC_TARGETS[name]``.

    The day peak illuminance is found by bisection on a log scale.
    """
    if name not in SYNTHETIC_TARGETS:
        raise KeyError(f"unknown synthetic profile {name!r}; choose from {sorted(SYNTHETIC_TARGETS)}")
    target = SYNTHETIC_TARGETS[name]

    def energy(peak):
        return float(np.sum(lux_to_power(daylight_lux(peak), model)) * MINUTE)

    lo, hi = math.log10(LUX_MIN), math.log10(LUX_MAX)
    if energy(10.0 ** hi) < target:
        raise ValueError(f"model cannot reach {target} J/day")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if energy(10.0 ** mid) < target:
            lo = mid
        else:
            hi = mid
    return HarvestProfile(lux_to_power(daylight_lux(10.0 ** hi), model), name)


# ---------------------------------------------------------------------------
# trace ingestion


class TraceError(ValueError):
    """Trace file is empty, malformed or not time-ordered."""


class TraceGapWarning(UserWarning):
    """A trace had minutes without samples; they were filled with 0 W."""


def ingest_trace(path, fmt: str | None = None, model: LuxPowerModel = DEFAULT_LUX_MODEL,
                 label: str | None = None) -> HarvestProfile:
    """Read a ``timestamp,lux`` or ``timestamp,watts`` CSV into a one-minute profile.

    The second header column selects the interpretation unless ``fmt`` is
    given. Samples are converted to watts, then averaged per wall-clock
    minute. Minutes with no sample inside the trace span become 0 W and
    trigger a :class:`TraceGapWarning`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise TraceError(f"{path}: empty trace")
    header_line, header = rows[0]
    if len(header) != 2:
        raise TraceError(f"{path}:{header_line}: header must have two columns")
    kind = (fmt or header[1]).strip().lower()
    if kind not in ("lux", "watts"):
        raise TraceError(f"{path}:{header_line}: unknown value column {kind!r}, expected lux or watts")
    if len(rows) == 1:
        raise TraceError(f"{path}: trace has a header but no samples")

    times, values = [], []
    for line, row in rows[1:]:
        if len(row) != 2:
            raise TraceError(f"{path}:{line}: expected 2 columns, got {len(row)}")
        try:
            ts = datetime.fromisoformat(row[0].strip())
            val = float(row[1])
        except ValueError as exc:
            raise TraceError(f"{path}:{line}: cannot parse row {row!r}: {exc}") from None
        if not math.isfinite(val) or val < 0:
            raise TraceError(f"{path}:{line}: value must be finite and non-negative")
        if times and ts <= times[-1]:
            raise TraceError(f"{path}:{line}: timestamps must be strictly increasing")
        times.append(ts)
        values.append(val)

    watts = np.asarray(values) if kind == "watts" else lux_to_power(np.asarray(values), model)
    t0 = times[0].replace(second=0, microsecond=0)
    minute_idx = np.array([int((t - t0).total_seconds() // 60) for t in times])
    n = int(minute_idx[-1]) + 1
    sums = np.bincount(minute_idx, weights=watts, minlength=n)
    counts = np.bincount(minute_idx, minlength=n)
    gaps = int(np.sum(counts == 0))
    if gaps:
        warnings.warn(f"{path}: {gaps} minute(s) without samples filled with 0 W", TraceGapWarning,
                      stacklevel=2)
    samples = np.divide(sums, counts, out=np.zeros(n), where=counts > 0)
    return HarvestProfile(samples, label or path.stem)

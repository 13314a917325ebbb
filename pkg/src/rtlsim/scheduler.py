"""Per-tag AIMD rate control and the offline parameter tuner.

Each tag keeps ``k``, its number of active localizations per hour. Once an
hour the battery metric is compared with two thresholds: below ``beta1``
the rate halves, above ``beta2`` it grows by one, otherwise it holds. A
state of charge at or above ``gamma`` always grows the rate. The bounded
variant caps the metric once ``k`` reaches ``k_max``; the constant-rate
baseline ignores the battery.
"""

from __future__ import annotations

import csv
import enum
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .energy import DEFAULT_CAPACITY_J

log = logging.getLogger(__name__)

SOC_FLOOR = 1e-6
MINUTES_PER_HOUR = 60
# Stands in for the infinite high-battery reward; ordered above every finite metric.
REWARD = math.inf


class Variant(str, enum.Enum):
    AIMD = "aimd"
    BOUNDED_AIMD = "bounded_aimd"
    CONSTANT_RATE = "constant_rate"


class FsmState(str, enum.Enum):
    HALVE = "halve"
    HOLD = "hold"
    INCREASE = "increase"


@dataclass(frozen=True)
class AimdParams:
    # defaults are the tuner's choice on the bundled 20-tag scenario
    beta1: float = -9.0
    beta2: float = -7.0
    gamma: float = 0.5
    k_max: int = 6
    variant: Variant = Variant.AIMD
    constant_rate_k: int = 1
    # B in the metric; the battery capacity in joules by default
    capacity_b: float = DEFAULT_CAPACITY_J
    initial_k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        errors = []
        if not self.beta1 <= self.beta2:
            errors.append(f"beta1 ({self.beta1}) must be <= beta2 ({self.beta2})")
        if not 0.0 < self.gamma <= 1.0:
            errors.append(f"gamma must be in (0, 1], got {self.gamma}")
        if self.k_max < 1:
            errors.append(f"k_max must be >= 1, got {self.k_max}")
        if self.constant_rate_k < 0:
            errors.append("constant_rate_k must be >= 0")
        if self.initial_k < 0:
            errors.append("initial_k must be >= 0")
        if not self.capacity_b >= 0:
            errors.append("capacity_b must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class AimdController:
    k: int
    fsm_state: FsmState
    last_soc: float | None
    params: AimdParams

    @classmethod
    def initial(cls, params: AimdParams) -> "AimdController":
        k = params.constant_rate_k if params.variant is Variant.CONSTANT_RATE else params.initial_k
        if params.variant is Variant.BOUNDED_AIMD:
            k = min(k, params.k_max)
        return cls(k, FsmState.HOLD, None, params)


def metric(soc_now: float, soc_prev: float, capacity_b: float, gamma: float) -> float:
    """Battery metric: ``B (b_now - b_prev) - (1/b_now - 1)``, or the reward when ``b_now >= gamma``."""
    if not (0.0 <= soc_now <= 1.0 and 0.0 <= soc_prev <= 1.0):
        raise ValueError("state of charge must be in [0, 1]")
    if soc_now >= gamma:
        return REWARD
    b = max(soc_now, SOC_FLOOR)
    return capacity_b * (soc_now - soc_prev) - (1.0 / b - 1.0)


def metric_bounded(m: float, k: int, params: AimdParams) -> float:
    if k < params.k_max:
        return m
    return min(m, (params.beta1 + params.beta2) / 2.0)


def next_state(m: float, params: AimdParams) -> FsmState:
    # boundary ties resolve to hold
    if m < params.beta1:
        return FsmState.HALVE
    if m > params.beta2:
        return FsmState.INCREASE
    return FsmState.HOLD


def fsm_step(controller: AimdController, m: float) -> AimdController:
    """Move to the state selected by ``m`` and update ``k`` for that state."""
    p = controller.params
    state = next_state(m, p)
    k = controller.k
    if state is FsmState.HALVE:
        k //= 2
    elif state is FsmState.INCREASE:
        k += 1
        if p.variant is Variant.BOUNDED_AIMD:
            k = min(k, p.k_max)
    return replace(controller, k=k, fsm_state=state)


def hourly_update(controller: AimdController, soc_now: float, soc_prev: float | None = None) -> AimdController:
    """One hourly evaluation. ``soc_prev`` defaults to the controller's last sample."""
    p = controller.params
    if soc_prev is None:
        soc_prev = controller.last_soc if controller.last_soc is not None else soc_now
    if p.variant is Variant.CONSTANT_RATE:
        return replace(controller, k=p.constant_rate_k, last_soc=soc_now)
    m = metric(soc_now, soc_prev, p.capacity_b, p.gamma)
    if p.variant is Variant.BOUNDED_AIMD:
        m = metric_bounded(m, controller.k, p)
    return replace(fsm_step(controller, m), last_soc=soc_now)


def schedule_hour(k: int, rng_seed) -> frozenset[int]:
    """``k`` distinct minutes of the hour, uniformly at random.

    ``rng_seed`` is a seed or a ``numpy.random.Generator``. ``k`` above 60
    is clamped with a warning.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > MINUTES_PER_HOUR:
        log.warning("requested %d localizations in one hour; clamped to %d", k, MINUTES_PER_HOUR)
        k = MINUTES_PER_HOUR
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if k == MINUTES_PER_HOUR:
        return frozenset(range(MINUTES_PER_HOUR))
    return frozenset(int(m) for m in rng.choice(MINUTES_PER_HOUR, size=k, replace=False))


# ---------------------------------------------------------------------------
# tuner

TUNE_INITIAL_SOC = 0.10
TUNE_MIN_FINAL_SOC = 0.10
DEFAULT_GRID = {
    "beta1": (-20.0, -9.0, -5.0),
    "beta2": (-7.0, -6.0, 0.0),
    "gamma": (0.5, 0.7, 0.9),
}


class InfeasibleGridError(RuntimeError):
    """Every grid point left some tag below the required final charge."""


@dataclass(frozen=True)
class TunePoint:
    beta1: float
    beta2: float
    gamma: float
    feasible: bool
    mean_localizations_per_tag: float
    min_final_soc: float


@dataclass(frozen=True)
class TuneResult:
    best: AimdParams
    objective: float
    points: tuple[TunePoint, ...]


def expand_grid(beta1: Iterable[float], beta2: Iterable[float], gamma: Iterable[float]) -> list[tuple[float, float, float]]:
    """Cartesian product filtered to ``beta1 <= beta2``."""
    pts = [(float(a), float(b), float(g)) for a, b, g in itertools.product(beta1, beta2, gamma) if a <= b]
    if not pts:
        raise ValueError("search grid is empty after filtering beta1 <= beta2")
    return pts


def _evaluate(args) -> TunePoint:
    from .sim import run

    config, (b1, b2, g) = args
    sched = replace(config.scheduler, beta1=b1, beta2=b2, gamma=g)
    stats = run(replace(config, scheduler=sched, initial_soc=TUNE_INITIAL_SOC))
    tags = stats.tag_indices()
    final = stats.final_soc()[tags]
    j = float(np.mean(stats.total_localizations()[tags]))
    min_soc = float(final.min())
    return TunePoint(b1, b2, g, bool(min_soc >= TUNE_MIN_FINAL_SOC), j, min_soc)


def tune(grid: Sequence[tuple[float, float, float]], scenario, workers: int = 1) -> TuneResult:
    """Pick the grid point with the most localizations per tag among feasible ones.

    ``scenario`` is a :class:`rtlsim.sim.SimConfig`; every evaluation starts
    all batteries at 10 % and is feasible when every tag ends at or above
    10 %. Ties keep the earliest grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("search grid is empty")
    jobs = [(scenario, pt) for pt in grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = tuple(pool.map(_evaluate, jobs))
    else:
        points = tuple(_evaluate(j) for j in jobs)
    feasible = [p for p in points if p.feasible]
    if not feasible:
        raise InfeasibleGridError(
            f"no feasible point among {len(points)}; best final tag SoC was "
            f"{max(p.min_final_soc for p in points):.4f}")
    best = max(feasible, key=lambda p: p.mean_localizations_per_tag)
    params = replace(scenario.scheduler, beta1=best.beta1, beta2=best.beta2, gamma=best.gamma)
    return TuneResult(params, best.mean_localizations_per_tag, points)


TUNE_REPORT_FIELDS = ("beta1", "beta2", "gamma", "feasible", "mean_localizations_per_tag", "min_final_soc")


def write_tune_report(points: Iterable[TunePoint], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TUNE_REPORT_FIELDS)
        for p in points:
            w.writerow([repr(p.beta1), repr(p.beta2), repr(p.gamma), str(p.feasible).lower(),
                        f"{p.mean_localizations_per_tag:.6f}", f"{p.min_final_soc:.9f}"])

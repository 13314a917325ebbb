"""Active/passive ranging exchange: reply slots, message count and energy costs.

An active tag wakes nearby anchors, sends one poll and collects one delayed
reply per anchor, then broadcasts its estimate. Anchor ``i`` answers after
``delta_t_fix + delta_t * ((i - 1) mod n_hat_a)``, so anchors whose indices
differ by a non-multiple of ``n_hat_a`` never reply in the same slot.
Passive tags overhear the same exchange.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Role(str, enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


@dataclass(frozen=True)
class ProtocolParams:
    delta_t_fix: float = 2e-3  # s
    delta_t: float = 290e-6  # s, matches the per-slot anchor duration step
    n_hat_a: int = 10

    def __post_init__(self):
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        if self.delta_t_fix < 0:
            raise ValueError("delta_t_fix must be non-negative")
        if int(self.n_hat_a) != self.n_hat_a or self.n_hat_a < 1:
            raise ValueError("n_hat_a must be an integer >= 1")


@dataclass(frozen=True)
class EnergyCostModel:
    """Measured per-event energy (J) and duration (s) of each node type."""

    active_tag_energy: float = 3.22e-3
    active_tag_duration: float = 84.52e-3
    passive_tag_energy: float = 951.16e-6
    passive_tag_duration: float = 34.18e-3
    anchor_base_energy: float = 338.30e-6
    anchor_slot_energy: float = 15.28e-6
    anchor_base_duration: float = 30.55e-3
    anchor_slot_duration: float = 290e-6
    sleep_power: float = 7.84e-6  # W

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


def slot_offset(slot_index: int, n_hat_a: int) -> int:
    """``(i - 1) mod n_hat_a`` for a 1-based slot index."""
    if slot_index < 1:
        raise ValueError(f"slot_index must be >= 1, got {slot_index}")
    return (slot_index - 1) % n_hat_a


def anchor_reply_delay(slot_index: int, params: ProtocolParams = ProtocolParams()) -> float:
    return params.delta_t_fix + params.delta_t * slot_offset(slot_index, params.n_hat_a)


def message_count(n_anchors: int) -> int:
    """Messages on air for one active localization: one poll plus one reply each."""
    if n_anchors < 1:
        raise ValueError("need at least one anchor")
    return n_anchors + 1


def anchor_event_cost(slot_index: int, model: EnergyCostModel = EnergyCostModel(),
                      params: ProtocolParams = ProtocolParams()) -> tuple[float, float]:
    """(energy J, duration s) an anchor spends answering one exchange."""
    k = slot_offset(slot_index, params.n_hat_a)
    return (model.anchor_base_energy + model.anchor_slot_energy * k,
            model.anchor_base_duration + model.anchor_slot_duration * k)


def tag_event_cost(role: Role | str, model: EnergyCostModel = EnergyCostModel()) -> tuple[float, float]:
    role = Role(role)
    if role is Role.ACTIVE:
        return model.active_tag_energy, model.active_tag_duration
    return model.passive_tag_energy, model.passive_tag_duration


def max_localization_rate(model: EnergyCostModel = EnergyCostModel()) -> float:
    """Upper bound on back-to-back active localizations per second."""
    return 1.0 / model.active_tag_duration

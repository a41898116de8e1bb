"""Dynamic bit-width search: slide a group's branch set downward when the
architecture parameters show a sustained preference for the lowest bit-width.

Watching a 3-branch module, each observation checks whether the branch
logits are strictly descending (lowest bit-width dominant). Once that holds
for ``patience`` observations the branch set shifts down one step: the
largest bit-width drops out, a new one-lower bit-width enters, and the
logits are rearranged into a bell shape so the previously-dominant width
stays dominant. Bit-widths only ever decrease; reaching the floor freezes
the group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import MixedPrecisionModule


@dataclass
class ShiftEvent:
    step: int
    layer_id: int
    group_id: int
    old_bits: tuple[int, ...]
    new_bits: tuple[int, ...]
    note: str = ""


@dataclass
class DynamicBitSearch:
    """Per-(layer, group) search state machine."""

    module: MixedPrecisionModule
    patience_limit: int = 3
    min_bits: int = 2
    consecutive: bool = True     # False: count qualifying steps cumulatively
    patience_counter: int = 0
    frozen: bool = False
    events: list[ShiftEvent] = field(default_factory=list)

    def __post_init__(self):
        if self.module.branch_count != 3:
            raise ValueError(f"dynamic search is defined for 3 branches, module has "
                             f"{self.module.branch_count}")
        if self.patience_limit < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience_limit}")
        self.frozen = self.module.bits[0] <= self.min_bits

    def observe(self, step: int = 0) -> bool:
        """Inspect the current logits once per optimizer step; returns True
        when a shift fired."""
        if self.frozen:
            return False
        b = self.module.arch_params.data
        descending = bool(b[0] > b[1] > b[2])
        if descending:
            self.patience_counter += 1
        elif self.consecutive:
            self.patience_counter = 0
        if self.patience_counter >= self.patience_limit:
            fired = self.shift_down(step)
            self.patience_counter = 0
            return fired
        return False

    def shift_down(self, step: int = 0) -> bool:
        """Apply the branch-set update; no-op (with an audit entry) if frozen."""
        mp = self.module
        old = tuple(mp.bits)
        if self.frozen:
            self.events.append(ShiftEvent(step, mp.layer_id, mp.group_id, old, old,
                                          note="frozen"))
            return False
        b1, b2, _ = mp.bits
        new = (b1 - 1, b1, b2)
        beta = mp.arch_params.data
        mp.arch_params.data = np.array([beta[1], beta[0], beta[1]], dtype=np.float32)
        mp.arch_params.grad = None
        mp.bits = list(new)
        if new[0] <= self.min_bits:
            self.frozen = True
        self.events.append(ShiftEvent(step, mp.layer_id, mp.group_id, old, new))
        return True

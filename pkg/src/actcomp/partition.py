"""Greedy channel ranking and group partitioning.

After the PCA transform orders each layer's channels by importance, a greedy
pass repeatedly removes the least-important remaining channel of the layer
whose selection score is smallest. The score trades estimated accuracy
impact (trailing spectrum share) against storage saved (one feature map,
h*w values). The order in which channels get removed is a global compression
priority: early removals are cheap channels, late removals are expensive.
Group boundaries are thresholds over that priority order; the last group is
the pruned one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LayerSpectrum:
    """Greedy-pass view of one layer: spectrum stddevs plus feature-map size."""

    sigmas: np.ndarray          # (d,) descending channel stddevs
    height: int
    width: int

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or self.sigmas.size == 0:
            raise ValueError(f"LayerSpectrum: 1-D nonempty sigmas required, "
                             f"got shape {self.sigmas.shape}")

    @property
    def channels(self) -> int:
        return int(self.sigmas.size)


def selection_metric(sigmas: np.ndarray, kept: int, height: int, width: int) -> float:
    """Accuracy-per-storage score of removing the layer's least important
    surviving channel: (trailing stddev share) / (feature-map size).

    A zero spectrum scores 0 (free removal).
    """
    if kept < 1:
        raise ValueError(f"selection_metric: kept channel count must be >= 1, got {kept}")
    total = float(np.sum(sigmas[:kept]))
    if total <= 0.0:
        return 0.0
    return (float(sigmas[kept - 1]) / total) / float(height * width)


@dataclass
class SelectionState:
    """Outcome of the greedy pass over all layers."""

    layers: list[LayerSpectrum]
    kept: list[int]                                   # surviving channels per layer
    removal_log: list[tuple[int, int]] = field(default_factory=list)
    # log entries are (layer index, channel position in importance order);
    # earlier entries are less important

    def scores(self) -> list[float]:
        return [selection_metric(sp.sigmas, k, sp.height, sp.width)
                for sp, k in zip(self.layers, self.kept)]


def greedy_rank(layers: list[LayerSpectrum], removal_budget: int) -> SelectionState:
    """Remove ``removal_budget`` channels, always taking the trailing channel
    of the layer with the minimal selection score (ties: lowest layer index).

    Never removes a layer's final channel, so the budget must not exceed
    sum(d_l - 1).
    """
    state = SelectionState(layers=layers, kept=[sp.channels for sp in layers])
    removable = sum(sp.channels - 1 for sp in layers)
    if removal_budget > removable:
        raise ValueError(f"removal budget {removal_budget} exceeds the "
                         f"{removable} removable channels")
    for _ in range(removal_budget):
        best_layer = -1
        best_score = np.inf
        for li, (sp, k) in enumerate(zip(state.layers, state.kept)):
            if k <= 1:
                continue
            s = selection_metric(sp.sigmas, k, sp.height, sp.width)
            if s < best_score:
                best_score = s
                best_layer = li
        state.kept[best_layer] -= 1
        state.removal_log.append((best_layer, state.kept[best_layer]))
    return state


@dataclass
class GroupPartition:
    """Per-layer assignment of importance-sorted channels to contiguous groups.

    ``group_sizes[l][g]`` is the number of channels of layer l in group g
    (0-based; group 0 holds the most important channels, the last group is
    pruned). Sizes along each row sum to the layer's channel count.
    """

    group_sizes: list[list[int]]
    num_groups: int

    def layer_slices(self, layer: int) -> list[tuple[int, int]]:
        """(start, end) channel range of every group for one layer."""
        bounds = np.cumsum([0] + self.group_sizes[layer])
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def pruned_channels(self, layer: int) -> int:
        return self.group_sizes[layer][-1]

    def total_channels(self, layer: int) -> int:
        return int(sum(self.group_sizes[layer]))


def build_partition(layers: list[LayerSpectrum], num_groups: int,
                    thresholds: list[float]) -> GroupPartition:
    """Partition every layer's channels into ``num_groups`` contiguous groups.

    The greedy pass runs to exhaustion (down to one surviving channel per
    layer), producing a full priority order. ``thresholds`` are ascending
    fractions of the total channel count: the first len==num_groups-1 entry
    bounds the pruned group (earliest removals), subsequent entries bound the
    next-least-important groups; whatever remains, plus the never-removed
    floor channels, lands in the most important group.
    """
    if num_groups < 2:
        raise ValueError(f"need at least 2 groups (last group is the pruned one), "
                         f"got {num_groups}")
    if len(thresholds) != num_groups - 1:
        raise ValueError(f"expected {num_groups - 1} thresholds for {num_groups} "
                         f"groups, got {len(thresholds)}")
    t = [float(x) for x in thresholds]
    if any(x <= 0.0 or x > 1.0 for x in t) or any(b < a for a, b in zip(t, t[1:])):
        raise ValueError(f"thresholds must be ascending fractions in (0, 1], got {t}")

    total_channels = sum(sp.channels for sp in layers)
    budget = sum(sp.channels - 1 for sp in layers)
    state = greedy_rank(layers, budget)
    log = state.removal_log

    # log position -> group: [0, b1) pruned, [b1, b2) next group up, ...
    bounds = [min(int(np.floor(x * total_channels + 1e-9)), len(log)) for x in t]
    sizes = [[0] * num_groups for _ in layers]
    for li, sp in enumerate(layers):
        sizes[li][0] = sp.channels                      # start everything in group 0
    for pos, (li, _chan) in enumerate(log):
        seg = 0
        while seg < len(bounds) and pos >= bounds[seg]:
            seg += 1
        # seg 0 -> pruned group (last), seg k -> group num_groups-1-k
        group = num_groups - 1 - seg
        if group <= 0:
            continue                                    # stays in group 0
        sizes[li][0] -= 1
        sizes[li][group] += 1
    return GroupPartition(group_sizes=sizes, num_groups=num_groups)

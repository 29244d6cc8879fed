"""Stability and plasticity penalty terms and the combined training objective.

The stability term pulls filters that mattered for earlier tasks toward
their previously learned values, weighted by accumulated importance.  The
plasticity term sparsifies the remaining filters with a depth-weighted mix
of a per-filter L2 (group) norm and a squared L1 (exclusive) norm.  These
are evaluated for logging and tests; parameter updates happen through the
closed-form proximal steps in ``optim``, not through gradients of these
penalties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .network import MultiHeadNetwork
from .tensor import softmax_cross_entropy

__all__ = [
    "AnchorStore",
    "FilterPartition",
    "ObjectiveBreakdown",
    "RegularizerConfig",
    "plasticity_penalty",
    "psi",
    "stability_penalty",
    "total_objective",
]


@dataclass(frozen=True)
class RegularizerConfig:
    """Strengths of the two penalty terms plus importance bookkeeping knobs.

    mu_s:     stability strength (0 disables anchoring)
    mu_p:     plasticity strength (0 disables sparsification)
    nu:       weight on previously accumulated importance
    epsilon:  threshold above which accumulated importance marks a filter
              as important
    """

    mu_s: float
    mu_p: float
    nu: float
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("mu_s", "mu_p", "nu", "epsilon"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class FilterPartition:
    """Disjoint split of all trunk filters into important and unimportant."""

    important: frozenset[tuple[int, int]]
    unimportant: frozenset[tuple[int, int]]

    def __post_init__(self):
        overlap = self.important & self.unimportant
        if overlap:
            raise StateError(f"partition sets overlap on {sorted(overlap)[:5]}")

    @classmethod
    def all_unimportant(cls, net: MultiHeadNetwork) -> "FilterPartition":
        """Starting partition before any task has been learned."""
        return cls(important=frozenset(), unimportant=net.filter_index_set())

    def check_covers(self, net: MultiHeadNetwork) -> None:
        expected = net.filter_index_set()
        got = self.important | self.unimportant
        if got != expected:
            raise StateError(
                f"partition covers {len(got)} filters, network has {len(expected)}"
            )


class AnchorStore:
    """Per-filter snapshots of the parameters learned up to the previous task.

    Only filters marked important carry an anchor; the store is immutable
    during a task's training.
    """

    def __init__(self, entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]], task_index: int):
        self._entries = entries
        self.task_index = task_index

    @classmethod
    def empty(cls, task_index: int = 0) -> "AnchorStore":
        return cls({}, task_index)

    @classmethod
    def capture(
        cls, net: MultiHeadNetwork, partition: FilterPartition, task_index: int
    ) -> "AnchorStore":
        entries = {}
        for g in net.filter_groups():
            if (g.layer, g.index) in partition.important:
                entries[(g.layer, g.index)] = (g.kernel.copy(), g.bias.copy())
        return cls(entries, task_index)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, layer: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._entries[(layer, index)]
        except KeyError:
            raise StateError(f"no anchor stored for filter ({layer}, {index})") from None


def psi(i: int, L: int) -> float:
    """Depth weight 1 - i/(L-1): 1 at the first conv layer, 0 at the last.

    High values favor feature sharing (group term), low values feature
    discrimination (exclusive term).
    """
    if L < 2:
        raise ConfigError(f"depth schedule needs at least 2 layers, got L={L}")
    if not 0 <= i <= L - 1:
        raise ConfigError(f"layer index {i} outside [0, {L - 1}]")
    return 1.0 - i / (L - 1)


def _deviation_norm(group, anchor: tuple[np.ndarray, np.ndarray]) -> float:
    ak, ab = anchor
    if ak.shape != group.kernel.shape:
        raise StateError(
            f"anchor shape {ak.shape} does not match filter "
            f"({group.layer}, {group.index}) kernel {group.kernel.shape}"
        )
    dk = group.kernel - ak
    db = group.bias - ab
    return float(np.sqrt(np.sum(dk * dk) + np.sum(db * db)))


def stability_penalty(
    net: MultiHeadNetwork,
    anchors: AnchorStore,
    importance,
    partition: FilterPartition,
) -> float:
    """Importance-weighted L2 distance of important filters from their anchors.

    Sums accumulated_importance * ||filter - anchor||_2 over the important
    set; kernel and bias deviate jointly.  Empty important set gives 0.
    """
    total = 0.0
    for g in net.filter_groups():
        key = (g.layer, g.index)
        if key not in partition.important:
            continue
        weight = float(importance.gamma_hat[g.layer][g.index])
        total += weight * _deviation_norm(g, anchors.get(g.layer, g.index))
    return total


def plasticity_penalty(net: MultiHeadNetwork, partition: FilterPartition) -> float:
    """Depth-weighted group + exclusive sparsity over unimportant filters.

    Per filter: psi_i * ||kernel, bias||_2 + (1 - psi_i)/2 * ||kernel||_1^2.
    The bias participates in the group norm (pruning a filter silences its
    bias) but not the exclusive term.
    """
    L = net.num_layers
    total = 0.0
    for g in net.filter_groups():
        if (g.layer, g.index) not in partition.unimportant:
            continue
        w = psi(g.layer, L)
        group_norm = float(np.sqrt(np.sum(g.kernel**2) + np.sum(g.bias**2)))
        l1 = float(np.abs(g.kernel).sum())
        total += w * group_norm + 0.5 * (1.0 - w) * l1 * l1
    return total


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Objective value split into its three logged components."""

    ce: float
    stability: float  # mu_s * stability_penalty
    plasticity: float  # mu_p * plasticity_penalty

    @property
    def total(self) -> float:
        return self.ce + self.stability + self.plasticity


def total_objective(
    net: MultiHeadNetwork,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    head: int,
    anchors: AnchorStore,
    importance,
    partition: FilterPartition,
    cfg: RegularizerConfig,
) -> ObjectiveBreakdown:
    """Cross entropy on the batch plus the weighted penalty terms."""
    fwd = net.forward(batch_x, head)
    loss = softmax_cross_entropy(fwd.tape, fwd.logits, batch_y)
    ce = float(loss.data)
    stab = cfg.mu_s * stability_penalty(net, anchors, importance, partition) if cfg.mu_s > 0 else 0.0
    plast = cfg.mu_p * plasticity_penalty(net, partition) if cfg.mu_p > 0 else 0.0
    return ObjectiveBreakdown(ce=ce, stability=stab, plasticity=plast)

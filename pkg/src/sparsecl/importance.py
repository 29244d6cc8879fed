"""Activation-based filter importance, accumulation, masking, and the
prune/reinitialize step between tasks.

A filter's importance for the task just trained is the spatial mean of
the per-cell standard deviation of its post-ReLU activation map over the
task's training samples.  Accumulated importance decides which filters
get anchored (important) versus sparsified and eventually recycled
(unimportant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StateError
from .network import MultiHeadNetwork, he_uniform
from .penalties import FilterPartition

__all__ = [
    "ActivationStats",
    "ImportanceState",
    "PruneReport",
    "accumulate_importance",
    "binarize",
    "collect_stats",
    "filter_importance",
    "prune_and_reinit",
]


@dataclass
class ActivationStats:
    """Streaming per-cell sums and sums of squares of post-ReLU maps.

    One (H, W, C) sum and sum-of-squares array per conv layer; merging two
    stats objects is an associative elementwise add.
    """

    count: int
    sums: list[np.ndarray]
    sumsqs: list[np.ndarray]

    @classmethod
    def zeros_like_activations(cls, activations: list[np.ndarray]) -> "ActivationStats":
        return cls(
            count=0,
            sums=[np.zeros(a.shape[1:]) for a in activations],
            sumsqs=[np.zeros(a.shape[1:]) for a in activations],
        )

    def update(self, activations: list[np.ndarray]) -> None:
        self.count += activations[0].shape[0]
        for i, a in enumerate(activations):
            self.sums[i] += a.sum(axis=0)
            self.sumsqs[i] += (a * a).sum(axis=0)

    def merge(self, other: "ActivationStats") -> None:
        self.count += other.count
        for i in range(len(self.sums)):
            self.sums[i] += other.sums[i]
            self.sumsqs[i] += other.sumsqs[i]

    def std_maps(self) -> list[np.ndarray]:
        """Population standard deviation per spatial cell and channel.

        Variance is clamped at zero against catastrophic cancellation, so
        a constant activation gives exactly zero.
        """
        if self.count == 0:
            raise StateError("no samples accumulated")
        out = []
        for s, sq in zip(self.sums, self.sumsqs):
            mean = s / self.count
            var = np.maximum(sq / self.count - mean * mean, 0.0)
            out.append(np.sqrt(var))
        return out


@dataclass
class ImportanceState:
    """Per-filter importance scores, their running accumulation, and the mask.

    gamma_t:    importance from the task just trained (one array per layer)
    gamma_hat:  accumulated importance across tasks
    mask:       True where gamma_hat exceeds the binarization threshold
    """

    gamma_t: list[np.ndarray]
    gamma_hat: list[np.ndarray]
    mask: list[np.ndarray]
    nu: float
    epsilon: float

    @classmethod
    def initial(cls, net: MultiHeadNetwork, nu: float, epsilon: float) -> "ImportanceState":
        sizes = [lp.num_filters for lp in net.conv_layers]
        return cls(
            gamma_t=[np.zeros(n) for n in sizes],
            gamma_hat=[np.zeros(n) for n in sizes],
            mask=[np.zeros(n, dtype=bool) for n in sizes],
            nu=nu,
            epsilon=epsilon,
        )


def collect_stats(
    net: MultiHeadNetwork, task_data, head: int, batch_size: int = 64
) -> ActivationStats:
    """Accumulate post-ReLU activation statistics over a task's train split."""
    x = task_data.train_x
    n = len(x)
    if n == 0:
        raise InputError("cannot collect activation statistics from an empty split")
    stats: ActivationStats | None = None
    for start in range(0, n, batch_size):
        fwd = net.forward(x[start : start + batch_size], head)
        acts = [a.data for a in fwd.conv_activations]
        if stats is None:
            stats = ActivationStats.zeros_like_activations(acts)
        stats.update(acts)
    return stats


def filter_importance(stats: ActivationStats) -> list[np.ndarray]:
    """Spatial mean of each filter's activation standard deviation map."""
    return [m.mean(axis=(0, 1)) for m in stats.std_maps()]


def accumulate_importance(state: ImportanceState, gamma_t: list[np.ndarray]) -> ImportanceState:
    """Fold the new task's scores into the running accumulation.

    gamma_hat <- nu * gamma_hat + gamma_t, elementwise per layer.
    """
    if len(gamma_t) != len(state.gamma_hat):
        raise StateError(
            f"got scores for {len(gamma_t)} layers, state tracks {len(state.gamma_hat)}"
        )
    state.gamma_t = [g.copy() for g in gamma_t]
    state.gamma_hat = [
        state.nu * old + new for old, new in zip(state.gamma_hat, gamma_t)
    ]
    return state


def binarize(state: ImportanceState) -> tuple[list[np.ndarray], FilterPartition]:
    """Threshold accumulated importance into the important/unimportant split.

    A filter is important iff its accumulated score strictly exceeds
    epsilon.  Updates ``state.mask`` and returns it with the partition.
    """
    state.mask = [gh > state.epsilon for gh in state.gamma_hat]
    important = set()
    unimportant = set()
    for i, m in enumerate(state.mask):
        for j, flag in enumerate(m):
            (important if flag else unimportant).add((i, j))
    return state.mask, FilterPartition(
        important=frozenset(important), unimportant=frozenset(unimportant)
    )


@dataclass
class PruneReport:
    """Per-layer outcome of a prune/reinitialize pass."""

    candidates: dict[int, int] = field(default_factory=dict)
    reinitialized: dict[int, int] = field(default_factory=dict)
    skipped: dict[int, int] = field(default_factory=dict)
    kept: dict[int, int] = field(default_factory=dict)

    @property
    def total_reinitialized(self) -> int:
        return sum(self.reinitialized.values())

    def to_dict(self) -> dict:
        layers = sorted(self.candidates)
        per_layer = {
            str(i): {
                "unimportant": self.candidates[i],
                "reinitialized": self.reinitialized[i],
                "skipped": self.skipped[i],
                "kept": self.kept[i],
                "sparsity": self.reinitialized[i]
                / max(self.candidates[i] + self.kept[i], 1),
            }
            for i in layers
        }
        return {"layers": per_layer, "total_reinitialized": self.total_reinitialized}


def prune_and_reinit(
    net: MultiHeadNetwork, partition: FilterPartition, seed
) -> PruneReport:
    """Recycle dead unimportant filters without disturbing existing heads.

    For each unimportant filter whose output is identically zero: draw a
    fresh He-uniform kernel (zero bias), and zero everything downstream
    that reads it (the matching input channel of the next conv layer, or
    the matching head-weight rows after the last conv layer).  Unimportant
    filters that still produce output are left alone; the sparsifier keeps
    shrinking them on later tasks until they can be recycled exactly.
    Existing heads' outputs are bit-identical before and after.
    """
    rng = net.reinit_rng(seed)
    report = PruneReport()
    hf, wf = net.arch.spatial_after_trunk()
    last = net.num_layers - 1
    for i, lp in enumerate(net.conv_layers):
        report.candidates[i] = 0
        report.reinitialized[i] = 0
        report.skipped[i] = 0
        report.kept[i] = 0
        kh, kw, cin, _ = lp.kernel.data.shape
        for j in range(lp.num_filters):
            if (i, j) not in partition.unimportant:
                report.kept[i] += 1
                continue
            report.candidates[i] += 1
            group_kernel = lp.kernel.data[:, :, :, j]
            group_bias = lp.bias.data[j : j + 1]
            if not (np.all(group_kernel == 0.0) and group_bias[0] <= 0.0):
                # Still producing output somewhere; cutting it now would
                # perturb old heads, so leave it to the sparsifier.
                report.skipped[i] += 1
                continue
            group_kernel[...] = he_uniform(rng, (kh, kw, cin), kh * kw * cin)
            group_bias[0] = 0.0
            if i < last:
                net.next_layer_channel(i, j)[...] = 0.0
            else:
                for hp in net.heads:
                    w = hp.weight.data.reshape(hf, wf, lp.num_filters, hp.num_classes)
                    w[:, :, j, :] = 0.0
            report.reinitialized[i] += 1
    return report

"""Per-epoch SGD on cross entropy followed by closed-form per-filter
proximal corrections.

Each training epoch runs plain mini-batch SGD, then every filter gets one
proximal step: important filters blend toward their anchor, unimportant
filters get a group shrink followed by an elementwise exclusive shrink.
With clipping on (the default) the blend and shrink factors saturate at 1
and the exclusive subtraction soft-thresholds at zero, which matches the
exact proximal operators of the underlying norms and keeps updates stable
at large step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, StateError
from .network import FilterGroup, MultiHeadNetwork
from .penalties import (
    AnchorStore,
    FilterPartition,
    RegularizerConfig,
    plasticity_penalty,
    psi,
    stability_penalty,
)
from .tensor import backward, softmax_cross_entropy

__all__ = [
    "OptimizerConfig",
    "FilterProxRecord",
    "ProxStepReport",
    "TrainingLog",
    "StabilityTerm",
    "PlasticityTerm",
    "sgd_epoch",
    "prox_stability_filter",
    "prox_plasticity_filter",
    "train_task",
    "prox_oracle",
]

# Norm denominators below this trigger the clipped/zero branch outright.
NORM_GUARD = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD settings: step size, epoch count, batch size.

    ``clip_prox`` keeps the proximal factors in [0, 1] and makes the
    exclusive shrink sign-preserving; turning it off applies the literal
    first-order formulas (useful in tests, divergent at large steps).
    alpha = 0 is accepted and turns the gradient step into a no-op.
    """

    alpha: float
    epochs: int
    batch_size: int
    clip_prox: bool = True

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be a finite nonnegative float, got {self.alpha}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class FilterProxRecord:
    """Factors applied to one filter in one proximal sweep."""

    layer: int
    index: int
    beta: float = 0.0  # stability blend toward the anchor
    xi: float = 0.0  # group shrink factor
    eta: float = 0.0  # exclusive elementwise shrink amount
    clipped: bool = False
    zeroed: bool = False


@dataclass
class ProxStepReport:
    """All per-filter records from one epoch's proximal sweep."""

    records: list[FilterProxRecord] = field(default_factory=list)

    @property
    def clipped_count(self) -> int:
        return sum(r.clipped for r in self.records)

    @property
    def zeroed_count(self) -> int:
        return sum(r.zeroed for r in self.records)


@dataclass
class TrainingLog:
    """Per-epoch objective decomposition plus the proximal sweep reports.

    ``records`` holds one JSON-ready dict per epoch with the keys
    task, epoch, ce_loss, stab_penalty, plast_penalty,
    clipped_filter_count, zeroed_filter_count.  The penalty entries are
    the weighted contributions (mu_s * R_S, mu_p * R_P) to the objective.
    """

    records: list[dict] = field(default_factory=list)
    prox_reports: list[ProxStepReport] = field(default_factory=list)


def sgd_epoch(
    net: MultiHeadNetwork,
    task_data,
    head: int,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
) -> float:
    """One epoch of shuffled mini-batch SGD on the cross entropy loss.

    Updates the trunk and the selected head only; returns the mean
    cross entropy over the epoch (weighted by batch size).
    """
    x, y = task_data.train_x, task_data.train_y
    n = len(x)
    if n == 0:
        raise InputError("cannot run an epoch on an empty dataset")
    params = net.trainable_params(head)
    order = rng.permutation(n)
    total_ce = 0.0
    for start in range(0, n, cfg.batch_size):
        sel = order[start : start + cfg.batch_size]
        fwd = net.forward(x[sel], head)
        loss = softmax_cross_entropy(fwd.tape, fwd.logits, y[sel])
        total_ce += float(loss.data) * len(sel)
        if cfg.alpha > 0:
            backward(fwd.tape, loss)
            for p in params:
                if p.grad is not None:
                    p.data -= cfg.alpha * p.grad
                p.zero_grad()
    return total_ce / n


def prox_stability_filter(
    group: FilterGroup,
    anchor: tuple[np.ndarray, np.ndarray],
    gamma_hat: float,
    alpha: float,
    mu_s: float,
    clip_prox: bool = True,
) -> FilterProxRecord:
    """Blend an important filter toward its anchor.

    beta = alpha * mu_s * gamma_hat / ||filter - anchor||_2, then
    filter <- (1 - beta) * filter + beta * anchor.  With clipping, beta
    saturates at 1 and the filter is set to the anchor exactly (also the
    degenerate zero-distance case).
    """
    ak, ab = anchor
    step = alpha * mu_s * gamma_hat
    if step <= 0.0:
        return FilterProxRecord(group.layer, group.index)
    dk = group.kernel - ak
    db = group.bias - ab
    dist = float(np.sqrt(np.sum(dk * dk) + np.sum(db * db)))
    if dist < NORM_GUARD or (clip_prox and step >= dist):
        np.copyto(group.kernel, ak)
        np.copyto(group.bias, ab)
        return FilterProxRecord(group.layer, group.index, beta=1.0, clipped=True)
    beta = step / dist
    group.kernel *= 1.0 - beta
    group.kernel += beta * ak
    group.bias *= 1.0 - beta
    group.bias += beta * ab
    return FilterProxRecord(group.layer, group.index, beta=beta)


def prox_plasticity_filter(
    group: FilterGroup,
    psi_i: float,
    alpha: float,
    mu_p: float,
    clip_prox: bool = True,
) -> FilterProxRecord:
    """Group-shrink then exclusive-shrink an unimportant filter.

    xi = alpha * mu_p * psi_i / ||filter||_2 scales kernel and bias toward
    zero; eta = alpha * mu_p * (1 - psi_i) * ||kernel||_1 is subtracted
    elementwise from the kernel magnitudes.  With clipping, xi saturates
    at 1 (zeroing the filter outright) and the eta subtraction stops at
    zero instead of crossing it.
    """
    rec_layer, rec_index = group.layer, group.index
    if alpha * mu_p <= 0.0:
        return FilterProxRecord(rec_layer, rec_index)
    gstep = alpha * mu_p * psi_i
    eta = alpha * mu_p * (1.0 - psi_i) * float(np.abs(group.kernel).sum())
    xi = 0.0
    clipped = False
    if gstep > 0.0:
        norm = float(np.sqrt(np.sum(group.kernel**2) + np.sum(group.bias**2)))
        if norm < NORM_GUARD or (clip_prox and gstep >= norm):
            group.kernel[...] = 0.0
            group.bias[...] = 0.0
            xi = 1.0
            clipped = True
        else:
            xi = gstep / norm
            group.kernel *= 1.0 - xi
            group.bias *= 1.0 - xi
    if eta > 0.0 and not clipped:
        if clip_prox:
            np.copyto(
                group.kernel,
                np.sign(group.kernel) * np.maximum(np.abs(group.kernel) - eta, 0.0),
            )
        else:
            group.kernel -= eta * np.sign(group.kernel)
    zeroed = bool(np.all(group.kernel == 0.0) and np.all(group.bias == 0.0))
    return FilterProxRecord(
        rec_layer, rec_index, xi=xi, eta=eta, clipped=clipped, zeroed=zeroed
    )


def train_task(
    net: MultiHeadNetwork,
    task_data,
    head: int,
    anchors: AnchorStore,
    importance,
    partition: FilterPartition,
    reg_cfg: RegularizerConfig,
    opt_cfg: OptimizerConfig,
    shuffle_seed=0,
) -> TrainingLog:
    """Train one task: per epoch, an SGD pass then a per-filter prox sweep.

    Filters in the important set are blended toward their anchors with
    the accumulated-importance weights; the rest get the sparsifying
    update with the depth weight of their layer.  ``shuffle_seed`` (an
    int or sequence of ints) fixes the mini-batch order.
    """
    L = net.num_layers
    partition.check_covers(net)
    log = TrainingLog()
    depth_weights = [psi(i, L) for i in range(L)]
    for epoch in range(opt_cfg.epochs):
        rng = np.random.default_rng([*np.atleast_1d(shuffle_seed).tolist(), epoch])
        ce = sgd_epoch(net, task_data, head, opt_cfg, rng)
        report = ProxStepReport()
        for g in net.filter_groups():
            key = (g.layer, g.index)
            if key in partition.important:
                rec = prox_stability_filter(
                    g,
                    anchors.get(g.layer, g.index),
                    float(importance.gamma_hat[g.layer][g.index]),
                    opt_cfg.alpha,
                    reg_cfg.mu_s,
                    opt_cfg.clip_prox,
                )
            else:
                rec = prox_plasticity_filter(
                    g,
                    depth_weights[g.layer],
                    opt_cfg.alpha,
                    reg_cfg.mu_p,
                    opt_cfg.clip_prox,
                )
            report.records.append(rec)
        for lp in net.conv_layers:
            if not (np.isfinite(lp.kernel.data).all() and np.isfinite(lp.bias.data).all()):
                raise StateError("non-finite trunk parameters after proximal sweep")
        stab = (
            reg_cfg.mu_s * stability_penalty(net, anchors, importance, partition)
            if reg_cfg.mu_s > 0
            else 0.0
        )
        plast = (
            reg_cfg.mu_p * plasticity_penalty(net, partition) if reg_cfg.mu_p > 0 else 0.0
        )
        log.records.append(
            {
                "task": getattr(task_data, "index", -1) + 1,
                "epoch": epoch,
                "ce_loss": ce,
                "stab_penalty": stab,
                "plast_penalty": plast,
                "clipped_filter_count": report.clipped_count,
                "zeroed_filter_count": report.zeroed_count,
            }
        )
        log.prox_reports.append(report)
    return log


@dataclass(frozen=True)
class StabilityTerm:
    """Descriptor for the anchored-L2 regularizer strength * ||x - anchor||_2."""

    strength: float  # mu_s * gamma_hat
    anchor: np.ndarray


@dataclass(frozen=True)
class PlasticityTerm:
    """Descriptor for mu * (sharing * ||x||_2 + (1-sharing)/2 * ||x_k||_1^2).

    ``exclusive_dims`` restricts the squared-L1 part to x[:exclusive_dims]
    (the kernel part of a filter vector); None applies it to all of x.
    """

    mu: float
    sharing: float
    exclusive_dims: int | None = None


def prox_oracle(filter_value: np.ndarray, term, alpha: float) -> np.ndarray:
    """Numerically minimize h(x) + ||x - v||^2 / (2 * alpha).

    ``term`` is a StabilityTerm, a PlasticityTerm, or None (h = 0).  Solved
    as a convex program to tight tolerance; intended for validating the
    closed-form filter updates at small alpha on low-dimensional inputs.
    """
    import cvxpy as cp

    v = np.asarray(filter_value, dtype=np.float64).ravel()
    d = v.size
    if d > 64:
        raise InputError(f"prox oracle is meant for dims <= 64, got {d}")
    x = cp.Variable(d)
    h = 0
    if isinstance(term, StabilityTerm):
        anchor = np.asarray(term.anchor, dtype=np.float64).ravel()
        if anchor.shape != v.shape:
            raise InputError("anchor must match the filter vector's shape")
        h = term.strength * cp.norm(x - anchor, 2)
    elif isinstance(term, PlasticityTerm):
        sel = x if term.exclusive_dims is None else x[: term.exclusive_dims]
        h = term.mu * term.sharing * cp.norm(x, 2) + term.mu * (
            1.0 - term.sharing
        ) / 2.0 * cp.square(cp.norm(sel, 1))
    elif term is not None:
        raise InputError(f"unknown regularizer descriptor {type(term).__name__}")
    objective = cp.Minimize(h + cp.sum_squares(x - v) / (2.0 * alpha))
    problem = cp.Problem(objective)
    try:
        problem.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    except cp.error.SolverError as e:  # pragma: no cover
        raise StateError(f"prox oracle solver failed: {e}") from e
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise StateError(f"prox oracle did not converge: status={problem.status}")
    return np.asarray(x.value, dtype=np.float64)

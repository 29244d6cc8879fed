"""End-to-end task-sequence driver and the evaluation metrics.

The driver repeats, per task: add a head, train with the proximal
updates, collect activation statistics, fold them into the accumulated
importance, rebuild the important/unimportant partition, evaluate every
head seen so far, recycle dead unimportant filters, and snapshot anchors
for the next task.  Train splits are released as soon as their last read
(statistics collection) is done.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import TaskDataset, TaskStream
from .errors import InputError, StateError
from .importance import (
    ImportanceState,
    PruneReport,
    accumulate_importance,
    binarize,
    collect_stats,
    filter_importance,
    prune_and_reinit,
)
from .network import ArchitectureSpec, MultiHeadNetwork, build_network, save_checkpoint
from .optim import OptimizerConfig, TrainingLog, train_task
from .penalties import AnchorStore, FilterPartition, RegularizerConfig

__all__ = [
    "MetricsMatrix",
    "ExperimentResult",
    "average_accuracy",
    "average_forgetting",
    "evaluate",
    "metrics_payload",
    "retention_curve",
    "run_experiment",
    "write_retention_csvs",
]


class MetricsMatrix:
    """Lower-triangular accuracies a[t][t']: tested on task t' after
    training through task t.  Task numbers are 1-based."""

    def __init__(self, num_tasks: int):
        self.num_tasks = num_tasks
        self._rows: list[list[float | None]] = [
            [None] * (t + 1) for t in range(num_tasks)
        ]

    def set(self, trained_through: int, tested_on: int, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise InputError(f"accuracy must lie in [0, 1], got {acc}")
        if not 1 <= tested_on <= trained_through <= self.num_tasks:
            raise InputError(
                f"need 1 <= tested_on <= trained_through <= {self.num_tasks}, "
                f"got ({trained_through}, {tested_on})"
            )
        self._rows[trained_through - 1][tested_on - 1] = acc

    def get(self, trained_through: int, tested_on: int) -> float:
        v = self._rows[trained_through - 1][tested_on - 1]
        if v is None:
            raise StateError(f"entry ({trained_through}, {tested_on}) not populated")
        return v

    def row(self, trained_through: int) -> list[float]:
        r = self._rows[trained_through - 1]
        if any(v is None for v in r):
            raise StateError(f"row {trained_through} is not fully populated")
        return list(r)

    def to_lists(self) -> list[list[float]]:
        return [self.row(t) for t in range(1, self.num_tasks + 1)]

    @classmethod
    def from_lists(cls, rows: list[list[float]]) -> "MetricsMatrix":
        m = cls(len(rows))
        for t, r in enumerate(rows, start=1):
            if len(r) != t:
                raise InputError(f"row {t} must have {t} entries, got {len(r)}")
            for tp, acc in enumerate(r, start=1):
                m.set(t, tp, float(acc))
        return m


def evaluate(net: MultiHeadNetwork, test_set: TaskDataset, head: int, batch_size: int = 256) -> float:
    """Argmax-logit accuracy of one head over a task's full test split."""
    x, y = test_set.test_x, test_set.test_y
    if len(x) == 0:
        raise InputError("cannot evaluate on an empty test set")
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = net.forward(x[start : start + batch_size], head).logits.data
        correct += int((logits.argmax(axis=1) == y[start : start + batch_size]).sum())
    return correct / len(x)


def average_accuracy(m: MetricsMatrix, t: int) -> float:
    """Mean accuracy over tasks 1..t after training through task t."""
    row = m.row(t)
    return float(sum(row) / t)


def average_forgetting(m: MetricsMatrix) -> float:
    """Mean peak-to-final accuracy drop over all but the last task."""
    T = m.num_tasks
    if T < 2:
        raise StateError("forgetting needs at least 2 tasks")
    total = 0.0
    for tp in range(1, T):
        column = [m.get(t, tp) for t in range(tp, T + 1)]
        total += max(column) - column[-1]
    return total / (T - 1)


def retention_curve(m: MetricsMatrix, tested_on: int) -> list[tuple[int, float]]:
    """Accuracy on one task as later tasks are learned: (after_task, acc)."""
    return [(t, m.get(t, tested_on)) for t in range(tested_on, m.num_tasks + 1)]


@dataclass
class ExperimentResult:
    """Everything a finished run produced."""

    metrics: MetricsMatrix
    net: MultiHeadNetwork
    importance: ImportanceState
    training_records: list[dict]
    prune_reports: list[PruneReport]
    events: list[tuple]
    seed: int
    reg_cfg: RegularizerConfig
    opt_cfg: OptimizerConfig
    arch: ArchitectureSpec
    stream_spec: dict
    out_dir: Path | None = None


def metrics_payload(result: ExperimentResult) -> dict:
    m = result.metrics
    payload = {
        "schema_version": 1,
        "seed": result.seed,
        "num_tasks": m.num_tasks,
        "accuracy_matrix": m.to_lists(),
        "average_accuracy": [average_accuracy(m, t) for t in range(1, m.num_tasks + 1)],
        "average_forgetting": (
            average_forgetting(m) if m.num_tasks >= 2 else None
        ),
        "config": {
            "arch": result.arch.to_dict(),
            "stream": result.stream_spec,
            "reg": {
                "mu_s": result.reg_cfg.mu_s,
                "mu_p": result.reg_cfg.mu_p,
                "nu": result.reg_cfg.nu,
                "epsilon": result.reg_cfg.epsilon,
            },
            "opt": {
                "alpha": result.opt_cfg.alpha,
                "epochs": result.opt_cfg.epochs,
                "batch_size": result.opt_cfg.batch_size,
                "clip_prox": result.opt_cfg.clip_prox,
            },
        },
    }
    return payload


def write_retention_csvs(rows: list[list[float]], out_dir: Path) -> list[Path]:
    """One retention CSV per task, derived from an accuracy matrix."""
    m = MetricsMatrix.from_lists(rows)
    paths = []
    for tp in range(1, m.num_tasks + 1):
        path = out_dir / f"retention_task{tp}.csv"
        lines = ["after_task,accuracy"]
        lines += [f"{t},{acc!r}" for t, acc in retention_curve(m, tp)]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def _probe_logits(net: MultiHeadNetwork, probe: np.ndarray) -> list[np.ndarray]:
    return [net.forward(probe, h).logits.data for h in range(net.num_heads)]


def run_experiment(
    stream: TaskStream,
    arch: ArchitectureSpec,
    reg_cfg: RegularizerConfig,
    opt_cfg: OptimizerConfig,
    seed: int,
    out_dir=None,
    probe_size: int = 32,
) -> ExperimentResult:
    """Run the full task sequence and return metrics plus artifacts.

    Deterministic given (stream, configs, seed).  When ``out_dir`` is set,
    writes metrics.json, retention CSVs, a JSON-lines training log and a
    per-task checkpoint there.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    net = build_network(arch, seed)
    importance = ImportanceState.initial(net, reg_cfg.nu, reg_cfg.epsilon)
    partition = FilterPartition.all_unimportant(net)
    anchors = AnchorStore.empty(task_index=0)
    metrics = MetricsMatrix(stream.num_tasks)
    events: list[tuple] = []
    training_records: list[dict] = []
    prune_reports: list[PruneReport] = []

    for t_idx, task in enumerate(stream):
        t = t_idx + 1
        head = net.add_head(task.num_classes)
        events.append(("add_head", t))

        tlog: TrainingLog = train_task(
            net, task, head, anchors, importance, partition,
            reg_cfg, opt_cfg, shuffle_seed=[seed, t_idx],
        )
        training_records.extend(tlog.records)
        events.append(("train_task", t))

        stats = collect_stats(net, task, head)
        events.append(("collect_stats", t))
        gamma = filter_importance(stats)
        events.append(("filter_importance", t))
        accumulate_importance(importance, gamma)
        events.append(("accumulate_importance", t))
        _, partition = binarize(importance)
        events.append(("binarize", t))

        # Last read of the train split was the statistics pass.
        task.release_train()
        events.append(("release_train", t))

        for tp_idx in range(t):
            acc = evaluate(net, stream[tp_idx], head=tp_idx)
            metrics.set(t, tp_idx + 1, acc)
            events.append(("evaluate", t, tp_idx + 1))

        probe = task.test_x[:probe_size]
        before = _probe_logits(net, probe)
        report = prune_and_reinit(net, partition, seed=[seed, 7_000_000 + t_idx])
        after = _probe_logits(net, probe)
        for b, a in zip(before, after):
            if not np.array_equal(b, a):
                raise StateError("pruning changed existing head outputs")
        prune_reports.append(report)
        events.append(("prune_and_reinit", t))

        anchors = AnchorStore.capture(net, partition, task_index=t)
        events.append(("capture_anchors", t))

        if out_path is not None:
            save_checkpoint(net, importance, out_path / f"checkpoint_task{t}.npz")

    result = ExperimentResult(
        metrics=metrics,
        net=net,
        importance=importance,
        training_records=training_records,
        prune_reports=prune_reports,
        events=events,
        seed=seed,
        reg_cfg=reg_cfg,
        opt_cfg=opt_cfg,
        arch=arch,
        stream_spec=stream.spec_dict,
        out_dir=out_path,
    )

    if out_path is not None:
        payload = metrics_payload(result)
        (out_path / "metrics.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
        write_retention_csvs(metrics.to_lists(), out_path)
        with (out_path / "training_log.jsonl").open("w") as fh:
            for rec in training_records:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")
            for t, rep in enumerate(prune_reports, start=1):
                fh.write(
                    json.dumps({"kind": "prune", "task": t, **rep.to_dict()}, sort_keys=True)
                    + "\n"
                )
        (out_path / "events.json").write_text(
            json.dumps([list(e) for e in events], indent=0, sort_keys=True) + "\n"
        )
    return result

"""Command-line front end: run experiments, ablation grids, and CSV export.

Subcommands:
    run <config>            train a full task sequence, write artifacts
    ablate <config> <grid>  rerun with regularizer components toggled off
    export-plots <run_dir>  rebuild plot-ready CSVs from metrics.json

Exit codes: 0 success, 1 runtime failure, 2 invalid input.  The default
output root can be set with the SPARSECL_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import build_stream, stream_spec_from_dict
from .errors import ConfigError, IngestionError, SparseclError
from .harness import (
    MetricsMatrix,
    average_accuracy,
    average_forgetting,
    metrics_payload,
    run_experiment,
    write_retention_csvs,
)
from .network import ArchitectureSpec
from .optim import OptimizerConfig
from .penalties import RegularizerConfig

__all__ = ["RunConfig", "main", "console_main", "cmd_run", "cmd_ablate", "cmd_export_plots"]

OUTPUT_ROOT_ENV = "SPARSECL_OUTPUT_ROOT"


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, as parsed from a config file."""

    arch: ArchitectureSpec
    stream: dict
    reg: RegularizerConfig
    opt: OptimizerConfig
    seed: int
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "stream": dict(self.stream),
            "reg": {
                "mu_s": self.reg.mu_s,
                "mu_p": self.reg.mu_p,
                "nu": self.reg.nu,
                "epsilon": self.reg.epsilon,
            },
            "opt": {
                "alpha": self.opt.alpha,
                "epochs": self.opt.epochs,
                "batch_size": self.opt.batch_size,
                "clip_prox": self.opt.clip_prox,
            },
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        for section in ("arch", "stream", "reg", "opt"):
            if section not in d:
                raise ConfigError(f"config is missing the '{section}' section")
        arch = ArchitectureSpec.from_dict(d["arch"])
        stream_spec = stream_spec_from_dict(d["stream"])  # validates
        reg_d, opt_d = d["reg"], d["opt"]
        try:
            reg = RegularizerConfig(
                mu_s=float(reg_d["mu_s"]),
                mu_p=float(reg_d["mu_p"]),
                nu=float(reg_d["nu"]),
                epsilon=float(reg_d.get("epsilon", 1e-8)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"reg: {e}") from e
        try:
            opt = OptimizerConfig(
                alpha=float(opt_d["alpha"]),
                epochs=int(opt_d["epochs"]),
                batch_size=int(opt_d["batch_size"]),
                clip_prox=bool(opt_d.get("clip_prox", True)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"opt: {e}") from e
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        out_dir = d.get("out_dir")
        if out_dir is not None and not isinstance(out_dir, str):
            raise ConfigError(f"out_dir must be a string path, got {out_dir!r}")
        return cls(
            arch=arch,
            stream=stream_spec.to_dict(),
            reg=reg,
            opt=opt,
            seed=seed,
            out_dir=out_dir,
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(raw)


def _resolve_out_dir(cfg: RunConfig, override: str | None, fallback_name: str) -> Path:
    if override:
        return Path(override)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / fallback_name


def _execute(cfg: RunConfig, out_dir: Path):
    stream = build_stream(cfg.stream)
    return run_experiment(
        stream, cfg.arch, cfg.reg, cfg.opt, seed=cfg.seed, out_dir=out_dir
    )


def cmd_run(config_path, out: str | None = None, seed: int | None = None) -> int:
    """Execute one configured experiment; artifacts land in the run dir."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    out_dir = _resolve_out_dir(cfg, out, Path(config_path).stem)
    result = _execute(cfg, out_dir)
    m = result.metrics
    final_a = average_accuracy(m, m.num_tasks)
    line = f"run complete: tasks={m.num_tasks} A={final_a:.4f}"
    if m.num_tasks >= 2:
        line += f" F={average_forgetting(m):.6f}"
    print(line)
    print(f"artifacts in {out_dir}")
    return 0


def _load_grid(grid_path) -> list[dict]:
    path = Path(grid_path)
    if not path.exists():
        raise ConfigError(f"grid file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    rows = raw.get("rows") if isinstance(raw, dict) else raw
    if not isinstance(rows, list) or not rows:
        raise ConfigError(f"{path}: grid must be a non-empty list of rows")
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise ConfigError(f"{path}: row {i} must be an object")
        parsed = {}
        for key in ("mu_s_on", "mu_p_on", "nu_on"):
            if key not in row:
                raise ConfigError(f"{path}: row {i} is missing '{key}'")
            if not isinstance(row[key], bool):
                raise ConfigError(f"{path}: row {i} field '{key}' must be a boolean")
            parsed[key] = row[key]
        out.append(parsed)
    return out


def _variant_config(cfg: RunConfig, row: dict) -> RunConfig:
    reg = RegularizerConfig(
        mu_s=cfg.reg.mu_s if row["mu_s_on"] else 0.0,
        mu_p=cfg.reg.mu_p if row["mu_p_on"] else 0.0,
        nu=cfg.reg.nu if row["nu_on"] else 0.0,
        epsilon=cfg.reg.epsilon,
    )
    return replace(cfg, reg=reg)


def _row_dir_name(i: int, row: dict) -> str:
    flags = "".join("1" if row[k] else "0" for k in ("mu_s_on", "mu_p_on", "nu_on"))
    return f"row{i}_smu{flags[0]}_pmu{flags[1]}_nu{flags[2]}"


def _run_ablation_row(args):
    cfg, row, row_dir = args
    result = _execute(_variant_config(cfg, row), row_dir)
    m = result.metrics
    a = average_accuracy(m, m.num_tasks)
    f = average_forgetting(m) if m.num_tasks >= 2 else 0.0
    return a, f


def cmd_ablate(
    config_path, grid_path, out: str | None = None, seed: int | None = None, threads: int = 1
) -> int:
    """Run one experiment per grid row and tabulate A and F per variant."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    rows = _load_grid(grid_path)
    out_dir = _resolve_out_dir(cfg, out, Path(config_path).stem + "_ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, row, out_dir / _row_dir_name(i, row)) for i, row in enumerate(rows)]

    outcomes: list[tuple[float, float] | None] = [None] * len(jobs)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_run_ablation_row, job): i for i, job in enumerate(jobs)}
            for fut, i in futures.items():
                try:
                    outcomes[i] = fut.result()
                except Exception as e:
                    print(f"row {i} failed: {e}", file=sys.stderr)
    else:
        for i, job in enumerate(jobs):
            try:
                outcomes[i] = _run_ablation_row(job)
            except Exception as e:  # keep remaining rows alive
                print(f"row {i} failed: {e}", file=sys.stderr)

    csv_path = out_dir / "ablation.csv"
    failed = 0
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mu_s_on", "mu_p_on", "nu_on", "A", "F"])
        for row, outcome in zip(rows, outcomes):
            flags = [str(row[k]).lower() for k in ("mu_s_on", "mu_p_on", "nu_on")]
            if outcome is None:
                failed += 1
                writer.writerow(flags + ["error", "error"])
            else:
                a, f = outcome
                writer.writerow(flags + [repr(a), repr(f)])
    print(f"ablation summary written to {csv_path}")
    return 1 if failed else 0


def cmd_export_plots(run_dir, out: str | None = None) -> int:
    """Regenerate retention and average-accuracy CSVs from metrics.json."""
    run_path = Path(run_dir)
    metrics_file = run_path / "metrics.json"
    if not metrics_file.exists():
        raise ConfigError(f"no metrics.json in {run_path}")
    try:
        payload = json.loads(metrics_file.read_text())
        rows = payload["accuracy_matrix"]
    except (json.JSONDecodeError, KeyError) as e:
        raise ConfigError(f"{metrics_file}: malformed ({e})") from e
    target = Path(out) if out else run_path
    target.mkdir(parents=True, exist_ok=True)
    paths = write_retention_csvs(rows, target)
    m = MetricsMatrix.from_lists(rows)
    avg_path = target / "average_accuracy.csv"
    lines = ["task,average_accuracy"]
    lines += [f"{t},{average_accuracy(m, t)!r}" for t in range(1, m.num_tasks + 1)]
    avg_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(paths)} retention files and {avg_path.name} to {target}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsecl",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train a configured task sequence")
    p_run.add_argument("config", help="JSON run config (see configs/example_run.json)")
    p_run.add_argument("--out", help="output directory (overrides config and env root)")
    p_run.add_argument("--seed", type=int, help="override the config seed")

    p_ab = sub.add_parser("ablate", help="run a component on/off grid")
    p_ab.add_argument("config", help="base JSON run config")
    p_ab.add_argument("grid", help="JSON grid: rows of {mu_s_on, mu_p_on, nu_on}")
    p_ab.add_argument("--out", help="output directory for all rows")
    p_ab.add_argument("--seed", type=int, help="override the config seed")
    p_ab.add_argument("--threads", type=int, default=1, help="parallel row processes")

    p_ex = sub.add_parser("export-plots", help="rebuild CSVs from a finished run")
    p_ex.add_argument("run_dir", help="directory containing metrics.json")
    p_ex.add_argument("--out", help="write CSVs here instead of the run dir")
    return parser


def main(argv=None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, out=args.out, seed=args.seed)
        if args.command == "ablate":
            return cmd_ablate(
                args.config, args.grid, out=args.out, seed=args.seed, threads=args.threads
            )
        if args.command == "export-plots":
            return cmd_export_plots(args.run_dir, out=args.out)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, IngestionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SparseclError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def console_main() -> None:  # pragma: no cover
    sys.exit(main())

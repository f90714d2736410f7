"""Command-line front end.

    paftta gen-task     --config exp.yaml
    paftta train-source --config exp.yaml
    paftta adapt        --config exp.yaml [--set hp.alpha=1.0] [--seeds 0,1,2]
    paftta sweep        --config exp.yaml --set sweep.axis=alpha --set "sweep.values=[0.5,1,2,4]"
    paftta report       OUT/runs --out OUT/report
    paftta default-config > exp.yaml

Every output lands under the config's ``output_dir`` (relative paths are
resolved against ``$PAFTTA_OUTPUT_ROOT`` when it is set).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, metrics, nn_core
from .config import (STREAM_AXES, ExperimentConfig, apply_overrides, load_config, resolve_output_dir)
from .errors import ConfigurationError, PafttaError
from .nn_core import LayerStack, NormMode
from .runner import run_stream
from .stream import Task, make_task

TASK_FILE = "task.json"
CHECKPOINT_FILE = "source.json"
CONFIG_FILE = "config.yaml"


@dataclass
class RunSummary:
    variant: str
    seed: int
    acc: float
    aur: float
    hs: float
    wrongly_filtered: float
    run_dir: str


# -- task and source model ----------------------------------------------------

def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigurationError(f"cannot write {path}: {exc}") from exc


def cmd_gen_task(cfg: ExperimentConfig) -> Path:
    out = _ensure_dir(resolve_output_dir(cfg))
    task = make_task(cfg.stream)
    path = out / TASK_FILE
    _write_text(path, json.dumps(task.to_dict(), separators=(",", ":")))
    _write_text(out / CONFIG_FILE, cfg.dump())
    return path


def load_task(cfg: ExperimentConfig) -> Task:
    path = resolve_output_dir(cfg) / TASK_FILE
    if not path.exists():
        raise ConfigurationError(f"missing task file {path}; run gen-task first")
    task = Task.from_dict(json.loads(path.read_text()))
    if task.config != cfg.stream:
        raise ConfigurationError(f"{path} was generated from a different stream config; rerun gen-task")
    return task


def holdout_accuracy(stack: LayerStack, task: Task) -> float:
    pred = nn_core.predict(stack, task.holdout_x, NormMode.RUNNING)
    return float(np.mean(pred == task.holdout_y))


def cmd_train_source(cfg: ExperimentConfig) -> tuple[Path, float]:
    task = load_task(cfg)
    t = cfg.train
    stack = nn_core.train_source(task.source_x, task.source_y, cfg.arch, epochs=t.epochs, lr=t.lr, seed=t.seed,
                                 batch_size=t.batch_size, bn_momentum=t.bn_momentum)
    acc = holdout_accuracy(stack, task)
    path = resolve_output_dir(cfg) / CHECKPOINT_FILE
    nn_core.save_checkpoint(stack, path, extra={"holdout_acc": acc, "train": asdict(t),
                                                "scenario_hash": cfg.scenario_hash()})
    return path, acc


def load_source(cfg: ExperimentConfig) -> LayerStack:
    path = resolve_output_dir(cfg) / CHECKPOINT_FILE
    if not path.exists():
        raise ConfigurationError(f"missing checkpoint {path}; run train-source first")
    stack, extra = nn_core.load_checkpoint(path)
    if extra.get("scenario_hash") != cfg.scenario_hash():
        raise ConfigurationError(f"{path} was trained under a different stream/arch/train config; rerun train-source")
    return stack


# -- adaptation runs ----------------------------------------------------------

def run_variants(cfg: ExperimentConfig, task: Task, source: LayerStack, out: Path) -> list[RunSummary]:
    """Run every (variant, seed) pair, each into its own directory under ``out/runs``."""
    summaries = []
    for v_index, variant in enumerate(cfg.variants):
        hp = variant.hyperparams(cfg.hp)
        for seed in cfg.seeds:
            run_dir = _ensure_dir(out / "runs" / variant.name / f"seed_{seed}")
            started = datetime.now(timezone.utc).isoformat()
            t0 = time.perf_counter()
            with open(run_dir / "steps.jsonl", "w") as log:
                result = run_stream(task, source, hp, seed, log=log, log_samples=cfg.log_samples)
            elapsed = time.perf_counter() - t0

            rows = metrics.per_domain_summary(result.records, cfg.pooling)
            metrics.write_summary_csv(rows, run_dir / "summary.csv")
            _write_text(run_dir / "summary.txt",
                        metrics.format_table(["domain", "ACC", "AUR", "H-S"], [r.as_list() for r in rows]) + "\n")
            wf = metrics.wrongly_filtered_rate(result.actions, result.open_flags)
            metrics.write_curve_csv(wf, run_dir / "wrongly_filtered.csv", "wrongly_filtered")
            metrics.write_curve_csv(metrics.per_batch_hscore(result.records), run_dir / "hscore.csv", "hscore")
            wf_total = metrics.record_wrongly_filtered(result.records)

            manifest = {
                "config_hash": cfg.hash(),
                "scenario_hash": cfg.scenario_hash(),
                "variant": variant.name,
                "variant_index": v_index,
                "hp": hp.to_dict(),
                "seed": seed,
                "n_batches": len(result.records),
                "package_version": __version__,
                "started_at": started,
                "wall_clock_seconds": elapsed,
            }
            _write_text(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            overall = rows[-1]
            summaries.append(RunSummary(variant.name, seed, overall.acc, overall.aur, overall.hs, wf_total,
                                        str(run_dir)))
    return summaries


def _write_results(path: Path, summaries: list[RunSummary], prefix: dict | None = None) -> None:
    prefix = prefix or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(prefix) + ["variant", "seed", "acc", "aur", "hs", "wrongly_filtered"])
        for s in summaries:
            w.writerow(list(prefix.values()) + [s.variant, s.seed, repr(float(s.acc)), repr(float(s.aur)), repr(float(s.hs)),
                                                repr(float(s.wrongly_filtered))])


def cmd_adapt(cfg: ExperimentConfig) -> list[RunSummary]:
    task = load_task(cfg)
    source = load_source(cfg)
    out = resolve_output_dir(cfg)
    summaries = run_variants(cfg, task, source, out)
    _write_results(out / "results.csv", summaries)
    return summaries


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    if cfg.sweep is None:
        raise ConfigurationError("sweep needs a 'sweep' section with an axis and values")
    base_task = load_task(cfg)
    source = load_source(cfg)
    out = resolve_output_dir(cfg)
    axis = cfg.sweep.axis
    rows = []
    for value in cfg.sweep.values:
        sub = cfg.with_sweep_value(value)
        # batch size and open ratio do not enter task geometry, so the source model stays valid
        task = make_task(sub.stream) if axis in STREAM_AXES else base_task
        for s in run_variants(sub, task, source, out / "sweep" / f"{axis}={value}"):
            rows.append((value, s))
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "axis_value", "variant", "seed", "acc", "aur", "hs"])
        for value, s in rows:
            w.writerow([axis, value, s.variant, s.seed, repr(float(s.acc)), repr(float(s.aur)), repr(float(s.hs))])
    return path


# -- reports ------------------------------------------------------------------

def _read_curve(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r[1]) for r in list(csv.reader(fh))[1:]])


def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def collect_runs(run_dirs: list[str | Path]) -> list[tuple[Path, dict]]:
    found = []
    for d in run_dirs:
        d = Path(d)
        if not d.exists():
            raise ConfigurationError(f"run directory not found: {d}")
        for m in sorted(d.rglob("manifest.json")):
            found.append((m.parent, json.loads(m.read_text())))
    if not found:
        raise ConfigurationError("no run manifests found under the given directories")
    return found


def cmd_report(run_dirs: list[str | Path], out: str | Path) -> Path:
    """Method x metric table (mean and std over seeds) plus averaged curves."""
    runs = collect_runs(run_dirs)
    scenarios = {m["scenario_hash"] for _, m in runs}
    if len(scenarios) > 1:
        raise ConfigurationError("incompatible runs: they come from different task/source configurations")

    groups: dict[str, list[tuple[Path, dict]]] = {}
    for run_dir, m in runs:
        groups.setdefault(m["variant"], []).append((run_dir, m))
    for name, members in groups.items():
        if len({json.dumps(m["hp"], sort_keys=True) for _, m in members}) > 1:
            raise ConfigurationError(f"incompatible runs: variant {name!r} appears with different hyperparameters")
        seeds = [m["seed"] for _, m in members]
        if len(set(seeds)) != len(seeds):
            raise ConfigurationError(f"variant {name!r} has duplicate runs for one seed")
    order = sorted(groups, key=lambda n: (min(m.get("variant_index", 0) for _, m in groups[n]), n))

    out = _ensure_dir(Path(out))
    table, text_rows, curves = [], [], {"wrongly_filtered": {}, "hscore": {}}
    for name in order:
        members = sorted(groups[name], key=lambda rm: rm[1]["seed"])
        overall = [metrics.read_summary_csv(rd / "summary.csv")[-1] for rd, _ in members]
        wf = [float(np.nanmean(_read_curve(rd / "wrongly_filtered.csv"))) for rd, _ in members]
        stats = {k: _mean_std([getattr(o, k) for o in overall]) for k in ("acc", "aur", "hs")}
        stats["wf"] = _mean_std(wf)
        table.append([name, len(members)] + [v for k in ("acc", "aur", "hs", "wf") for v in stats[k]])
        text_rows.append([name, str(len(members))] + [f"{stats[k][0]:.4f} ± {stats[k][1]:.4f}"
                                                      for k in ("acc", "aur", "hs", "wf")])
        for curve in curves:
            series = [_read_curve(rd / f"{curve}.csv") for rd, _ in members]
            if len({len(s) for s in series}) > 1:
                raise ConfigurationError(f"variant {name!r}: runs have different lengths")
            curves[curve][name] = np.mean(series, axis=0)

    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n_seeds", "acc_mean", "acc_std", "aur_mean", "aur_std", "hs_mean", "hs_std",
                    "wf_mean", "wf_std"])
        for row in table:
            w.writerow(row[:2] + [repr(float(v)) for v in row[2:]])
    _write_text(out / "report.txt",
                metrics.format_table(["method", "seeds", "ACC", "AUR", "H-S", "wrongly filtered"], text_rows) + "\n")
    for curve, by_name in curves.items():
        n = max(len(s) for s in by_name.values())
        with open(out / f"curve_{curve}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch_index"] + list(by_name))
            for i in range(n):
                w.writerow([i] + [repr(float(s[i])) if i < len(s) else "" for s in by_name.values()])
    return out


# -- argument parsing -----------------------------------------------------------

def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.seeds is not None:
        overrides.append(f"seeds=[{args.seeds}]")
    if args.variants is not None:
        overrides.append(f"variants=[{args.variants}]")
    return apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paftta", description="Open-set test-time adaptation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", "-c", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. hp.alpha=1.0 (repeatable)")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1,2")
        p.add_argument("--variants", help="comma-separated variant presets, e.g. tent,paf")
        return p

    with_config(sub.add_parser("gen-task", help="generate the synthetic task"))
    with_config(sub.add_parser("train-source", help="train the source model on clean data"))
    with_config(sub.add_parser("adapt", help="run every method variant over the stream"))
    with_config(sub.add_parser("sweep", help="repeat adapt along one hyperparameter axis"))
    with_config(sub.add_parser("default-config", help="print the default config as YAML"))
    rep = sub.add_parser("report", help="aggregate finished runs into tables and curves")
    rep.add_argument("run_dirs", nargs="+", help="directories searched for run manifests")
    rep.add_argument("--out", required=True, help="report output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = cmd_report(args.run_dirs, args.out)
            print((out / "report.txt").read_text(), end="")
            return 0
        cfg = _config_from_args(args)
        if args.command == "default-config":
            print(cfg.dump(), end="")
        elif args.command == "gen-task":
            print(f"wrote {cmd_gen_task(cfg)}")
        elif args.command == "train-source":
            path, acc = cmd_train_source(cfg)
            print(f"wrote {path}; held-out clean accuracy {acc:.4f}")
        elif args.command == "adapt":
            summaries = cmd_adapt(cfg)
            rows = [[s.variant, str(s.seed), s.acc, s.aur, s.hs, s.wrongly_filtered] for s in summaries]
            print(metrics.format_table(["method", "seed", "ACC", "AUR", "H-S", "wrongly filtered"], rows))
        elif args.command == "sweep":
            print(f"wrote {cmd_sweep(cfg)}")
    except (PafttaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

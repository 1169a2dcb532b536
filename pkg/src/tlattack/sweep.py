"""Experiment sweep: a grid of retrain/attack settings, repeated with
derived seeds, reported as mean/std CSV rows plus raw transcripts."""

from __future__ import annotations

import csv
import io
import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attack import brute_force, craft_set
from .config import RunConfig, parse_assignments
from .data import geometric_ramp
from .errors import ConfigError
from .experiment import attack_seed, build_student, make_split
from .io import atomic_write_text
from .metrics import build_report
from .netcore import Network
from .pipeline import accuracy
from .seeding import derive_seed

AXES = {
    "n_classes": int,
    "tune_from_layer": lambda s: None if s.lower() == "none" else int(s),
    "n_new_layers": int,
    "reject_pool": int,
    "target_value": float,
    "init_mode": str,
    "train_size": int,
    "imbalance": float,  # per-class count decay, class j gets train_size * imbalance**j
}

CSV_TAIL = ["acc_mean", "acc_std", "nabac_mean", "nabac_std", "coverage_fail_rate",
            "eff95_mean", "eff95_std", "eff99_mean", "eff99_std", "wall_s"]


@dataclass
class SweepPlan:
    axes: dict[str, tuple] = field(default_factory=dict)
    repetitions: int = 1
    seed: int = 0

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]


def parse_plan(text: str, source: str = "<plan>") -> SweepPlan:
    """``repetitions = N``, ``seed = N`` and ``axis.<name> = v1, v2, ...`` lines."""
    plan = SweepPlan()
    for key, raw, n in parse_assignments(text, source):
        where = f"{source}:{n}"
        try:
            if key == "repetitions":
                plan.repetitions = int(raw)
            elif key == "seed":
                plan.seed = int(raw)
            elif key.startswith("axis.") and key[5:] in AXES:
                values = [v.strip() for v in raw.split(",") if v.strip()]
                if not values:
                    raise ConfigError(f"{where}: axis {key[5:]!r} has no values")
                plan.axes[key[5:]] = tuple(AXES[key[5:]](v) for v in values)
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}: {exc}") from None
    if plan.repetitions < 1:
        raise ConfigError(f"{source}: repetitions must be >= 1")
    return plan


def load_plan(path) -> SweepPlan:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from exc
    return parse_plan(text, str(path))


def cell_seed(plan_seed: int, cell: dict, rep: int) -> int:
    return derive_seed(plan_seed, "cell", tuple(sorted(cell.items())), rep)


@dataclass
class RunResult:
    cell_id: str
    rep: int
    seed: int
    acc: float
    nabac: Optional[int]
    eff95: float
    eff99: float
    train_counts: list[int]
    histogram: dict[int, int]
    js_train: float
    js_target: float
    records: list[dict]
    wall_s: float


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def run_cell(config: RunConfig, extractor: Network, corpus, cell: dict, rep: int, plan_seed: int,
             craft_cache: dict, attacker_data=None, workers: int = 1, cell_id: str = "") -> RunResult:
    """Retrain one student for ``cell`` and attack it with an exhaust run."""
    t0 = time.perf_counter()
    seed = cell_seed(plan_seed, cell, rep)
    targets = tuple(config.data.target_classes)
    k = cell.get("n_classes", len(targets))
    if not 1 <= k <= len(targets):
        raise ConfigError(f"n_classes {k} outside [1, {len(targets)}]")
    targets = targets[:k]
    size = cell.get("train_size", config.data.train_per_class)
    counts = [size] * k
    if "imbalance" in cell:
        # which class is the majority is drawn per run, so the ramp does not
        # line up with any class's built-in ease of triggering
        ramp = geometric_ramp(size, cell["imbalance"], k)
        counts = [ramp[j] for j in np.random.default_rng(derive_seed(seed, "ramp")).permutation(k)]
    split = make_split(config, corpus, targets, counts, derive_seed(seed, "split"))

    overrides = {}
    if "tune_from_layer" in cell:
        overrides["tune_from_layer"] = cell["tune_from_layer"]
    if "n_new_layers" in cell:
        overrides["n_new_layers"] = cell["n_new_layers"]
    if "reject_pool" in cell:
        overrides["reject_pool_size"] = cell["reject_pool"] or None
    student = build_student(config, extractor, split, derive_seed(seed, "retrain"), **overrides)

    acfg = replace(config.attack, seed=attack_seed(config))
    if "target_value" in cell:
        acfg = replace(acfg, target_value=cell["target_value"])
    if "init_mode" in cell:
        acfg = replace(acfg, init_mode=cell["init_mode"])
    # crafting sees only the public extractor, so one set serves every student
    key = repr(acfg)
    if key not in craft_cache:
        craft_cache[key] = craft_set(extractor, acfg, dataset=attacker_data, workers=workers)
    transcript = brute_force(extractor, student, acfg, "exhaust", crafted=craft_cache[key])

    m = config.metrics
    report = build_report(transcript, k, m.thresholds, m.nabac_threshold, student.meta["train_counts"])
    records = [dict(r.to_dict(), cell_id=cell_id, rep=rep) for r in transcript.records]
    return RunResult(cell_id, rep, seed, accuracy(student, split.holdout), report.nabac,
                     report.effectiveness.get(0.95, float("nan")), report.effectiveness.get(0.99, float("nan")),
                     student.meta["train_counts"], report.class_histogram, report.js_distance_train,
                     report.js_distance_targets, records, time.perf_counter() - t0)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_sweep(config: RunConfig, plan: SweepPlan, extractor: Network, corpus, out_dir,
              attacker_data=None, workers: int = 1, log: Callable[[str], None] = lambda s: None,
              craft_cache: Optional[dict] = None) -> dict:
    """Run every cell x repetition and write the report bundle to ``out_dir``.

    Files: sweep.csv (one row per cell), runs.csv (one row per run),
    transcripts.jsonl, and fig3/fig4/fig5a/fig5b CSVs where the axes allow.
    """
    out = Path(out_dir)
    cells = plan.cells()
    names = list(plan.axes)
    cache = {} if craft_cache is None else craft_cache
    results: list[list[RunResult]] = []
    for c, cell in enumerate(cells):
        cell_id = f"c{c:03d}"
        runs = [run_cell(config, extractor, corpus, cell, rep, plan.seed, cache, attacker_data, workers, cell_id)
                for rep in range(plan.repetitions)]
        results.append(runs)
        log(f"{cell_id} {cell} eff99={np.mean([r.eff99 for r in runs]):.3f}")

    rows = []
    for c, (cell, runs) in enumerate(zip(cells, results)):
        covered = [r.nabac for r in runs if r.nabac is not None]
        acc = _mean_std([r.acc for r in runs])
        nab = _mean_std(covered)
        e95 = _mean_std([r.eff95 for r in runs])
        e99 = _mean_std([r.eff99 for r in runs])
        rows.append([f"c{c:03d}", *[cell[n] for n in names], *acc, *nab, 1.0 - len(covered) / len(runs),
                     *e95, *e99, round(sum(r.wall_s for r in runs), 3)])
    files = {"sweep.csv": _csv(["cell_id", *names, *CSV_TAIL], rows)}

    flat = [r for runs in results for r in runs]
    files["runs.csv"] = _csv(
        ["cell_id", "rep", "seed", "acc", "nabac", "eff95", "eff99", "js_train", "js_target"],
        [[r.cell_id, r.rep, r.seed, r.acc, "" if r.nabac is None else r.nabac, r.eff95, r.eff99,
          r.js_train, r.js_target] for r in flat])
    files["transcripts.jsonl"] = "".join(json.dumps(rec, sort_keys=True) + "\n" for r in flat for rec in r.records)

    by_axis = {"tune_from_layer": "fig3.csv", "reject_pool": "fig4.csv"}
    for axis, name in by_axis.items():
        if axis in names:
            files[name] = _csv([axis, "eff99_mean", "acc_mean"],
                               [[row[1 + names.index(axis)], row[-3], row[1 + len(names)]] for row in rows])
    files["fig5a.csv"] = _csv(["cell_id", "class", "count"],
                              [[f"c{c:03d}", cls, sum(r.histogram.get(cls, 0) for r in runs)]
                               for c, runs in enumerate(results) for cls in sorted(runs[0].histogram)])
    files["fig5b.csv"] = _csv(["js_train", "js_target"], [[r.js_train, r.js_target] for r in flat])
    for name, text in files.items():
        atomic_write_text(out / name, text)
    return {"cells": cells, "results": results, "files": sorted(files)}

import os
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from tlattack import config as config_mod
from tlattack.attack import brute_force, craft_set
from tlattack.experiment import attack_seed, build_student, build_teacher, extractor_of, load_corpus, make_split
from tlattack.netcore import Network, dense, relu, softmax_head
from tlattack.pipeline import StudentModel

WORKERS = min(4, os.cpu_count() or 1)


def identity_extractor(m: int = 2) -> Network:
    return Network([dense(m, m, frozen=True), relu(frozen=True)], [(np.eye(m), np.zeros(m)), None], (m,), 0)


def linear_student(extractor: Network, W, names=None) -> StudentModel:
    W = np.asarray(W, dtype=np.float64)
    m, k = W.shape
    head = Network([dense(m, k), softmax_head(k)], [(W, np.zeros(k)), None], (m,), 0)
    return StudentModel(extractor, head, list(names or [str(c) for c in range(k)]))


def _desk(cfg):
    t0 = time.perf_counter()
    corpus = load_corpus(cfg)
    split = make_split(cfg, corpus)
    teacher = build_teacher(cfg, split)
    extractor = extractor_of(teacher)
    acfg = replace(cfg.attack, seed=attack_seed(cfg))
    crafted = craft_set(extractor, acfg, workers=WORKERS)
    return SimpleNamespace(config=cfg, corpus=corpus, split=split, teacher=teacher, extractor=extractor,
                           attack=acfg, crafted=crafted, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def desk():
    """Default desk run: 10 classes, source 0-4, target 5-9, 20 per class."""
    d = _desk(config_mod.RunConfig())
    t0 = time.perf_counter()
    d.student = build_student(d.config, d.extractor, d.split)
    d.transcript = brute_force(d.extractor, d.student, d.attack, "exhaust", crafted=d.crafted)
    d.seconds += time.perf_counter() - t0
    # keyed like the sweep's cache so sweeps over this extractor reuse it
    d.craft_cache = {repr(d.attack): d.crafted}
    return d


@pytest.fixture(scope="session")
def reject_desk():
    """15-class corpus; classes 10-14 supply reject samples and probes."""
    return _desk(config_mod.loads("data.n_classes = 15\n"))


WALL_KEYS = {"wall_ms", "wall_s", "runtime"}


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in WALL_KEYS}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def artifact_view(directory):
    """Every file under ``directory`` with wall-clock fields removed."""
    import csv
    import json
    from pathlib import Path

    out = {}
    for p in sorted(Path(directory).rglob("*")):
        if not p.is_file():
            continue
        key = str(p.relative_to(directory))
        if p.suffix == ".jsonl":
            out[key] = [_strip(json.loads(line)) for line in p.read_text().splitlines()]
        elif p.suffix == ".json":
            out[key] = _strip(json.loads(p.read_text()))
        elif p.suffix == ".csv":
            rows = list(csv.reader(p.open()))
            drop = [i for i, h in enumerate(rows[0]) if h in WALL_KEYS] if rows else []
            out[key] = [[v for i, v in enumerate(r) if i not in drop] for r in rows]
        else:
            out[key] = p.read_bytes()
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

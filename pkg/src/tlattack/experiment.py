"""Building blocks shared by the CLI and the sweep: corpus, split and models
reconstructed deterministically from a RunConfig."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, SplitSpec, load_idx, partition, synth_dataset
from .errors import ConfigError
from .netcore import Network
from .pipeline import StudentModel, TrainConfig, default_arch, make_extractor, retrain, train_teacher
from .seeding import derive_seed


@dataclass
class Split:
    teacher_set: Dataset
    student_train: Dataset
    holdout: Dataset
    # non-task classes, split into a part that may be trained on as reject
    # samples and a disjoint probe part used only for evaluation
    reject_train: Dataset
    reject_probe: Dataset


def load_corpus(config: RunConfig) -> Dataset:
    d = config.data
    if d.source == "synth":
        return synth_dataset(d.n_classes, d.per_class, d.image_side, derive_seed(config.seed, "data"), d.noise)
    if d.source == "idx":
        if not d.idx_images or not d.idx_labels:
            raise ConfigError("data.source = idx needs data.idx_images and data.idx_labels")
        for p in (d.idx_images, d.idx_labels):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        return load_idx(d.idx_images, d.idx_labels)
    raise ConfigError(f"data.source must be synth or idx, got {d.source!r}")


def make_split(config: RunConfig, corpus: Dataset, target_classes: Optional[Sequence[int]] = None,
               train_counts: Optional[Sequence[int]] = None, seed: Optional[int] = None) -> Split:
    """Partition the corpus; ``train_counts[j]`` samples for the j-th target class."""
    d = config.data
    targets = tuple(d.target_classes if target_classes is None else target_classes)
    if train_counts is None:
        train_counts = [d.train_per_class] * len(targets)
    if len(train_counts) != len(targets):
        raise ConfigError("one training count per target class required")
    seed = derive_seed(config.seed, "split") if seed is None else seed
    try:
        spec = SplitSpec(tuple(d.source_classes), targets, dict(zip(targets, map(int, train_counts))),
                         d.holdout_per_class, seed)
        teacher_set, train, hold, pool = partition(corpus, spec)
    except ValueError as exc:
        raise ConfigError(f"data split: {exc}") from exc
    rng = np.random.default_rng(derive_seed(seed, "reject-probe"))
    order = rng.permutation(len(pool))
    n_probe = int(round(d.reject_probe_fraction * len(pool)))
    return Split(teacher_set, train, hold, pool.take(np.sort(order[n_probe:])), pool.take(np.sort(order[:n_probe])))


def teacher_config(config: RunConfig) -> TrainConfig:
    t = config.teacher
    return TrainConfig(t.epochs, t.lr, t.batch_size, derive_seed(config.seed, "teacher"), t.holdout_fraction)


def build_teacher(config: RunConfig, split: Split, log: Optional[list] = None) -> Network:
    arch = default_arch(split.teacher_set.image_shape, split.teacher_set.n_classes, config.teacher.hidden)
    return train_teacher(split.teacher_set, arch, teacher_config(config), log)


def extractor_of(teacher: Network) -> Network:
    return make_extractor(teacher)


def build_student(config: RunConfig, extractor: Network, split: Split, seed: Optional[int] = None,
                  log: Optional[list] = None, **overrides) -> StudentModel:
    seed = derive_seed(config.seed, "retrain") if seed is None else seed
    spec = replace(config.retrain, seed=seed, **overrides)
    if spec.reject_pool_size == 0:
        spec = replace(spec, reject_pool_size=None)
    try:
        student = retrain(extractor, split.student_train, spec,
                          split.reject_train if spec.reject_pool_size is not None else None,
                          split.holdout, log)
    except ValueError as exc:
        raise ConfigError(f"retrain: {exc}") from exc
    student.meta["train_counts"] = [int(c) for c in split.student_train.class_counts()]
    return student


def attack_seed(config: RunConfig) -> int:
    return derive_seed(config.seed, "attack")

"""Target-agnostic brute-force attack on a transfer-learned Softmax head.

For every neuron ``i`` of the extractor's activation vector an input is
crafted by plain gradient descent on

    L = gamma * (F(x)[i] - Y)^2 + beta * sum_{l != i} relu(F(x)[l])^2

using only the (public) extractor. The student is queried exactly once per
crafted input, to check whether it answers with high confidence.

Crafting is batched: neurons are processed in fixed blocks
``[b * block_size, (b + 1) * block_size)`` whatever the visiting order or the
worker count, so transcripts never depend on either.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import NumericOverflowError, ShapeError
from .netcore import Network, backward_input, forward
from .pipeline import StudentModel, activation_width
from .seeding import derive_seed

INIT_MODES = ("blank", "random", "sample")
CLIP_POLICIES = ("none", "unit_range")
NEURON_ORDERS = ("sequential", "seeded_shuffle")
STOP_RULES = ("first_bypass", "all_classes", "exhaust")
CAPS = (50.0, 100.0, 200.0, 1000.0)


@dataclass
class AttackConfig:
    K: int = 2000
    alpha: float = 0.1
    gamma: float = 1.0
    beta: float = 0.01
    target_value: float = 1000.0
    init_mode: str = "blank"
    # the desk extractor cannot reach large targets inside [0, 1]; see README
    clip: str = "none"
    confidence_threshold: float = 0.99
    neuron_order: str = "sequential"
    seed: int = 0
    # neurons crafted together in one batched descent
    block_size: int = 64
    # optional override of the neuron count; must equal the extractor width
    M: Optional[int] = None

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.alpha <= 0 or self.target_value <= 0:
            raise ValueError("alpha and target_value must be > 0")
        if not 0 < self.confidence_threshold < 1:
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.clip not in CLIP_POLICIES:
            raise ValueError(f"clip must be one of {CLIP_POLICIES}")
        if self.neuron_order not in NEURON_ORDERS:
            raise ValueError(f"neuron_order must be one of {NEURON_ORDERS}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def attack_loss(F_x, i: int, target_value: float, gamma: float, beta: float):
    """Loss and dL/dF for one activation vector (or a batch with per-row ``i``)."""
    F = np.asarray(F_x, dtype=np.float64)
    single = F.ndim == 1
    F2 = F[None] if single else F
    idx = np.atleast_1d(np.asarray(i, dtype=np.int64))
    if idx.shape[0] != F2.shape[0]:
        idx = np.broadcast_to(idx, (F2.shape[0],))
    if np.any(idx < 0) or np.any(idx >= F2.shape[1]):
        raise IndexError("neuron index out of range")
    rows = np.arange(F2.shape[0])
    on = F2[rows, idx] - target_value
    off = np.maximum(F2, 0.0)
    off[rows, idx] = 0.0
    loss = gamma * on ** 2 + beta * np.sum(off ** 2, axis=1)
    grad = 2.0 * beta * off
    grad[rows, idx] = 2.0 * gamma * on
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def init_input(mode: str, shape, seed: int = 0, dataset: Optional[Dataset] = None) -> np.ndarray:
    """Starting point of a crafting run.

    blank: all ones; random: seeded U[0, 1); sample: seeded draw from ``dataset``.
    """
    shape = tuple(shape)
    if mode == "blank":
        return np.ones(shape)
    if mode == "random":
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)
    if mode == "sample":
        if dataset is None or len(dataset) == 0:
            raise ValueError("sample init needs a non-empty dataset")
        row = np.random.default_rng(seed).integers(len(dataset))
        x = dataset.inputs[row]
        if x.shape != shape:
            raise ShapeError(f"dataset sample shape {x.shape} != {shape}")
        return x.copy()
    raise ValueError(f"unknown init mode {mode!r}")


@dataclass
class CraftedInput:
    neuron: int
    input: np.ndarray
    activation: np.ndarray  # attacker's extractor output at the crafted input
    loss_trajectory: list[float]
    iterations: int
    wall_ms: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.loss_trajectory[-1]


def _project(x, clip):
    if clip == "unit_range":
        np.clip(x, 0.0, 1.0, out=x)
    return x


def craft_block(extractor: Network, neurons: Sequence[int], config: AttackConfig,
                inits: np.ndarray) -> list[CraftedInput]:
    """Craft one input per neuron with a single batched descent of K steps."""
    neurons = np.asarray(neurons, dtype=np.int64)
    m = activation_width(extractor)
    if np.any(neurons < 0) or np.any(neurons >= m):
        raise IndexError("neuron index out of range")
    x = np.array(inits, dtype=np.float64)
    if x.shape != (len(neurons),) + extractor.input_shape:
        raise ShapeError(f"init shape {x.shape} does not match extractor input")
    x = _project(x, config.clip)
    every = max(1, config.K // 100)
    trajectory = []
    for j in range(config.K):
        try:
            F, trace = forward(extractor, x)
            with np.errstate(over="ignore"):
                loss, g = attack_loss(F, neurons, config.target_value, config.gamma, config.beta)
            if not np.all(np.isfinite(loss)):
                raise NumericOverflowError("attack loss is not finite")
            delta = backward_input(extractor, trace, g)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"crafting overflowed at iteration {j}: {exc}", j) from exc
        if j % every == 0:
            trajectory.append(loss)
        x -= config.alpha * delta
        if not np.all(np.isfinite(x)):
            raise NumericOverflowError(f"crafted input overflowed at iteration {j}", j)
        _project(x, config.clip)
    F, _ = forward(extractor, x)
    loss, _ = attack_loss(F, neurons, config.target_value, config.gamma, config.beta)
    trajectory.append(loss)
    traj = np.array(trajectory)  # (points, batch)
    return [CraftedInput(int(n), x[r].copy(), F[r].copy(), [float(v) for v in traj[:, r]], config.K)
            for r, n in enumerate(neurons)]


def _neuron_init(extractor: Network, neuron: int, config: AttackConfig,
                 dataset: Optional[Dataset]) -> np.ndarray:
    return init_input(config.init_mode, extractor.input_shape,
                      derive_seed(config.seed, "init", neuron), dataset)


def craft_for_neuron(extractor: Network, i: int, config: AttackConfig,
                     init: Optional[np.ndarray] = None, dataset: Optional[Dataset] = None) -> CraftedInput:
    """Run the inner loop for neuron ``i`` alone."""
    if init is None:
        init = _neuron_init(extractor, i, config, dataset)
    return craft_block(extractor, [i], config, np.asarray(init)[None])[0]


def _blocks_for(neurons: Iterable[int], block_size: int) -> list[list[int]]:
    by_block: dict[int, list[int]] = {}
    for n in sorted(set(neurons)):
        by_block.setdefault(n // block_size, []).append(n)
    return [by_block[b] for b in sorted(by_block)]


def craft_set(extractor: Network, config: AttackConfig, neurons: Optional[Iterable[int]] = None,
              dataset: Optional[Dataset] = None, workers: int = 1) -> dict[int, CraftedInput]:
    """Craft inputs for ``neurons`` (default: all), keyed by neuron index.

    Depends only on the extractor and config. Crafted sets can be reused
    against any student built on the same extractor.
    """
    m = activation_width(extractor)
    if config.M is not None and config.M != m:
        raise ShapeError(f"config.M={config.M} but extractor width is {m}")
    neurons = range(m) if neurons is None else neurons
    blocks = _blocks_for(neurons, config.block_size)

    def run(block):
        inits = np.stack([_neuron_init(extractor, n, config, dataset) for n in block]) if block else None
        t0 = time.perf_counter()
        out = craft_block(extractor, block, config, inits)
        per = (time.perf_counter() - t0) * 1000.0 / len(block)
        return out, per

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    crafted = {}
    for out, per in results:
        for c in out:
            c.wall_ms = per
            crafted[c.neuron] = c
    return crafted


@dataclass
class StudentQuery:
    predicted_class: int
    confidence: float
    rejected: bool = False


def query_student(student: StudentModel, x) -> StudentQuery:
    """Top class and its softmax probability for one input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != student.extractor.input_shape:
        raise ShapeError(f"input shape {x.shape} != {student.extractor.input_shape}")
    probs = student.predict_proba(x)
    c = int(np.argmax(probs))
    return StudentQuery(c, float(probs[c]), c == student.reject_index)


@dataclass
class AttackRecord:
    crafted: CraftedInput
    query: StudentQuery
    bypass: bool
    wall_ms: float

    def to_dict(self) -> dict:
        loss = self.crafted.final_loss
        return {
            "i": self.crafted.neuron,
            "confidence": self.query.confidence,
            "predicted_class": self.query.predicted_class,
            "rejected": self.query.rejected,
            "bypass": self.bypass,
            # natural probes (baseline runs) carry no loss; JSON has no NaN
            "final_loss": loss if np.isfinite(loss) else None,
            "iterations": self.crafted.iterations,
            "wall_ms": self.wall_ms,
        }


@dataclass
class AttackTranscript:
    records: list[AttackRecord] = field(default_factory=list)
    stop_reason: str = "exhaust"
    n_student_queries: int = 0
    n_classes: int = 0
    reject_index: Optional[int] = None
    confidence_threshold: float = 0.99

    def __len__(self):
        return len(self.records)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([r.query.confidence for r in self.records])

    @property
    def predictions(self) -> np.ndarray:
        return np.array([r.query.predicted_class for r in self.records], dtype=np.int64)

    @property
    def rejected(self) -> np.ndarray:
        return np.array([r.query.rejected for r in self.records], dtype=bool)

    @property
    def inputs(self) -> np.ndarray:
        return np.stack([r.crafted.input for r in self.records])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def meta(self) -> dict:
        return {"stop_reason": self.stop_reason, "n_student_queries": self.n_student_queries,
                "n_classes": self.n_classes, "reject_index": self.reject_index,
                "confidence_threshold": self.confidence_threshold, "n_records": len(self.records)}


def neuron_order(m: int, config: AttackConfig) -> list[int]:
    if config.neuron_order == "seeded_shuffle":
        return [int(v) for v in np.random.default_rng(derive_seed(config.seed, "neuron-order")).permutation(m)]
    return list(range(m))


def brute_force(extractor: Network, student: StudentModel, config: AttackConfig,
                stop: str = "exhaust", crafted: Optional[dict[int, CraftedInput]] = None,
                dataset: Optional[Dataset] = None, workers: int = 1) -> AttackTranscript:
    """Outer loop: craft for each neuron in order, query the student once.

    ``crafted`` may hold a pre-built set from :func:`craft_set`; missing
    neurons are crafted on demand, block by block.
    """
    if stop not in STOP_RULES:
        raise ValueError(f"stop must be one of {STOP_RULES}")
    m = activation_width(extractor)
    if config.M is not None and config.M != m:
        raise ShapeError(f"config.M={config.M} but extractor width is {m}")
    cache = {} if crafted is None else dict(crafted)
    transcript = AttackTranscript(n_classes=student.n_target_classes, reject_index=student.reject_index,
                                  confidence_threshold=config.confidence_threshold)
    order = neuron_order(m, config)
    seen: set[int] = set()
    # prefetch enough blocks to keep every worker busy
    prefetch = config.block_size * max(1, workers)
    for pos, i in enumerate(order):
        if i not in cache:
            upcoming = [n for n in order[pos:pos + prefetch] if n not in cache]
            wanted = {b * config.block_size + r for b in {n // config.block_size for n in upcoming}
                      for r in range(config.block_size)}
            cache.update(craft_set(extractor, config, [n for n in wanted if n < m], dataset, workers))
        c = cache[i]
        t0 = time.perf_counter()
        q = query_student(student, c.input)
        transcript.n_student_queries += 1
        wall = c.wall_ms + (time.perf_counter() - t0) * 1000.0
        bypass = (not q.rejected) and q.confidence >= config.confidence_threshold
        transcript.records.append(AttackRecord(c, q, bypass, wall))
        if bypass:
            seen.add(q.predicted_class)
        if stop == "first_bypass" and bypass:
            transcript.stop_reason = "first_bypass"
            return transcript
        if stop == "all_classes" and len(seen) >= student.n_target_classes:
            transcript.stop_reason = "all_classes"
            return transcript
    transcript.stop_reason = "exhaust"
    return transcript


def capped_attack(extractor: Network, student: StudentModel, config: AttackConfig,
                  caps: Sequence[float] = CAPS, stop: str = "exhaust", workers: int = 1,
                  dataset: Optional[Dataset] = None) -> dict[float, AttackTranscript]:
    """The brute-force attack repeated with the target activation capped."""
    from dataclasses import replace

    return {float(cap): brute_force(extractor, student, replace(config, target_value=float(cap)),
                                    stop, dataset=dataset, workers=workers)
            for cap in caps}

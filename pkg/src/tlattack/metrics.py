"""Attack metrics: NABAC, effectiveness, trigger histogram, JS distance."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attack import AttackRecord, AttackTranscript, CraftedInput, query_student
from .data import Dataset
from .pipeline import StudentModel


def _columns(transcript):
    """(predicted_class, confidence, rejected) arrays from a transcript or
    from a list of JSON-lines record dicts."""
    if isinstance(transcript, AttackTranscript):
        return transcript.predictions, transcript.confidences, transcript.rejected
    recs = list(transcript)
    pred = np.array([r["predicted_class"] for r in recs], dtype=np.int64)
    conf = np.array([r["confidence"] for r in recs], dtype=np.float64)
    rej = np.array([bool(r.get("rejected", False)) for r in recs], dtype=bool)
    return pred, conf, rej


def nabac(transcript, n_classes: int, threshold: float = 0.99) -> Optional[int]:
    """1-based attempt at which every class has been hit at >= threshold.

    None when some class is never hit.
    """
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    pred, conf, rej = _columns(transcript)
    seen = set()
    for attempt, (c, p, r) in enumerate(zip(pred, conf, rej), start=1):
        if not r and p >= threshold and 0 <= c < n_classes:
            seen.add(int(c))
            if len(seen) == n_classes:
                return attempt
    return None


def effectiveness(transcript, threshold: float) -> float:
    """Fraction of attempts answered (not rejected) with confidence >= threshold."""
    pred, conf, rej = _columns(transcript)
    if len(conf) == 0:
        raise ValueError("effectiveness of an empty transcript")
    return float(np.mean((conf >= threshold) & ~rej))


def class_histogram(transcript, threshold: float, n_classes: Optional[int] = None) -> dict[int, int]:
    """Trigger counts per class among non-rejected attempts >= threshold.

    With ``n_classes`` every class appears, zero counts included.
    """
    pred, conf, rej = _columns(transcript)
    if len(pred) == 0:
        return {}
    if n_classes is None and isinstance(transcript, AttackTranscript):
        n_classes = transcript.n_classes or None
    hit = pred[(conf >= threshold) & ~rej]
    hist = {} if n_classes is None else {c: 0 for c in range(n_classes)}
    for c in hit:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return dict(sorted(hist.items()))


def _as_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D distribution")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not normalised")
    return p


def _kl2(p, m):
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def js_distance(P, Q) -> float:
    """Square root of the base-2 Jensen-Shannon divergence, in [0, 1]."""
    p, q = _as_distribution(P, "P"), _as_distribution(Q, "Q")
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    m = 0.5 * (p + q)
    jsd = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    # rounding can leave tiny negatives or values just above 1
    return float(np.sqrt(min(max(jsd, 0.0), 1.0)))


def normalise(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return np.full(c.shape, 1.0 / c.size)
    return c / total


@dataclass
class Correlation:
    slope: float
    intercept: float
    r: float
    n: int


def jsd_correlation(runs: Sequence[tuple]) -> Correlation:
    """Regress distance-to-uniform of trigger distributions on that of
    training distributions. ``runs`` holds (train_dist, target_class_dist)."""
    if len(runs) < 3:
        raise ValueError("need at least 3 runs")
    xs, ys = [], []
    for train, target in runs:
        train, target = normalise(train), normalise(target)
        xs.append(js_distance(train, np.full(train.size, 1.0 / train.size)))
        ys.append(js_distance(target, np.full(target.size, 1.0 / target.size)))
    x, y = np.array(xs), np.array(ys)
    if np.ptp(x) == 0:
        raise ValueError("zero variance in training distances")
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(np.sum(xc * yc) / np.sum(xc * xc))
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    r = float(np.sum(xc * yc) / denom) if denom > 0 else 0.0
    return Correlation(slope, float(y.mean() - slope * x.mean()), r, len(x))


def baseline_random(student: StudentModel, pool: Dataset, n: int, threshold: float = 0.99,
                    seed: int = 0):
    """Query the student with ``n`` seeded random natural samples.

    Returns ``(transcript, effectiveness)``; effectiveness is None when n = 0.
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    transcript = AttackTranscript(n_classes=student.n_target_classes, reject_index=student.reject_index,
                                  confidence_threshold=threshold)
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(pool), size=n, replace=n > len(pool))
    for row in rows:
        x = pool.inputs[row]
        t0 = time.perf_counter()
        q = query_student(student, x)
        transcript.n_student_queries += 1
        wall = (time.perf_counter() - t0) * 1000.0
        probe = CraftedInput(int(pool.index[row]), x, np.zeros(0), [float("nan")], 0)
        transcript.records.append(AttackRecord(probe, q, (not q.rejected) and q.confidence >= threshold, wall))
    return transcript, (effectiveness(transcript, threshold) if n else None)


@dataclass
class MetricsReport:
    nabac: Optional[int]
    effectiveness: dict[float, float]
    class_histogram: dict[int, int]
    n_attempts: int
    n_classes: int
    js_distance_train: Optional[float] = None
    js_distance_targets: Optional[float] = None
    runtime: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effectiveness"] = {f"{k:g}": v for k, v in self.effectiveness.items()}
        d["class_histogram"] = {str(k): v for k, v in self.class_histogram.items()}
        d["eff95"] = self.effectiveness.get(0.95)
        d["eff99"] = self.effectiveness.get(0.99)
        return d


def build_report(transcript, n_classes: int, thresholds=(0.95, 0.99), nabac_threshold: float = 0.99,
                 train_counts=None, wall_ms: Optional[Sequence[float]] = None) -> MetricsReport:
    """All metrics of one exhaust-run transcript.

    ``train_counts`` (per-class training sizes) enables the two JS
    distances, both measured against the uniform distribution.
    """
    pred, conf, rej = _columns(transcript)
    eff = {float(t): effectiveness(transcript, t) for t in thresholds} if len(conf) else {}
    hist = class_histogram(transcript, nabac_threshold, n_classes)
    js_train = js_target = None
    if train_counts is not None:
        uniform = np.full(n_classes, 1.0 / n_classes)
        js_train = js_distance(normalise(train_counts), uniform)
        js_target = js_distance(normalise([hist.get(c, 0) for c in range(n_classes)]), uniform)
    runtime = {}
    if wall_ms is not None and len(wall_ms):
        runtime = {"wall_ms_total": float(np.sum(wall_ms)), "wall_ms_mean": float(np.mean(wall_ms))}
    return MetricsReport(nabac(transcript, n_classes, nabac_threshold), eff, hist, len(conf), n_classes,
                         js_train, js_target, runtime)

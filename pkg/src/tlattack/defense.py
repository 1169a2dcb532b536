"""Defenses on the activation vector: a max-activation threshold detector
and an extreme-value-machine (EVM) open-set classifier."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConvergenceError, DegenerateSampleError
from .netcore import Network, forward

REJECT = -1


def _activations(extractor: Network, inputs) -> np.ndarray:
    if isinstance(inputs, Dataset):
        inputs = inputs.inputs
    acts, _ = forward(extractor, np.asarray(inputs, dtype=np.float64))
    return acts.reshape(acts.shape[0], -1) if acts.ndim > 1 else acts


# -- threshold detector ----------------------------------------------------

@dataclass
class ThresholdDetector:
    threshold: float
    mean_max: float
    max_max: float
    safety_factor: float = 1.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")

    def to_json(self) -> str:
        return json.dumps({"kind": "threshold", **self.__dict__}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ThresholdDetector":
        d = json.loads(text)
        d.pop("kind", None)
        return cls(**d)


def fit_threshold(extractor: Network, train_data, safety_factor: float = 1.0) -> ThresholdDetector:
    """threshold = safety_factor * largest activation seen on ``train_data``."""
    acts = _activations(extractor, train_data)
    if acts.shape[0] == 0:
        raise ValueError("empty training data")
    maxima = acts.max(axis=1)
    return ThresholdDetector(safety_factor * float(maxima.max()), float(maxima.mean()),
                             float(maxima.max()), float(safety_factor))


def detect_activations(detector: ThresholdDetector, acts) -> np.ndarray:
    """Boolean flags; an activation exactly at the threshold is clean."""
    acts = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    return acts.max(axis=1) > detector.threshold


def detect(detector: ThresholdDetector, extractor: Network, x) -> str:
    """'flagged' iff the max activation coordinate exceeds the threshold."""
    acts, _ = forward(extractor, x)
    return "flagged" if bool(detect_activations(detector, acts.reshape(1, -1))[0]) else "clean"


# -- Weibull maximum likelihood -------------------------------------------

def weibull_fit(samples, tol: float = 1e-9, max_iter: int = 200, damping: float = 0.5):
    """Two-parameter Weibull MLE; returns (shape, scale).

    The shape solves 1/k = sum(x^k ln x) / sum(x^k) - mean(ln x); it is found
    by the damped fixed-point iteration k <- (1-d) k + d / (ratio(k) - mean ln x).
    The scale then follows in closed form, (mean x^k)^(1/k).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("samples must be positive and finite")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("all samples are equal")
    # scale-free: x^k is evaluated on x / max(x) to stay in (0, 1]
    top = x.max()
    ln_x = np.log(x / top)
    mean_ln = ln_x.mean()
    sd = ln_x.std()
    k = 1.2825 / sd if sd > 0 else 1.0  # moment estimate: sd(ln x) = pi / (sqrt(6) k)
    for _ in range(max_iter):
        w = np.exp(k * ln_x)
        ratio = np.sum(w * ln_x) / np.sum(w)
        k_new = (1.0 - damping) * k + damping / (ratio - mean_ln)
        if not np.isfinite(k_new) or k_new <= 0:
            raise ConvergenceError("shape iteration left the positive reals")
        if abs(k_new - k) <= tol * max(1.0, k):
            k = k_new
            break
        k = k_new
    else:
        raise ConvergenceError(f"shape did not converge in {max_iter} iterations")
    scale = top * np.mean(np.exp(k * ln_x)) ** (1.0 / k)
    return float(k), float(scale)


def inclusion_probability(distance, shape, scale):
    """Psi(d) = exp(-(d / scale) ** shape)."""
    d = np.asarray(distance, dtype=np.float64)
    # far points overflow the power to inf, giving the correct limit 0
    with np.errstate(over="ignore"):
        return np.exp(-np.power(d / scale, shape))


# -- EVM ---------------------------------------------------------------------

@dataclass
class ClassEVM:
    vectors: np.ndarray  # (n, M) extreme vectors
    shape: np.ndarray  # (n,)
    scale: np.ndarray  # (n,)


@dataclass
class EvmModel:
    classes: list[ClassEVM]
    tail_size: int = 10
    delta: float = 0.5
    class_names: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "kind": "evm", "tail_size": self.tail_size, "delta": self.delta,
            "class_names": self.class_names,
            "classes": [{"vectors": c.vectors.tolist(), "shape": c.shape.tolist(), "scale": c.scale.tolist()}
                        for c in self.classes],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvmModel":
        d = json.loads(text)
        classes = [ClassEVM(np.array(c["vectors"], dtype=np.float64), np.array(c["shape"]), np.array(c["scale"]))
                   for c in d["classes"]]
        return cls(classes, d["tail_size"], d["delta"], d["class_names"])


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def fit_evm(groups: Sequence[np.ndarray], tail_size: int = 10, coverage_threshold: Optional[float] = None,
            delta: float = 0.5, class_names=None) -> EvmModel:
    """Fit one Weibull per stored vector on half-distances to other classes.

    ``groups[c]`` is an (n_c, M) array of class-c activation vectors. With a
    ``coverage_threshold``, each class keeps only a greedy set cover of
    vectors whose inclusion reaches that threshold on all classmates.
    """
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]
    if len(groups) < 2:
        raise ValueError("EVM needs at least 2 classes")
    classes = []
    for c, own in enumerate(groups):
        if len(own) == 0:
            raise ValueError(f"class {c} has no vectors")
        others = np.concatenate([g for j, g in enumerate(groups) if j != c])
        if len(others) < tail_size:
            raise ValueError(f"class {c}: {len(others)} cross-class vectors, tail_size {tail_size}")
        dist = _pairwise(own, others)
        tail = np.sort(dist, axis=1)[:, :tail_size] / 2.0
        params = np.array([weibull_fit(row) for row in tail])
        model = ClassEVM(own.copy(), params[:, 0], params[:, 1])
        if coverage_threshold is not None:
            model = _reduce(model, coverage_threshold)
        classes.append(model)
    names = list(class_names) if class_names is not None else [str(c) for c in range(len(groups))]
    return EvmModel(classes, tail_size, delta, names)


def _reduce(model: ClassEVM, threshold: float) -> ClassEVM:
    d = _pairwise(model.vectors, model.vectors)
    covers = inclusion_probability(d, model.shape[:, None], model.scale[:, None]) >= threshold
    uncovered = np.ones(len(d), dtype=bool)
    keep = []
    while uncovered.any():
        gain = (covers & uncovered).sum(axis=1)
        j = int(np.argmax(gain))
        keep.append(j)
        uncovered &= ~covers[j]
    keep = sorted(keep)
    return ClassEVM(model.vectors[keep], model.shape[keep], model.scale[keep])


def evm_scores(model: EvmModel, acts) -> np.ndarray:
    """(n, n_classes) max inclusion probability per class."""
    acts = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    out = np.empty((acts.shape[0], len(model.classes)))
    for c, cm in enumerate(model.classes):
        psi = inclusion_probability(_pairwise(acts, cm.vectors), cm.shape[None, :], cm.scale[None, :])
        out[:, c] = psi.max(axis=1)
    return out


def evm_predict(model: EvmModel, acts, delta: Optional[float] = None) -> np.ndarray:
    """Class per row, REJECT where the best score is below ``delta``."""
    delta = model.delta if delta is None else delta
    scores = evm_scores(model, acts)
    best = scores.argmax(axis=1)
    return np.where(scores[np.arange(len(best)), best] >= delta, best, REJECT)


def evm_classify(model: EvmModel, extractor: Network, x, delta: Optional[float] = None) -> int:
    """Class index, or REJECT, for one input."""
    acts, _ = forward(extractor, x)
    return int(evm_predict(model, acts.reshape(1, -1), delta)[0])


def fit_evm_from_data(extractor: Network, data: Dataset, tail_size: int = 10,
                      coverage_threshold: Optional[float] = None, delta: float = 0.5) -> EvmModel:
    acts = _activations(extractor, data)
    groups = [acts[data.labels == c] for c in range(data.n_classes)]
    return fit_evm(groups, tail_size, coverage_threshold, delta, data.class_names)

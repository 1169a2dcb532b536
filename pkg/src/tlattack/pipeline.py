"""Teacher training, feature extraction and student re-training variants."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import NumericOverflowError, ShapeError, TrainingDivergedError
from .netcore import (AdamState, LayerSpec, Network, adam_step, backward_params, build_network,
                      cross_entropy, dense, flat_grads, flatten, forward, relu, softmax_head)
from .seeding import derive_seed


@dataclass
class TrainConfig:
    epochs: int = 30
    # 1e-3 leaves ~12% of extractor units dead on all data; 3e-4 about 8%
    lr: float = 3e-4
    batch_size: int = 32
    seed: int = 0
    holdout_fraction: float = 0.2


def default_arch(input_shape, n_classes: int, hidden: Sequence[int] = (512, 256)) -> list[LayerSpec]:
    """flatten -> (dense + relu) per hidden width -> dense -> softmax."""
    width = int(np.prod(input_shape))
    layers = [flatten()]
    for h in hidden:
        layers += [dense(width, h), relu()]
        width = h
    return layers + [dense(width, n_classes), softmax_head(n_classes)]


def fit(net: Network, x: np.ndarray, y: np.ndarray, epochs: int, lr: float, batch_size: int,
        seed: int, holdout: Optional[tuple[np.ndarray, np.ndarray]] = None,
        log: Optional[list] = None) -> Network:
    """Mini-batch Adam on mean cross-entropy, in place.

    Appends ``(epoch, mean_loss, holdout_acc)`` to ``log`` after each epoch
    (holdout_acc is NaN without a holdout set).
    """
    if len(y) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    params = net.parameter_arrays()
    state = AdamState(lr=lr)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            rows = order[start:start + batch_size]
            try:
                probs, trace = forward(net, x[rows])
                grads = backward_params(net, trace, y[rows])
            except NumericOverflowError as exc:
                raise TrainingDivergedError(f"training diverged at step {step}: {exc}", step) from exc
            loss = cross_entropy(probs, y[rows])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss is NaN at step {step}", step)
            total += loss * len(rows)
            adam_step(params, flat_grads(grads), state)
            step += 1
        if log is not None:
            acc = float("nan") if holdout is None else _argmax_accuracy(net, *holdout)
            log.append((epoch + 1, total / len(y), acc))
    return net


def _argmax_accuracy(net: Network, x, y) -> float:
    probs, _ = forward(net, x)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def train_teacher(teacher_set: Dataset, arch: Optional[list[LayerSpec]] = None,
                  config: TrainConfig = TrainConfig(), log: Optional[list] = None) -> Network:
    """Train the pre-trained (teacher) model on the source task.

    A seeded ``holdout_fraction`` of the set is kept out of training; its
    accuracy is stored in ``meta["holdout_accuracy"]``.
    """
    k = teacher_set.n_classes
    if arch is None:
        arch = default_arch(teacher_set.image_shape, k)
    if arch[-1].kind != "softmax_head" or arch[-1].n_classes != k:
        raise ShapeError(f"architecture head must be softmax_head({k})")
    net = build_network(arch, teacher_set.image_shape, derive_seed(config.seed, "teacher-init"))
    rng = np.random.default_rng(derive_seed(config.seed, "teacher-holdout"))
    order = rng.permutation(len(teacher_set))
    n_hold = int(round(config.holdout_fraction * len(order)))
    hold, train = order[:n_hold], order[n_hold:]
    x, y = teacher_set.inputs, teacher_set.labels
    holdout = (x[hold], y[hold]) if n_hold else None
    fit(net, x[train], y[train], config.epochs, config.lr, config.batch_size,
        derive_seed(config.seed, "teacher-batches"), holdout, log)
    net.meta = {
        "role": "teacher",
        "class_names": list(teacher_set.class_names),
        "holdout_accuracy": _argmax_accuracy(net, *holdout) if holdout else float("nan"),
    }
    return net


def final_dense_index(net: Network) -> int:
    idx = [i for i, s in enumerate(net.layers) if s.kind == "dense"]
    if not idx:
        raise ValueError("network has no dense layer")
    return idx[-1]


def make_extractor(teacher: Network, cut: Optional[int] = None) -> Network:
    """The transferred prefix ``teacher.layers[:cut]``, all layers frozen.

    ``cut`` defaults to the index of the final dense layer, so the output is
    the penultimate activation vector. Cuts past that layer are refused.
    """
    last = final_dense_index(teacher) if teacher.has_softmax_head else len(teacher.layers)
    if cut is None:
        cut = last
    if not 1 <= cut <= last:
        raise IndexError(f"cut {cut} outside [1, {last}]")
    layers = [replace(s, frozen=True) for s in teacher.layers[:cut]]
    params = [None if p is None else (p[0].copy(), p[1].copy()) for p in teacher.params[:cut]]
    meta = {"role": "extractor", "cut": cut}
    return Network(layers, params, teacher.input_shape, teacher.rng_seed, meta)


def activation_width(extractor: Network) -> int:
    shape = extractor.output_shape
    if len(shape) != 1:
        raise ShapeError(f"extractor output {shape} is not a vector")
    return shape[0]


@dataclass
class RetrainSpec:
    # layers with index >= tune_from_layer are trainable; None = extractor depth
    tune_from_layer: Optional[int] = None
    n_new_layers: int = 0
    new_layer_width: Optional[int] = None
    # None: no reject class; otherwise reject samples drawn from the pool
    reject_pool_size: Optional[int] = None
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class StudentModel:
    extractor: Network
    head: Network
    class_map: list[str]
    reject_index: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_outputs(self) -> int:
        return len(self.class_map)

    @property
    def n_target_classes(self) -> int:
        return self.n_outputs - (self.reject_index is not None)

    def network(self) -> Network:
        """Extractor and head composed into one network."""
        return _compose(self.extractor, self.head, self.meta_for_file())

    def meta_for_file(self) -> dict:
        return {**self.meta, "role": "student", "class_map": list(self.class_map),
                "reject_index": self.reject_index, "extractor_depth": len(self.extractor.layers)}

    def predict_proba(self, x) -> np.ndarray:
        probs, _ = forward(self.network(), x)
        return probs

    @classmethod
    def from_network(cls, net: Network) -> "StudentModel":
        meta = dict(net.meta)
        depth = meta.pop("extractor_depth")
        class_map = meta.pop("class_map")
        reject = meta.pop("reject_index")
        meta.pop("role", None)
        ext, head = _split(net, depth)
        return cls(ext, head, list(class_map), reject, meta)


def _compose(extractor: Network, head: Network, meta=None) -> Network:
    return Network(list(extractor.layers) + list(head.layers),
                   [None if p is None else (p[0].copy(), p[1].copy()) for p in extractor.params + head.params],
                   extractor.input_shape, extractor.rng_seed, dict(meta or {}))


def _split(net: Network, depth: int) -> tuple[Network, Network]:
    ext = Network(net.layers[:depth], [None if p is None else (p[0].copy(), p[1].copy()) for p in net.params[:depth]],
                  net.input_shape, net.rng_seed)
    width = ext.output_shape
    head = Network(net.layers[depth:], [None if p is None else (p[0].copy(), p[1].copy()) for p in net.params[depth:]],
                   width, net.rng_seed)
    return ext, head


def retrain(extractor: Network, student_train: Dataset, spec: RetrainSpec = RetrainSpec(),
            reject_pool: Optional[Dataset] = None, holdout: Optional[Dataset] = None,
            log: Optional[list] = None) -> StudentModel:
    """Build and train a student on top of a copy of ``extractor``."""
    if len(student_train) == 0:
        raise ValueError("empty student_train")
    depth = len(extractor.layers)
    tune_from = depth if spec.tune_from_layer is None else spec.tune_from_layer
    if not 0 <= tune_from <= depth:
        raise ValueError(f"tune_from_layer {tune_from} outside [0, {depth}]")
    if spec.n_new_layers < 0:
        raise ValueError("n_new_layers must be >= 0")
    with_reject = spec.reject_pool_size is not None
    if with_reject and reject_pool is None:
        raise ValueError("reject_pool_size set but no reject_pool given")

    m = activation_width(extractor)
    k = student_train.n_classes + with_reject
    width = spec.new_layer_width or m
    head_layers, w_in = [], m
    for _ in range(spec.n_new_layers):
        head_layers += [dense(w_in, width), relu()]
        w_in = width
    head_layers += [dense(w_in, k), softmax_head(k)]
    head = build_network(head_layers, (m,), derive_seed(spec.seed, "head-init"))

    x, y = student_train.inputs, student_train.labels
    class_map = list(student_train.class_names)
    if with_reject:
        n_rej = spec.reject_pool_size
        if n_rej > len(reject_pool):
            raise ValueError(f"reject pool has {len(reject_pool)} samples, {n_rej} requested")
        rng = np.random.default_rng(derive_seed(spec.seed, "reject-draw"))
        rows = np.sort(rng.choice(len(reject_pool), size=n_rej, replace=False))
        x = np.concatenate([x, reject_pool.inputs[rows]])
        y = np.concatenate([y, np.full(n_rej, k - 1, dtype=np.int64)])
        class_map.append("__reject__")

    hold = None
    if holdout is not None:
        hold = (holdout.inputs, holdout.labels)
    batch_seed = derive_seed(spec.seed, "head-batches")
    if tune_from == depth:
        # frozen extractor: train the head on precomputed activations
        feats, _ = forward(extractor, x)
        hold_feats = None if hold is None else (forward(extractor, hold[0])[0], hold[1])
        fit(head, feats, y, spec.epochs, spec.lr, spec.batch_size, batch_seed, hold_feats, log)
        ext = extractor.copy()
    else:
        net = _compose(extractor, head).with_frozen(tune_from)
        fit(net, x, y, spec.epochs, spec.lr, spec.batch_size, batch_seed, hold, log)
        ext, head = _split(net, depth)
        ext.layers = [replace(s, frozen=True) for s in ext.layers]
        head.layers = [replace(s, frozen=False) for s in head.layers]
    ext.meta = dict(extractor.meta)
    meta = {"tune_from_layer": tune_from, "n_new_layers": spec.n_new_layers,
            "reject_pool_size": spec.reject_pool_size}
    return StudentModel(ext, head, class_map, k - 1 if with_reject else None, meta)


def accuracy(model: Union[StudentModel, Network], dataset: Dataset) -> float:
    """Fraction of argmax-correct predictions.

    For a student, ``dataset`` must carry exactly the target classes (the
    reject class, if any, is never a ground-truth label here).
    """
    if isinstance(model, StudentModel):
        if list(dataset.class_names) != model.class_map[:model.n_target_classes]:
            raise ValueError("dataset classes do not match the model's class map")
        net = model.network()
    else:
        net = model
        if net.output_shape != (dataset.n_classes,):
            raise ValueError("dataset classes do not match the model outputs")
    if len(dataset) == 0:
        return float("nan")
    return _argmax_accuracy(net, dataset.inputs, dataset.labels)


def accuracy_with_reject(model: StudentModel, holdout: Dataset, reject_probe: Dataset) -> float:
    """Accuracy over target holdout plus reject-probe samples labelled reject."""
    if model.reject_index is None:
        raise ValueError("model has no reject class")
    if list(holdout.class_names) != model.class_map[:model.n_target_classes]:
        raise ValueError("dataset classes do not match the model's class map")
    x = np.concatenate([holdout.inputs, reject_probe.inputs])
    y = np.concatenate([holdout.labels, np.full(len(reject_probe), model.reject_index)])
    return _argmax_accuracy(model.network(), x, y)

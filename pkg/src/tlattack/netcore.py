"""Minimal differentiable feed-forward network on numpy float64 arrays.

Layers are described by :class:`LayerSpec`; a :class:`Network` holds the
specs, the parameters and the seed it was initialised with. ``forward``
records a :class:`ForwardTrace` that the two backward passes consume:
``backward_params`` (training, cross-entropy at the softmax head) and
``backward_input`` (the attack, arbitrary gradient at the traced output).

Every forward/backward op takes a leading batch axis. A single sample whose
shape equals ``net.input_shape`` is accepted too and the batch axis is
stripped again from the result.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModelFormatError, NumericOverflowError, ShapeError

LAYER_KINDS = ("dense", "relu", "conv_lite", "flatten", "softmax_head")

# added inside the log of cross-entropy; bounds the smallest reportable loss
CE_EPS = 1e-12

MAGIC = b"SSG1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_width: int = 0
    out_width: int = 0
    in_channels: int = 0
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    n_classes: int = 0
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv_lite" and self.stride != 1:
            raise ValueError("conv_lite supports stride 1 only")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv_lite")

    def param_shapes(self):
        if self.kind == "dense":
            return (self.in_width, self.out_width), (self.out_width,)
        if self.kind == "conv_lite":
            k = self.kernel
            return (self.channels, self.in_channels, k, k), (self.channels,)
        return None


def dense(in_width: int, out_width: int, frozen: bool = False) -> LayerSpec:
    return LayerSpec("dense", in_width=in_width, out_width=out_width, frozen=frozen)


def relu(frozen: bool = False) -> LayerSpec:
    return LayerSpec("relu", frozen=frozen)


def conv_lite(in_channels: int, channels: int, kernel: int, stride: int = 1,
              frozen: bool = False) -> LayerSpec:
    return LayerSpec("conv_lite", in_channels=in_channels, channels=channels,
                     kernel=kernel, stride=stride, frozen=frozen)


def flatten(frozen: bool = False) -> LayerSpec:
    return LayerSpec("flatten", frozen=frozen)


def softmax_head(n_classes: int) -> LayerSpec:
    return LayerSpec("softmax_head", n_classes=n_classes)


def infer_shapes(layers: Sequence[LayerSpec], input_shape) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises ShapeError on mismatch."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for idx, spec in enumerate(layers):
        if spec.kind == "dense":
            if shape != (spec.in_width,):
                raise ShapeError(f"layer {idx}: dense expects ({spec.in_width},), got {shape}")
            shape = (spec.out_width,)
        elif spec.kind == "conv_lite":
            if len(shape) == 2 and spec.in_channels == 1:
                h, w = shape
            elif len(shape) == 3 and shape[0] == spec.in_channels:
                _, h, w = shape
            else:
                raise ShapeError(f"layer {idx}: conv_lite expects {spec.in_channels} channels, got {shape}")
            if spec.kernel < 1 or spec.kernel > min(h, w):
                raise ShapeError(f"layer {idx}: kernel {spec.kernel} does not fit {shape}")
            shape = (spec.channels, h - spec.kernel + 1, w - spec.kernel + 1)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "softmax_head":
            if idx != len(layers) - 1:
                raise ShapeError("softmax_head may only be the final layer")
            if shape != (spec.n_classes,):
                raise ShapeError(f"layer {idx}: softmax_head expects ({spec.n_classes},), got {shape}")
        out.append(shape)
    return out


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[Optional[tuple[np.ndarray, np.ndarray]]]
    input_shape: tuple[int, ...]
    rng_seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        infer_shapes(self.layers, self.input_shape)
        if len(self.params) != len(self.layers):
            raise ShapeError("params must have one entry per layer")
        for idx, (spec, p) in enumerate(zip(self.layers, self.params)):
            shapes = spec.param_shapes()
            if shapes is None:
                if p is not None:
                    raise ShapeError(f"layer {idx} ({spec.kind}) takes no parameters")
                continue
            if p is None or p[0].shape != shapes[0] or p[1].shape != shapes[1]:
                raise ShapeError(f"layer {idx}: parameter shapes do not match {shapes}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return infer_shapes(self.layers, self.input_shape)[-1] if self.layers else self.input_shape

    @property
    def has_softmax_head(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == "softmax_head"

    def parameter_arrays(self) -> list[np.ndarray]:
        """Flat [W0, b0, W1, b1, ...] list, aliasing the live arrays."""
        return [a for p in self.params if p is not None for a in p]

    def frozen_mask(self) -> list[bool]:
        return [spec.frozen for spec, p in zip(self.layers, self.params) if p is not None for _ in p]

    def copy(self) -> "Network":
        return Network(list(self.layers),
                       [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params],
                       self.input_shape, self.rng_seed, copy.deepcopy(self.meta))

    def with_frozen(self, frozen_until: int) -> "Network":
        """Copy with layers ``< frozen_until`` frozen and the rest trainable."""
        net = self.copy()
        net.layers = [replace(s, frozen=i < frozen_until) for i, s in enumerate(net.layers)]
        return net


def build_network(layers: Sequence[LayerSpec], input_shape, seed: int) -> Network:
    """Create a network with seeded Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for spec in layers:
        shapes = spec.param_shapes()
        if shapes is None:
            params.append(None)
            continue
        if spec.kind == "dense":
            fan_in, fan_out = spec.in_width, spec.out_width
        else:
            area = spec.kernel * spec.kernel
            fan_in, fan_out = spec.in_channels * area, spec.channels * area
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append((rng.uniform(-limit, limit, size=shapes[0]), np.zeros(shapes[1])))
    return Network(list(layers), params, tuple(input_shape), int(seed))


@dataclass
class ForwardTrace:
    """Inputs and outputs of every executed layer for one batch."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    batched: bool = True

    def __len__(self):
        return len(self.inputs)

    @property
    def input(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite values in {what}")


def _conv_forward(x, w, b):
    k = w.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    return np.einsum("nchwij,ocij->nohw", windows, w, optimize=True) + b[None, :, None, None]


def _conv_backward(x, w, g, need_params):
    k = w.shape[-1]
    ho, wo = g.shape[2], g.shape[3]
    dw = db = None
    if need_params:
        windows = sliding_window_view(x, (k, k), axis=(2, 3))
        dw = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        db = g.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j])
    return dx, dw, db


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of empty logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(spec: LayerSpec, p, x):
    if spec.kind == "dense":
        return x @ p[0] + p[1]
    if spec.kind == "relu":
        return np.maximum(x, 0.0)
    if spec.kind == "conv_lite":
        if x.ndim == 3:
            x = x[:, None]
        return _conv_forward(x, p[0], p[1])
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    return softmax(x)


def forward(net: Network, x, upto: Optional[int] = None):
    """Run ``net.layers[:upto]`` (all layers by default) on ``x``.

    Returns ``(output, trace)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n_layers = len(net.layers)
    if upto is None:
        upto = n_layers
    if not 0 <= upto <= n_layers:
        raise IndexError(f"upto={upto} outside [0, {n_layers}]")
    batched = x.shape != net.input_shape
    if not batched:
        x = x[None]
    elif x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match {net.input_shape}")
    trace = ForwardTrace([], [], batched)
    h = x
    for spec, p in zip(net.layers[:upto], net.params[:upto]):
        trace.inputs.append(h)
        # overflow surfaces as NumericOverflowError just below
        with np.errstate(over="ignore", invalid="ignore"):
            h = _layer_forward(spec, p, h)
        _check_finite(h, f"{spec.kind} output")
        trace.outputs.append(h)
    out = h if batched else h[0]
    return out, trace


@dataclass
class ParamGrad:
    weight: np.ndarray
    bias: np.ndarray
    skip_update: bool = False


def _check_trace(net: Network, trace: ForwardTrace):
    if len(trace) > len(net.layers):
        raise ShapeError("trace is longer than the network")
    for idx in range(len(trace)):
        p = net.params[idx]
        if p is not None and net.layers[idx].kind == "dense":
            if trace.inputs[idx].shape[-1] != p[0].shape[0] or trace.outputs[idx].shape[-1] != p[0].shape[1]:
                raise ShapeError(f"trace does not belong to this network (layer {idx})")


def _backward(net: Network, trace: ForwardTrace, g: np.ndarray, stop: int, need_params: bool):
    grads: list[Optional[ParamGrad]] = [None] * len(net.layers)
    for idx in reversed(range(stop)):
        spec, p = net.layers[idx], net.params[idx]
        x, y = trace.inputs[idx], trace.outputs[idx]
        if spec.kind == "dense":
            if need_params:
                grads[idx] = ParamGrad(x.T @ g, g.sum(axis=0), spec.frozen)
            g = g @ p[0].T
        elif spec.kind == "relu":
            g = g * (x > 0)
        elif spec.kind == "flatten":
            g = g.reshape(x.shape)
        elif spec.kind == "softmax_head":
            g = y * (g - (g * y).sum(axis=-1, keepdims=True))
        else:
            xc = x[:, None] if x.ndim == 3 else x
            dx, dw, db = _conv_backward(xc, p[0], g, need_params)
            if need_params:
                grads[idx] = ParamGrad(dw, db, spec.frozen)
            g = dx.reshape(x.shape)
        _check_finite(g, f"gradient at layer {idx}")
    return grads, g


def cross_entropy(probs, label) -> float:
    """Mean of -ln(p[label] + CE_EPS) over the batch."""
    p = np.asarray(probs, dtype=np.float64)
    p2 = p[None] if p.ndim == 1 else p
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape[0] != p2.shape[0]:
        raise ShapeError("one label per probability row required")
    if np.any(labels < 0) or np.any(labels >= p2.shape[1]):
        raise IndexError("label out of range")
    picked = p2[np.arange(p2.shape[0]), labels.astype(np.int64)]
    return float(np.mean(-np.log(picked + CE_EPS)))


def backward_params(net: Network, trace: ForwardTrace, labels) -> list[Optional[ParamGrad]]:
    """Gradients of the mean cross-entropy w.r.t. every layer's parameters.

    The trace must come from a full forward pass ending in the softmax head.
    Frozen layers still get gradients, flagged ``skip_update``.
    """
    if not net.has_softmax_head or len(trace) != len(net.layers):
        raise ShapeError("backward_params needs a full trace through a softmax head")
    _check_trace(net, trace)
    probs = trace.output
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    n, k = probs.shape
    if labels.shape[0] != n:
        raise ShapeError("one label per sample required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError("label out of range")
    rows = np.arange(n)
    picked = probs[rows, labels]
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    # exact derivative of -ln(p_y + eps) w.r.t. logits
    g = (picked / (picked + CE_EPS))[:, None] * (probs - onehot) / n
    grads, _ = _backward(net, trace, g, len(net.layers) - 1, need_params=True)
    return grads


def backward_input(net: Network, trace: ForwardTrace, out_grad) -> np.ndarray:
    """Gradient w.r.t. the traced input given dL/d(traced output)."""
    _check_trace(net, trace)
    g = np.asarray(out_grad, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    if g.shape != trace.output.shape:
        raise ShapeError(f"out_grad shape {g.shape} does not match output {trace.output.shape}")
    _, gx = _backward(net, trace, g, len(trace), need_params=False)
    return gx if trace.batched else gx[0]


def flat_grads(grads: Sequence[Optional[ParamGrad]]) -> list[Optional[np.ndarray]]:
    """Flatten per-layer grads to line up with ``Network.parameter_arrays``.

    Entries flagged ``skip_update`` become None so the optimizer leaves them.
    """
    out = []
    for g in grads:
        if g is None:
            continue
        out.extend([None, None] if g.skip_update else [g.weight, g.bias])
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``None`` gradients mark parameters that must not move (frozen layers).
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


# -- serialization ---------------------------------------------------------

def _header(net: Network) -> bytes:
    doc = {
        "input_shape": list(net.input_shape),
        "layers": [asdict(s) for s in net.layers],
        "meta": net.meta,
        "rng_seed": int(net.rng_seed),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_model(net: Network) -> bytes:
    """SSG1 stream: magic, version, length-prefixed JSON header,
    little-endian float64 parameter blocks, CRC-32 of everything before it."""
    header = _header(net)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for p in net.params:
        if p is not None:
            parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in p)
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def load_model(data: bytes) -> Network:
    data = bytes(data)
    if len(data) < 12:
        raise ModelFormatError("truncated model stream")
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if 12 + header_len > len(data):
        raise ModelFormatError("truncated model header")
    try:
        doc = json.loads(data[12:12 + header_len])
        layers = [LayerSpec(**d) for d in doc["layers"]]
    except (ValueError, TypeError, KeyError) as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from exc
    offset = 12 + header_len
    blocks = []
    for spec in layers:
        shapes = spec.param_shapes()
        if shapes is None:
            blocks.append(None)
            continue
        pair = []
        for shape in shapes:
            nbytes = 8 * int(np.prod(shape))
            if offset + nbytes > len(data) - 4:
                raise ModelFormatError("truncated parameter block")
            pair.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset)
                        .astype(np.float64).reshape(shape))
            offset += nbytes
        blocks.append(tuple(pair))
    if offset + 4 != len(data):
        raise ModelFormatError("stream length does not match header")
    (crc,) = struct.unpack_from("<I", data, offset)
    if crc != zlib.crc32(data[:offset]):
        raise ModelFormatError("checksum mismatch")
    return Network(layers, blocks, tuple(doc["input_shape"]), int(doc["rng_seed"]), doc.get("meta", {}))

"""Fully-connected state classifier with hand-written forward/backward passes."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"KWSE"
CHECKPOINT_VERSION = 1
DEFAULT_LAYER_SIZES = (247, 52, 20)


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class DnnParams:
    layer_sizes: tuple
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        """Weights and biases interleaved, in checkpoint order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DnnParams":
        return DnnParams(
            tuple(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class DnnGrads:
    weights: list
    biases: list

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class DnnOutput:
    log_posteriors: np.ndarray


def count_params(layer_sizes) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_params(layer_sizes=DEFAULT_LAYER_SIZES, seed: int = 0) -> DnnParams:
    """Glorot-uniform weights, zero biases. Weight ``i`` has shape ``(n_i, n_{i+1})``."""
    layer_sizes = tuple(int(n) for n in layer_sizes)
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ShapeError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DnnParams(layer_sizes, weights, biases)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _as_matrix(params, feats):
    x = feats.frames if hasattr(feats, "frames") else feats
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            f"feature dim {x.shape[1]} does not match input layer {params.layer_sizes[0]}"
        )
    return x


def _activations(params, x):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(params: DnnParams, feats) -> DnnOutput:
    """Row-wise log-softmax of the network output (ReLU hidden layers)."""
    x = _as_matrix(params, feats)
    return DnnOutput(log_softmax(_activations(params, x)[-1]))


def backward(params: DnnParams, feats, grad_log_post) -> DnnGrads:
    """Gradient of a loss w.r.t. every weight and bias, given dL/d(log posteriors)."""
    x = _as_matrix(params, feats)
    acts = _activations(params, x)
    g = np.asarray(grad_log_post, dtype=np.float64)
    if g.shape != acts[-1].shape:
        raise ShapeError(f"gradient shape {g.shape} != output shape {acts[-1].shape}")
    probs = np.exp(log_softmax(acts[-1]))
    delta = g - probs * g.sum(axis=1, keepdims=True)
    gw, gb = [], []
    for i in range(len(params.weights) - 1, -1, -1):
        gw.append(acts[i].T @ delta)
        gb.append(delta.sum(axis=0))
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    return DnnGrads(gw[::-1], gb[::-1])


def save_checkpoint(params: DnnParams, path) -> None:
    sizes = params.layer_sizes
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(params.weights, params.biases):
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> DnnParams:
    """Read a checkpoint; values come back as float64 copies of the stored f32."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a KWSE checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    if len(raw) < offset + 4 * n_layers:
        raise CheckpointError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{n_layers}I", raw, offset)
    offset += 4 * n_layers
    if len(raw) != offset + 4 * count_params(sizes):
        raise CheckpointError(f"{path}: truncated or oversized parameter block")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(raw, "<f4", fan_in * fan_out, offset).reshape(fan_in, fan_out)
        offset += 4 * w.size
        b = np.frombuffer(raw, "<f4", fan_out, offset)
        offset += 4 * b.size
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return DnnParams(tuple(sizes), weights, biases)

"""Fully connected feature map with a manual tape-based forward/backward pass.

The network maps inputs of dimension layer_dims[0] to features of dimension
layer_dims[-1]; every layer is linear + activation. Backward propagates an
upstream gradient on the features down to gradients on all weights and
biases, which is all the closed-form training loops need: the last layer is
never part of this network.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, SnapshotError, StateError

ACTIVATIONS = ("relu", "tanh")
PARAMETERIZATIONS = ("standard", "ntk")

_SNAPSHOT_MAGIC = b"LLBB0001"


@dataclass
class MlpBackbone:
    layer_dims: list
    weights: list            # weights[l] has shape (layer_dims[l+1], layer_dims[l])
    biases: list             # biases[l] has shape (layer_dims[l+1],)
    activation: str = "relu"
    parameterization: str = "standard"

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def param_list(self) -> list:
        """Flat list of parameter arrays [W0, b0, W1, b1, ...]; views, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_list()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.param_list():
            p[...] = vec[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise DimensionError(f"flat vector has {vec.size} entries, expected {offset}")

    def copy(self) -> "MlpBackbone":
        return MlpBackbone(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            parameterization=self.parameterization,
        )


@dataclass
class ForwardTape:
    """Per-layer pre-activations and activations cached for one batch."""

    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)


@dataclass
class ParamGrads:
    weights: list
    biases: list

    def as_list(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_backbone(layer_dims, activation="relu", parameterization="standard", seed=0) -> MlpBackbone:
    """Seeded initialization.

    standard: W ~ N(0, 1/fan_in) (LeCun normal), biases zero.
    ntk: every weight and bias ~ N(0, 1); the 1/sqrt(fan_in) factor is applied
    at forward time instead of being baked into the draw.
    """
    if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
        raise ConfigurationError(f"layer_dims must list >= 2 positive sizes, got {layer_dims}")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    if parameterization not in PARAMETERIZATIONS:
        raise ConfigurationError(f"unknown parameterization {parameterization!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        if parameterization == "standard":
            weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        else:
            weights.append(rng.normal(0.0, 1.0, size=(fan_out, fan_in)))
            biases.append(rng.normal(0.0, 1.0, size=fan_out))
    return MlpBackbone(list(layer_dims), weights, biases, activation, parameterization)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        # subgradient at 0 taken as 0
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(bb: MlpBackbone, x: np.ndarray):
    """Run the network on a batch of column vectors.

    x has shape (input_dim, batch). Returns (features, tape) where features
    has shape (feature_dim, batch).
    """
    if x.ndim != 2 or x.shape[0] != bb.input_dim:
        raise DimensionError(f"forward: expected inputs of shape ({bb.input_dim}, B), got {x.shape}")
    tape = ForwardTape(inputs=x)
    current = x
    for layer, (w, b) in enumerate(zip(bb.weights, bb.biases)):
        if bb.parameterization == "ntk":
            pre = (w @ current) / np.sqrt(bb.layer_dims[layer]) + b[:, None]
        else:
            pre = w @ current + b[:, None]
        tape.pre_activations.append(pre)
        current = _act(bb.activation, pre)
        tape.activations.append(current)
    return current, tape


def backward(bb: MlpBackbone, tape: ForwardTape, grad_features: np.ndarray) -> ParamGrads:
    """Gradients of <grad_features, features> w.r.t. all weights and biases."""
    if len(tape.activations) != len(bb.weights):
        raise StateError("tape does not match this backbone (layer count differs)")
    if grad_features.shape != tape.activations[-1].shape:
        raise StateError(
            f"grad_features shape {grad_features.shape} does not match "
            f"features {tape.activations[-1].shape}"
        )
    grad_w = [None] * len(bb.weights)
    grad_b = [None] * len(bb.biases)
    delta = grad_features
    for layer in range(len(bb.weights) - 1, -1, -1):
        delta = delta * _act_grad(bb.activation, tape.pre_activations[layer])
        below = tape.inputs if layer == 0 else tape.activations[layer - 1]
        scale = 1.0
        if bb.parameterization == "ntk":
            scale = 1.0 / np.sqrt(bb.layer_dims[layer])
        grad_w[layer] = scale * (delta @ below.T)
        grad_b[layer] = delta.sum(axis=1)
        if layer > 0:
            delta = scale * (bb.weights[layer].T @ delta)
    return ParamGrads(grad_w, grad_b)


def apply_grads(bb: MlpBackbone, grads: ParamGrads, step: float) -> None:
    """In-place plain gradient step: params <- params - step * grads."""
    for w, gw in zip(bb.weights, grads.weights):
        w -= step * gw
    for b, gb in zip(bb.biases, grads.biases):
        b -= step * gb


def save_backbone(bb: MlpBackbone, path) -> None:
    """Flat binary record: magic, activation/parameterization bytes, dims, float64 LE params."""
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<BBH", ACTIVATIONS.index(bb.activation),
                             PARAMETERIZATIONS.index(bb.parameterization), 0))
        fh.write(struct.pack("<I", len(bb.layer_dims)))
        fh.write(struct.pack(f"<{len(bb.layer_dims)}I", *bb.layer_dims))
        for w, b in zip(bb.weights, bb.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_backbone(path) -> MlpBackbone:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic in backbone snapshot {path}")
    act_idx, par_idx, _ = struct.unpack_from("<BBH", blob, 8)
    try:
        activation = ACTIVATIONS[act_idx]
        parameterization = PARAMETERIZATIONS[par_idx]
    except IndexError as exc:
        raise SnapshotError(f"unknown activation/parameterization codes in {path}") from exc
    (n_dims,) = struct.unpack_from("<I", blob, 12)
    dims = list(struct.unpack_from(f"<{n_dims}I", blob, 16))
    offset = 16 + 4 * n_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n_w = fan_out * fan_in
        end = offset + 8 * (n_w + fan_out)
        if end > len(blob):
            raise SnapshotError(f"truncated backbone snapshot {path}")
        weights.append(np.frombuffer(blob, "<f8", n_w, offset).reshape(fan_out, fan_in).copy())
        biases.append(np.frombuffer(blob, "<f8", fan_out, offset + 8 * n_w).copy())
        offset = end
    if offset != len(blob):
        raise SnapshotError(f"trailing bytes in backbone snapshot {path}")
    return MlpBackbone(dims, weights, biases, activation, parameterization)

"""The linear last layer solved in closed form.

Two solution rules are provided: the ridge solution
    W = Y Phi^T (Phi Phi^T + beta I)^(-1)
for full-batch training, and the proximal solution
    W = (Y Phi^T + lam W_prev) (Phi Phi^T + lam I)^(-1)
which anchors each minibatch update to the previous weights. Both solve the
(d' x d') primal system; an optional bias is handled by appending a row of
ones to the features and a column to W, and the regularizer treats that
column like any other weight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, SnapshotError
from .linalg import solve_spd

INIT_POLICIES = ("zeros", "lecun", "xavier", "he")
REG_KINDS = ("ridge", "proximal")

_SNAPSHOT_MAGIC = b"LLHD0001"


@dataclass
class HeadState:
    weights: np.ndarray       # (o, d'); last column is the bias when has_bias
    has_bias: bool
    init_policy: str
    reg_kind: str             # "ridge" (beta) or "proximal" (lam)
    reg_value: float

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "HeadState":
        return HeadState(self.weights.copy(), self.has_bias, self.init_policy,
                         self.reg_kind, self.reg_value)


def augment_features(features: np.ndarray, has_bias: bool) -> np.ndarray:
    """Append a row of ones when has_bias is set; otherwise return the input."""
    if not has_bias:
        return features
    return np.vstack([features, np.ones((1, features.shape[1]))])


def ridge_solution(targets: np.ndarray, features: np.ndarray, beta: float) -> np.ndarray:
    """Minimizer of ||Y - W Phi||_F^2 + beta ||W||_F^2 over W."""
    if beta <= 0.0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    if targets.shape[1] != features.shape[1]:
        raise DimensionError(
            f"targets have {targets.shape[1]} columns but features have {features.shape[1]}")
    d = features.shape[0]
    gram = features @ features.T + beta * np.eye(d)
    return solve_spd(gram, features @ targets.T).T


def proximal_solution(targets: np.ndarray, features: np.ndarray,
                      prev_weights: np.ndarray, lam: float) -> np.ndarray:
    """Minimizer of ||Y - W Phi||_F^2 + lam ||W - W_prev||_F^2 over W."""
    if lam <= 0.0:
        raise ConfigurationError(f"lam must be > 0, got {lam}")
    if targets.shape[1] != features.shape[1]:
        raise DimensionError(
            f"targets have {targets.shape[1]} columns but features have {features.shape[1]}")
    if prev_weights.shape != (targets.shape[0], features.shape[0]):
        raise DimensionError(
            f"prev_weights shape {prev_weights.shape} does not match "
            f"(o={targets.shape[0]}, d'={features.shape[0]})")
    d = features.shape[0]
    gram = features @ features.T + lam * np.eye(d)
    rhs = features @ targets.T + lam * prev_weights.T
    return solve_spd(gram, rhs).T


def init_head(out_dim: int, feature_dim: int, policy: str, seed: int = 0,
              has_bias: bool = True, reg_kind: str = "ridge",
              reg_value: float = 1.0) -> HeadState:
    """Seeded last-layer initialization; the bias column is always zero.

    Variances: zeros -> 0, lecun -> 1/d, xavier -> 2/(d+o), he -> 2/d, with d
    the feature dimension (bias column excluded).
    """
    if policy not in INIT_POLICIES:
        raise ConfigurationError(f"unknown init policy {policy!r}")
    if reg_kind not in REG_KINDS:
        raise ConfigurationError(f"unknown reg kind {reg_kind!r}")
    if reg_value <= 0.0:
        raise ConfigurationError(f"regularization must be > 0, got {reg_value}")
    rng = np.random.default_rng(seed)
    if policy == "zeros":
        core = np.zeros((out_dim, feature_dim))
    elif policy == "lecun":
        core = rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(out_dim, feature_dim))
    elif policy == "xavier":
        core = rng.normal(0.0, np.sqrt(2.0 / (feature_dim + out_dim)), size=(out_dim, feature_dim))
    else:
        core = rng.normal(0.0, np.sqrt(2.0 / feature_dim), size=(out_dim, feature_dim))
    if has_bias:
        core = np.hstack([core, np.zeros((out_dim, 1))])
    return HeadState(core, has_bias, policy, reg_kind, reg_value)


def predict(head: HeadState, features: np.ndarray) -> np.ndarray:
    """W Phi (after bias augmentation); shape (o, batch)."""
    phi = augment_features(features, head.has_bias)
    if head.weights.shape[1] != phi.shape[0]:
        raise DimensionError(
            f"head expects {head.weights.shape[1]} feature rows, got {phi.shape[0]}")
    return head.weights @ phi


def predict_class(head: HeadState, features: np.ndarray) -> np.ndarray:
    """Per-column argmax of the outputs; ties go to the lowest index."""
    return np.argmax(predict(head, features), axis=0)


def save_head(head: HeadState, path) -> None:
    """Same flat binary record style as the backbone snapshot."""
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<BBBB", int(head.has_bias),
                             INIT_POLICIES.index(head.init_policy),
                             REG_KINDS.index(head.reg_kind), 0))
        fh.write(struct.pack("<d", head.reg_value))
        fh.write(struct.pack("<II", *head.weights.shape))
        fh.write(np.ascontiguousarray(head.weights, dtype="<f8").tobytes())


def load_head(path) -> HeadState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic in head snapshot {path}")
    has_bias, policy_idx, reg_idx, _ = struct.unpack_from("<BBBB", blob, 8)
    (reg_value,) = struct.unpack_from("<d", blob, 12)
    rows, cols = struct.unpack_from("<II", blob, 20)
    if len(blob) != 28 + 8 * rows * cols:
        raise SnapshotError(f"truncated head snapshot {path}")
    try:
        policy = INIT_POLICIES[policy_idx]
        reg_kind = REG_KINDS[reg_idx]
    except IndexError as exc:
        raise SnapshotError(f"unknown policy/reg codes in {path}") from exc
    weights = np.frombuffer(blob, "<f8", rows * cols, 28).reshape(rows, cols).copy()
    return HeadState(weights, bool(has_bias), policy, reg_kind, reg_value)

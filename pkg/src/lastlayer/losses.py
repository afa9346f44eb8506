"""Scalar objectives and their gradients in W and in the features.

Values are sums over the batch, not means, so the regularization
coefficients mean exactly what they mean in the closed-form solutions;
display-level normalization happens in the harness. Every gradient here is
checked against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .head import proximal_solution, ridge_solution


@dataclass
class LossReport:
    value: float
    grad_weights: np.ndarray = None
    grad_features: np.ndarray = None


def _check_shapes(weights, features, targets):
    if weights.shape != (targets.shape[0], features.shape[0]):
        raise DimensionError(
            f"weights {weights.shape} incompatible with targets {targets.shape} "
            f"and features {features.shape}")
    if features.shape[1] != targets.shape[1]:
        raise DimensionError(
            f"features have {features.shape[1]} columns, targets {targets.shape[1]}")


def ridge_loss(weights, features, targets, beta, want_grads=True) -> LossReport:
    """||Y - W Phi||_F^2 + beta ||W||_F^2 with gradients in W and Phi."""
    _check_shapes(weights, features, targets)
    residual = weights @ features - targets
    value = float(np.sum(residual * residual) + beta * np.sum(weights * weights))
    if not want_grads:
        return LossReport(value)
    grad_w = 2.0 * residual @ features.T + 2.0 * beta * weights
    grad_phi = 2.0 * weights.T @ residual
    return LossReport(value, grad_w, grad_phi)


def batch_loss(weights, features, targets, beta, want_grads=True) -> LossReport:
    """The same objective restricted to a batch's columns."""
    return ridge_loss(weights, features, targets, beta, want_grads)


def proximal_loss(weights, features, targets, prev_weights, lam, want_grads=True) -> LossReport:
    """||Y - W Phi||_F^2 + lam ||W - W_prev||_F^2."""
    _check_shapes(weights, features, targets)
    if prev_weights.shape != weights.shape:
        raise DimensionError(
            f"prev_weights {prev_weights.shape} does not match weights {weights.shape}")
    residual = weights @ features - targets
    drift = weights - prev_weights
    value = float(np.sum(residual * residual) + lam * np.sum(drift * drift))
    if not want_grads:
        return LossReport(value)
    grad_w = 2.0 * residual @ features.T + 2.0 * lam * drift
    grad_phi = 2.0 * weights.T @ residual
    return LossReport(value, grad_w, grad_phi)


def induced_loss(features, targets, beta) -> float:
    """The ridge objective with W substituted by its closed-form minimizer."""
    w_star = ridge_solution(targets, features, beta)
    return ridge_loss(w_star, features, targets, beta, want_grads=False).value


def induced_proximal_loss(features, targets, prev_weights, lam) -> float:
    """The proximal objective with W substituted by its closed-form minimizer."""
    w_star = proximal_solution(targets, features, prev_weights, lam)
    return proximal_loss(w_star, features, targets, prev_weights, lam, want_grads=False).value

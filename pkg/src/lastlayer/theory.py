"""Numerical verification of the properties the closed-form method rests on.

Four families of checks:

  * envelope gradients: the backbone gradient taken with the closed-form last
    layer held fixed equals the finite-difference gradient of the induced
    objective in which the last layer is re-solved at every evaluation;
  * the proximal update is exactly the MAP point estimate of a Gaussian
    random-walk model over the last layer (one-step Kalman view);
  * critical-point structure of the induced loss over features: the targets
    split into an attainable part (reachable through the current features)
    and a residual, and the gradient vanishes iff the two are orthogonal;
  * kernel gradient flow: integrating the feature-space ODE with an SPD
    kernel drives the residual to zero while the attainable gram spectrum
    grows monotonically.

All checks are report-only: they return measured errors, the caller decides
what to assert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import backbone as bk
from . import head as hd
from . import losses
from .errors import ConfigurationError, InstabilityError
from .linalg import frobenius_norm, solve_spd, sym_eigvals


# ---------------------------------------------------------------------------
# attainable/residual decomposition of the targets


@dataclass
class TargetDecomposition:
    attainable: np.ndarray   # (o, n) part of the targets reachable through the features
    residual: np.ndarray     # (o, n) the remainder; zero exactly at a global minimum
    projector: np.ndarray    # (n, n) Phi^T (Phi Phi^T + beta I)^(-1) Phi


def decompose_targets(targets, features, beta) -> TargetDecomposition:
    if beta <= 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    d = features.shape[0]
    gram = features @ features.T + beta * np.eye(d)
    projector = features.T @ solve_spd(gram, features)
    attainable = targets @ projector
    return TargetDecomposition(attainable, targets - attainable, projector)


def functional_gradient(targets, features, beta) -> np.ndarray:
    """Gradient of the induced loss with respect to the feature matrix itself.

    Closed form -2 (Phi Phi^T + beta I)^(-1) Phi Y^T Y_res, shape (d, n); this
    equals the envelope form 2 W*^T (W* Phi - Y) and is validated against
    entrywise finite differences. Replacing Y^T by the attainable part alone
    is only exact in the beta -> 0 limit, where the shrunk projector becomes
    an orthogonal one; the full-targets form is exact for every beta > 0.
    """
    if beta <= 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    dec = decompose_targets(targets, features, beta)
    d = features.shape[0]
    gram = features @ features.T + beta * np.eye(d)
    lifted = solve_spd(gram, features)   # (d, n)
    return -2.0 * lifted @ (targets.T @ dec.residual)


def is_critical(targets, features, beta, tol=1e-8) -> dict:
    """Criticality (attainable^T residual = 0) and global optimality (residual = 0)."""
    dec = decompose_targets(targets, features, beta)
    y_norm = frobenius_norm(targets)
    cross = frobenius_norm(dec.attainable.T @ dec.residual)
    critical = cross <= tol * (1.0 + y_norm * y_norm)
    is_global = critical and frobenius_norm(dec.residual) <= tol * (1.0 + y_norm)
    return {"critical": bool(critical), "is_global": bool(is_global),
            "cross_norm": float(cross), "residual_norm": float(frobenius_norm(dec.residual))}


# ---------------------------------------------------------------------------
# envelope gradient equivalence


def _relu_sign_pattern(tape):
    return [pre > 0.0 for pre in tape.pre_activations]


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_envelope_gradient(bb, data, mode, beta=None, lam=None, prev_weights=None,
                            has_bias=False, h_scale=1e-5,
                            inject_gradient_fault=0.0) -> dict:
    """Compare the fixed-last-layer backbone gradient against finite differences
    of the induced objective, re-solving the last layer inside every perturbed
    evaluation.

    For relu backbones, parameters whose perturbation flips an activation sign
    are excluded (finite differences straddling a kink measure the average of
    two one-sided slopes, not the gradient); the count is reported.
    `inject_gradient_fault` scales the analytic gradient and exists so that
    negative-control runs can prove the check has teeth.
    """
    if mode not in ("ridge", "proximal"):
        raise ConfigurationError(f"unknown envelope mode {mode!r}")
    if mode == "ridge" and (beta is None or beta <= 0):
        raise ConfigurationError("ridge mode needs beta > 0")
    if mode == "proximal" and (lam is None or lam <= 0 or prev_weights is None):
        raise ConfigurationError("proximal mode needs lam > 0 and prev_weights")
    x, y = data

    def solve_and_loss(tape_out=None):
        feats, tape = bk.forward(bb, x)
        phi = hd.augment_features(feats, has_bias)
        if mode == "ridge":
            w = hd.ridge_solution(y, phi, beta)
            rep = losses.ridge_loss(w, phi, y, beta)
        else:
            w = hd.proximal_solution(y, phi, prev_weights, lam)
            rep = losses.proximal_loss(w, phi, y, prev_weights, lam)
        if tape_out is not None:
            tape_out.append(tape)
        return rep, tape

    rep, tape = solve_and_loss()
    grad_feats = rep.grad_features[: bb.feature_dim] if has_bias else rep.grad_features
    analytic = np.concatenate(
        [g.ravel() for g in bk.backward(bb, tape, grad_feats).as_list()])
    if inject_gradient_fault:
        analytic = analytic * (1.0 + inject_gradient_fault)

    theta0 = bb.get_flat_params()
    numeric = np.zeros_like(theta0)
    skipped = np.zeros(theta0.size, dtype=bool)
    base_pattern = _relu_sign_pattern(tape) if bb.activation == "relu" else None
    for i in range(theta0.size):
        h = h_scale * (1.0 + abs(theta0[i]))
        vals = []
        patterns_ok = True
        for sign in (1.0, -1.0):
            theta = theta0.copy()
            theta[i] += sign * h
            bb.set_flat_params(theta)
            rep_i, tape_i = solve_and_loss()
            vals.append(rep_i.value)
            if base_pattern is not None and not _same_pattern(
                    base_pattern, _relu_sign_pattern(tape_i)):
                patterns_ok = False
        numeric[i] = (vals[0] - vals[1]) / (2.0 * h)
        skipped[i] = not patterns_ok
    bb.set_flat_params(theta0)

    keep = ~skipped
    scale = max(np.max(np.abs(analytic[keep]), initial=0.0),
                np.max(np.abs(numeric[keep]), initial=0.0), 1e-12)
    max_rel_err = float(np.max(np.abs(analytic[keep] - numeric[keep]), initial=0.0) / scale)
    return {"max_rel_err": max_rel_err, "n_params": int(theta0.size),
            "n_kink_skipped": int(skipped.sum()),
            "analytic": analytic, "numeric": numeric, "loss_value": rep.value}


# ---------------------------------------------------------------------------
# one-step Kalman / MAP equivalence


def check_kalman_equivalence(targets, features, prev_weights, sigma_y, sigma_w) -> dict:
    """The proximal solution with lam = sigma_y^2/sigma_w^2 must equal the MAP
    estimate of the Gaussian observation + random-walk model, found here by an
    independent iterative minimizer of the negative log posterior."""
    if sigma_y <= 0 or sigma_w <= 0:
        raise ConfigurationError("sigma_y and sigma_w must be > 0")
    lam = (sigma_y / sigma_w) ** 2
    prox = hd.proximal_solution(targets, features, prev_weights, lam)

    inv2y = 0.5 / sigma_y**2
    inv2w = 0.5 / sigma_w**2

    def neg_log_posterior(vec):
        w = vec.reshape(prev_weights.shape)
        resid = w @ features - targets
        drift = w - prev_weights
        value = inv2y * np.sum(resid * resid) + inv2w * np.sum(drift * drift)
        grad = 2.0 * inv2y * resid @ features.T + 2.0 * inv2w * drift
        return value, grad.ravel()

    res = optimize.minimize(neg_log_posterior, prev_weights.ravel(), jac=True,
                            method="L-BFGS-B",
                            options={"maxiter": 10000, "gtol": 1e-14, "ftol": 1e-18})
    map_est = res.x.reshape(prev_weights.shape)
    rel_err = frobenius_norm(prox - map_est) / max(frobenius_norm(prox), 1e-12)
    return {"lam": lam, "rel_err": float(rel_err), "proximal": prox, "map": map_est,
            "converged": bool(res.success)}


# ---------------------------------------------------------------------------
# kernel gradient flow


@dataclass
class FlowState:
    features: np.ndarray   # (d, n)
    kernel: np.ndarray     # (d, d), SPD; eigenvalues checked on construction
    beta: float
    t: float = 0.0

    def __post_init__(self):
        vals = sym_eigvals(self.kernel)
        if vals[0] <= 0:
            raise ConfigurationError(
                f"flow kernel must be positive definite (min eigenvalue {vals[0]:.3e})")
        if self.beta <= 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")


@dataclass
class FlowTrajectory:
    times: np.ndarray            # (k+1,)
    eigenvalues: np.ndarray      # (k+1, o) ascending spectra of the attainable gram
    residual_norms: np.ndarray   # (k+1,)
    induced_values: np.ndarray   # (k+1,)
    final_state: FlowState
    features: list = field(default_factory=list)   # per-step Phi when recorded


def default_flow_kernel(d, seed=0, jitter=0.1) -> np.ndarray:
    """SPD surrogate kernel M M^T / d + jitter I with Gaussian M."""
    m = np.random.default_rng(seed).standard_normal((d, d))
    return m @ m.T / d + jitter * np.eye(d)


def _flow_rhs(phi, targets, kernel, beta):
    # minus the kernel-weighted feature-space gradient; with the exact
    # gradient the induced loss is non-increasing along the flow by
    # construction
    d = phi.shape[0]
    gram = phi @ phi.T + beta * np.eye(d)
    lifted = solve_spd(gram, phi)
    attainable = targets @ (phi.T @ lifted)
    residual = targets - attainable
    return 2.0 * kernel @ (lifted @ (targets.T @ residual))


def _flow_observables(phi, targets, beta):
    dec = decompose_targets(targets, phi, beta)
    gram_eigs = sym_eigvals(dec.attainable @ dec.attainable.T)
    return gram_eigs, frobenius_norm(dec.residual), losses.induced_loss(phi, targets, beta)


def integrate_flow(fs: FlowState, targets, dt, steps, stop_residual_ratio=None,
                   record_features=False) -> FlowTrajectory:
    """Explicit RK4 integration of d(Phi)/dt = -Kernel * feature-space gradient.

    Records the attainable-gram spectrum, residual norm and induced loss at
    every step. Raises InstabilityError if the feature norm grows by more
    than 1e6x (or goes non-finite); retry with a smaller dt.
    """
    if dt <= 0 or steps < 0:
        raise ConfigurationError(f"need dt > 0 and steps >= 0, got dt={dt} steps={steps}")
    phi = fs.features.copy()
    norm0 = max(frobenius_norm(phi), 1e-12)
    target_norm = frobenius_norm(targets)
    times = [fs.t]
    eigs, res, ind = _flow_observables(phi, targets, fs.beta)
    eig_rows, res_norms, induced = [eigs], [res], [ind]
    feats = [phi.copy()] if record_features else []
    t = fs.t
    for _ in range(steps):
        k1 = _flow_rhs(phi, targets, fs.kernel, fs.beta)
        k2 = _flow_rhs(phi + 0.5 * dt * k1, targets, fs.kernel, fs.beta)
        k3 = _flow_rhs(phi + 0.5 * dt * k2, targets, fs.kernel, fs.beta)
        k4 = _flow_rhs(phi + dt * k3, targets, fs.kernel, fs.beta)
        phi = phi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += dt
        norm = frobenius_norm(phi)
        if not np.isfinite(norm) or norm > 1e6 * norm0:
            raise InstabilityError(
                f"flow blew up at t={t:.4g} (|Phi| grew {norm / norm0:.2e}x); reduce dt")
        eigs, res, ind = _flow_observables(phi, targets, fs.beta)
        times.append(t)
        eig_rows.append(eigs)
        res_norms.append(res)
        induced.append(ind)
        if record_features:
            feats.append(phi.copy())
        if stop_residual_ratio is not None and res <= stop_residual_ratio * target_norm:
            break
    final = FlowState(phi, fs.kernel, fs.beta, t)
    return FlowTrajectory(np.array(times), np.array(eig_rows), np.array(res_norms),
                          np.array(induced), final, feats)


def check_eig_monotone(trajectory: FlowTrajectory) -> dict:
    """Sorted attainable-gram eigenvalues must be non-decreasing step to step,
    up to an integration slack of 1e-6 * (1 + eig)."""
    eigs = trajectory.eigenvalues
    max_violation = 0.0
    n_violations = 0
    for prev, nxt in zip(eigs[:-1], eigs[1:]):
        slack = 1e-6 * (1.0 + prev)
        gap = prev - slack - nxt
        worst = float(np.max(gap))
        if worst > 0.0:
            n_violations += int(np.sum(gap > 0.0))
            max_violation = max(max_violation, worst)
    return {"max_violation": max_violation, "n_violations": n_violations,
            "n_steps": int(eigs.shape[0] - 1)}


def attainable_gram_rate(targets, features, kernel, beta) -> np.ndarray:
    """Closed-form time derivative of the attainable gram matrix along the flow:
    2(AB + BA) with A the residual gram and B the kernel-weighted attainable gram."""
    dec = decompose_targets(targets, features, beta)
    d = features.shape[0]
    gram = features @ features.T + beta * np.eye(d)
    lifted = solve_spd(gram, features)             # (d, n)
    mid = lifted.T @ kernel @ lifted               # (n, n)
    b_mat = dec.attainable @ mid @ dec.attainable.T
    a_mat = dec.residual @ dec.residual.T
    return 2.0 * (a_mat @ b_mat + b_mat @ a_mat)


def write_trajectory_csv(trajectory: FlowTrajectory, path) -> None:
    """Columns: t, eig0..eig{o-1} (ascending), residual_norm, induced_loss."""
    o = trajectory.eigenvalues.shape[1]
    header = ["t"] + [f"eig{i}" for i in range(o)] + ["residual_norm", "induced_loss"]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(trajectory.times.size):
            row = [trajectory.times[i], *trajectory.eigenvalues[i],
                   trajectory.residual_norms[i], trajectory.induced_values[i]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

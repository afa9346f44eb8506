"""Training loops.

Five methods are supported:

  joint_sgd_l2                  -- gradient steps on both W and theta for the
                                   L2-regularized squared batch loss
  closed_form_ridge             -- per-batch ridge solution for W, then a
                                   gradient step on theta with that W fixed
                                   (full-batch when batch_size covers the data)
  closed_form_proximal_simple   -- theta step with the previous W, then the
                                   proximal W solution on the same batch at
                                   the new theta (backbone updated first)
  closed_form_proximal_lookahead-- W is pre-fit on the first batch and then
                                   always refreshed from the *next* batch, so
                                   the last layer is up to date at every step
  joint_sgd_xent                -- softmax cross-entropy baseline, SGD on all
                                   parameters

The theta updates go through SGD (optionally Nesterov momentum) or Adam.
Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bk
from . import head as hd
from . import losses
from .datasets import TaskData
from .errors import ConfigurationError, DivergenceError
from .records import RunRecord

METHODS = ("joint_sgd_l2", "closed_form_ridge", "closed_form_proximal_simple",
           "closed_form_proximal_lookahead", "joint_sgd_xent")
CLOSED_FORM_METHODS = ("closed_form_ridge", "closed_form_proximal_simple",
                       "closed_form_proximal_lookahead")


@dataclass
class TrainConfig:
    method: str = "closed_form_proximal_simple"
    epochs: int = 10
    batch_size: int = 0            # 0 = full batch
    learning_rate: float = 0.1
    beta: float = None             # ridge / L2 coefficient
    lam: float = None              # proximal coefficient
    momentum: float = 0.0
    optimizer: str = "sgd"         # "sgd" or "adam"
    seed: int = 0
    hidden_dims: tuple = (32, 32)
    activation: str = "relu"
    parameterization: str = "standard"
    has_bias: bool = True
    init_policy: str = None        # None -> zeros for closed-form, lecun otherwise
    max_iters: int = None          # optional hard cap on iterations

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.method in ("joint_sgd_l2", "closed_form_ridge"):
            if self.beta is None or self.beta <= 0 or self.lam is not None:
                raise ConfigurationError(f"{self.method} needs beta > 0 (and no lam)")
        elif self.method in ("closed_form_proximal_simple", "closed_form_proximal_lookahead"):
            if self.lam is None or self.lam <= 0 or self.beta is not None:
                raise ConfigurationError(f"{self.method} needs lam > 0 (and no beta)")
        policy = self.init_policy
        if policy is None:
            policy = "zeros" if self.method in CLOSED_FORM_METHODS else "lecun"
        return replace(self, init_policy=policy)


# ---------------------------------------------------------------------------
# parameter steppers


@dataclass
class AdamState:
    first: list
    second: list
    count: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on params."""
    if state is None:
        state = AdamState([np.zeros_like(p) for p in params],
                          [np.zeros_like(p) for p in params])
    state.count += 1
    c1 = 1.0 - beta1 ** state.count
    c2 = 1.0 - beta2 ** state.count
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class SgdStepper:
    """SGD with optional Nesterov momentum: v <- gamma*v + g; p <- p - lr*(gamma*v + g)."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocities = None

    def step(self, params, grads):
        if self.momentum == 0.0:
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if self.velocities is None:
            self.velocities = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocities):
            v[...] = self.momentum * v + g
            p -= self.lr * (self.momentum * v + g)


class AdamStepper:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = None

    def step(self, params, grads):
        self.state = adam_step(params, grads, self.state, self.lr,
                               self.beta1, self.beta2, self.eps)


def make_stepper(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return AdamStepper(cfg.learning_rate)
    return SgdStepper(cfg.learning_rate, cfg.momentum)


# ---------------------------------------------------------------------------
# single training steps


def _check_finite(value, context):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss in {context}",
                              {"context": context, "loss": float(value)})


def _theta_step(bb, tape, grad_features_aug, has_bias, stepper):
    gf = grad_features_aug[: bb.feature_dim] if has_bias else grad_features_aug
    grads = bk.backward(bb, tape, gf)
    stepper.step(bb.param_list(), grads.as_list())


def softmax_xent(weights, features, onehot):
    """Summed cross-entropy of softmax(W Phi) against one-hot targets, with grads."""
    logits = weights @ features
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=0, keepdims=True)
    value = float(-np.sum(onehot * (shifted - np.log(exp.sum(axis=0, keepdims=True)))))
    dlogits = probs - onehot
    return losses.LossReport(value, dlogits @ features.T, weights.T @ dlogits)


def step_joint_sgd(bb, head, batch, beta, theta_stepper, head_stepper, xent=False):
    """Simultaneous gradient steps on W and theta for the batch loss."""
    x, y = batch
    feats, tape = bk.forward(bb, x)
    phi = hd.augment_features(feats, head.has_bias)
    if xent:
        rep = softmax_xent(head.weights, phi, y)
    else:
        rep = losses.batch_loss(head.weights, phi, y, beta)
    _check_finite(rep.value, "step_joint_sgd")
    _theta_step(bb, tape, rep.grad_features, head.has_bias, theta_stepper)
    head_stepper.step([head.weights], [rep.grad_weights])
    return rep.value


def step_naive_batch_ridge(bb, head, batch, beta, theta_stepper):
    """Ridge-solve W on the batch alone, then step theta with the new W fixed."""
    x, y = batch
    feats, tape = bk.forward(bb, x)
    phi = hd.augment_features(feats, head.has_bias)
    head.weights = hd.ridge_solution(y, phi, beta)
    rep = losses.batch_loss(head.weights, phi, y, beta)
    _check_finite(rep.value, "step_naive_batch_ridge")
    _theta_step(bb, tape, rep.grad_features, head.has_bias, theta_stepper)
    return rep.value


def step_full_batch_closed_form(bb, head, full_data, beta, theta_stepper):
    """The ridge-closed-form step on the entire dataset (same rule, all columns)."""
    return step_naive_batch_ridge(bb, head, full_data, beta, theta_stepper)


def step_proximal_simple(bb, head, batch, lam, theta_stepper):
    """Backbone first on the current batch, then the proximal W on the same batch."""
    x, y = batch
    feats, tape = bk.forward(bb, x)
    phi = hd.augment_features(feats, head.has_bias)
    rep = losses.batch_loss(head.weights, phi, y, 0.0)  # beta term is constant in theta
    _check_finite(rep.value, "step_proximal_simple")
    _theta_step(bb, tape, rep.grad_features, head.has_bias, theta_stepper)
    feats_new, _ = bk.forward(bb, x)
    phi_new = hd.augment_features(feats_new, head.has_bias)
    head.weights = hd.proximal_solution(y, phi_new, head.weights, lam)
    return rep.value


def prefit_proximal_head(bb, head, batch, lam):
    """Fit the last layer on a batch before the lookahead loop starts."""
    x, y = batch
    feats, _ = bk.forward(bb, x)
    phi = hd.augment_features(feats, head.has_bias)
    head.weights = hd.proximal_solution(y, phi, head.weights, lam)


def step_proximal_lookahead(bb, head, batch, next_batch, lam, theta_stepper):
    """Theta on the current batch with the already-updated W, then W on the next batch."""
    x, y = batch
    feats, tape = bk.forward(bb, x)
    phi = hd.augment_features(feats, head.has_bias)
    rep = losses.batch_loss(head.weights, phi, y, 0.0)
    _check_finite(rep.value, "step_proximal_lookahead")
    _theta_step(bb, tape, rep.grad_features, head.has_bias, theta_stepper)
    if next_batch is not None:
        x2, y2 = next_batch
        feats2, _ = bk.forward(bb, x2)
        phi2 = hd.augment_features(feats2, head.has_bias)
        head.weights = hd.proximal_solution(y2, phi2, head.weights, lam)
    return rep.value


# ---------------------------------------------------------------------------
# run driver


@dataclass
class RunResult:
    records: list
    backbone: object
    head: object
    config: TrainConfig
    wall_ms_total: float = 0.0
    diverged: bool = False
    diagnostic: dict = field(default_factory=dict)


def batch_index_plan(n, batch_size, epochs, rng) -> list:
    """Seeded epoch shuffles chunked into batches; a short trailing batch is kept."""
    if batch_size in (0, None) or batch_size >= n:
        return [np.arange(n) for _ in range(epochs)]
    plan = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        plan.extend(perm[i: i + batch_size] for i in range(0, n, batch_size))
    return plan


def evaluate(bb, head, dataset, kind) -> float:
    """Mean per-sample squared error, or accuracy for classification."""
    feats, _ = bk.forward(bb, dataset.inputs)
    if kind == "classification":
        pred = hd.predict_class(head, feats)
        truth = np.argmax(dataset.targets, axis=0)
        return float(np.mean(pred == truth))
    resid = hd.predict(head, feats) - dataset.targets
    return float(np.sum(resid * resid) / dataset.n)


def train(task: TaskData, cfg: TrainConfig) -> RunResult:
    """Run one training configuration to completion, recording one row per iteration."""
    cfg = cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    bb = bk.init_backbone([task.train.inputs.shape[0], *cfg.hidden_dims],
                          cfg.activation, cfg.parameterization,
                          seed=seeds[0])
    out_dim = task.train.targets.shape[0]
    reg_kind = "proximal" if "proximal" in cfg.method else "ridge"
    reg_value = cfg.lam if reg_kind == "proximal" else (cfg.beta or 1.0)
    head = hd.init_head(out_dim, bb.feature_dim, cfg.init_policy, seed=seeds[1],
                        has_bias=cfg.has_bias, reg_kind=reg_kind, reg_value=reg_value)
    shuffle_rng = np.random.default_rng(seeds[2])
    batches = batch_index_plan(task.train.n, cfg.batch_size, cfg.epochs, shuffle_rng)
    if cfg.max_iters is not None:
        while len(batches) < cfg.max_iters:
            batches.extend(batch_index_plan(task.train.n, cfg.batch_size, 1, shuffle_rng))
        batches = batches[: cfg.max_iters]

    theta_stepper = make_stepper(cfg)
    head_stepper = make_stepper(cfg)  # only used by the joint methods
    x_all, y_all = task.train.inputs, task.train.targets
    eval_split = task.val if task.val.n > 0 else task.test

    def take(idx):
        return x_all[:, idx], y_all[:, idx]

    records = []
    prev_w = head.weights.copy()
    started = time.perf_counter()
    status_exc = None
    # overflow is not an accident here: it is detected and raised as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            if cfg.method == "closed_form_proximal_lookahead" and batches:
                prefit_proximal_head(bb, head, take(batches[0]), cfg.lam)
                prev_w = head.weights.copy()
            for t, idx in enumerate(batches):
                batch = take(idx)
                if cfg.method == "joint_sgd_l2":
                    step_joint_sgd(bb, head, batch, cfg.beta, theta_stepper, head_stepper)
                elif cfg.method == "joint_sgd_xent":
                    step_joint_sgd(bb, head, batch, 0.0, theta_stepper, head_stepper,
                                   xent=True)
                elif cfg.method == "closed_form_ridge":
                    step_naive_batch_ridge(bb, head, batch, cfg.beta, theta_stepper)
                elif cfg.method == "closed_form_proximal_simple":
                    step_proximal_simple(bb, head, batch, cfg.lam, theta_stepper)
                else:
                    nxt = take(batches[t + 1]) if t + 1 < len(batches) else None
                    step_proximal_lookahead(bb, head, batch, nxt, cfg.lam, theta_stepper)

                w_delta = float(np.linalg.norm(head.weights - prev_w))
                prev_w = head.weights.copy()
                train_metric = _train_metric(bb, head, task, cfg)
                eval_metric = evaluate(bb, head, eval_split, task.kind)
                _check_finite(train_metric, "train metric")
                records.append(RunRecord(t + 1, train_metric, eval_metric, w_delta,
                                         (time.perf_counter() - started) * 1e3))
        except DivergenceError as exc:
            exc.record.setdefault("iteration", len(records) + 1)
            exc.record["config"] = cfg.__dict__ | {"hidden_dims": list(cfg.hidden_dims)}
            status_exc = exc
    wall = (time.perf_counter() - started) * 1e3
    result = RunResult(records, bb, head, cfg, wall,
                       diverged=status_exc is not None,
                       diagnostic=status_exc.record if status_exc else {})
    if status_exc is not None:
        status_exc.result = result
        raise status_exc
    return result


def _train_metric(bb, head, task, cfg):
    if cfg.method == "joint_sgd_xent":
        feats, _ = bk.forward(bb, task.train.inputs)
        phi = hd.augment_features(feats, head.has_bias)
        return softmax_xent(head.weights, phi, task.train.targets).value / task.train.n
    feats, _ = bk.forward(bb, task.train.inputs)
    resid = hd.predict(head, feats) - task.train.targets
    return float(np.sum(resid * resid) / task.train.n)

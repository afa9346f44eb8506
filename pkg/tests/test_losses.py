import numpy as np
import pytest

from lastlayer import head as hd
from lastlayer import losses
from lastlayer.errors import DimensionError


def fd_loss_grad(fun, arg, h=1e-6):
    """Central finite differences of a scalar-valued function of one matrix."""
    out = np.zeros_like(arg)
    for idx in np.ndindex(arg.shape):
        step = h * (1.0 + abs(arg[idx]))
        plus = arg.copy()
        plus[idx] += step
        minus = arg.copy()
        minus[idx] -= step
        out[idx] = (fun(plus) - fun(minus)) / (2.0 * step)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def test_ridge_loss_zero_weights():
    rng = np.random.default_rng(0)
    targets = rng.standard_normal((3, 7))
    phi = rng.standard_normal((4, 7))
    rep = losses.ridge_loss(np.zeros((3, 4)), phi, targets, 0.5)
    assert np.isclose(rep.value, np.sum(targets ** 2))


def test_ridge_loss_scalar_hand_case():
    # (2 - 1)^2 + 1 * 1^2 = 2
    rep = losses.ridge_loss(np.array([[1.0]]), np.array([[1.0]]), np.array([[2.0]]), 1.0)
    assert np.isclose(rep.value, 2.0)


def test_ridge_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        losses.ridge_loss(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros((2, 5)), 1.0)


def test_ridge_loss_grads_match_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 4))
    phi = rng.standard_normal((4, 9))
    targets = rng.standard_normal((2, 9))
    rep = losses.ridge_loss(w, phi, targets, 0.3)
    fd_w = fd_loss_grad(lambda m: losses.ridge_loss(m, phi, targets, 0.3).value, w)
    assert rel_err(rep.grad_weights, fd_w) <= 1e-6
    fd_phi = fd_loss_grad(lambda m: losses.ridge_loss(w, m, targets, 0.3).value, phi)
    assert rel_err(rep.grad_features, fd_phi) <= 1e-5


def test_batch_loss_matches_ridge_on_batch_columns():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 3))
    phi = rng.standard_normal((3, 10))
    targets = rng.standard_normal((2, 10))
    cols = [1, 4, 7]
    a = losses.batch_loss(w, phi[:, cols], targets[:, cols], 0.2)
    b = losses.ridge_loss(w, phi[:, cols], targets[:, cols], 0.2)
    assert a.value == b.value


def test_batch_loss_scalar_hand_case():
    rep = losses.batch_loss(np.array([[0.5]]), np.array([[2.0]]), np.array([[3.0]]), 2.0)
    # (3 - 1)^2 + 2 * 0.25 = 4.5
    assert np.isclose(rep.value, 4.5)


def test_proximal_loss_zero_at_joint_fit():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((2, 3))
    phi = rng.standard_normal((3, 6))
    rep = losses.proximal_loss(w, phi, w @ phi, w, 1.7)
    assert np.isclose(rep.value, 0.0)


def test_proximal_loss_scalar_hand_case():
    # (2 - 1*1)^2 + 3 * (1 - 0.5)^2 = 1 + 0.75
    rep = losses.proximal_loss(np.array([[1.0]]), np.array([[1.0]]),
                               np.array([[2.0]]), np.array([[0.5]]), 3.0)
    assert np.isclose(rep.value, 1.75)


def test_proximal_loss_grads_match_finite_differences():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((2, 4))
    phi = rng.standard_normal((4, 8))
    targets = rng.standard_normal((2, 8))
    prev = rng.standard_normal((2, 4))
    rep = losses.proximal_loss(w, phi, targets, prev, 0.9)
    fd_w = fd_loss_grad(lambda m: losses.proximal_loss(m, phi, targets, prev, 0.9).value, w)
    assert rel_err(rep.grad_weights, fd_w) <= 1e-6
    fd_phi = fd_loss_grad(lambda m: losses.proximal_loss(w, m, targets, prev, 0.9).value, phi)
    assert rel_err(rep.grad_features, fd_phi) <= 1e-5


def test_induced_loss_zero_targets():
    phi = np.random.default_rng(5).standard_normal((3, 6))
    assert np.isclose(losses.induced_loss(phi, np.zeros((2, 6)), 0.5), 0.0)


def test_induced_loss_zero_features():
    targets = np.random.default_rng(6).standard_normal((2, 6))
    assert np.isclose(losses.induced_loss(np.zeros((3, 6)), targets, 0.5),
                      np.sum(targets ** 2))


def test_induced_loss_dominated_by_any_weights():
    rng = np.random.default_rng(7)
    phi = rng.standard_normal((3, 8))
    targets = rng.standard_normal((2, 8))
    beta = 0.6
    star = losses.induced_loss(phi, targets, beta)
    for _ in range(100):
        w = rng.standard_normal((2, 3))
        assert star <= losses.ridge_loss(w, phi, targets, beta).value + 1e-12


def test_induced_loss_monotone_in_beta():
    rng = np.random.default_rng(8)
    phi = rng.standard_normal((3, 8))
    targets = rng.standard_normal((2, 8))
    grid = [0.01, 0.1, 0.5, 1.0, 5.0, 25.0]
    vals = [losses.induced_loss(phi, targets, b) for b in grid]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_induced_proximal_loss_minimizer_consistency():
    rng = np.random.default_rng(9)
    phi = rng.standard_normal((3, 8))
    targets = rng.standard_normal((2, 8))
    prev = rng.standard_normal((2, 3))
    star = losses.induced_proximal_loss(phi, targets, prev, 1.2)
    w = hd.proximal_solution(targets, phi, prev, 1.2)
    assert np.isclose(star, losses.proximal_loss(w, phi, targets, prev, 1.2).value)

import numpy as np
import pytest

from lastlayer import backbone as bk
from lastlayer import head as hd
from lastlayer import losses, theory
from lastlayer.errors import ConfigurationError, InstabilityError


def rowspace_projector_svd(features):
    """Exact orthogonal projector onto the row space, via a rank-revealing SVD."""
    u, s, vt = np.linalg.svd(features, full_matrices=False)
    rank = int(np.sum(s > s.max(initial=0.0) * max(features.shape) * np.finfo(float).eps))
    v = vt[:rank]
    return v.T @ v


# ---------------------------------------------------------------------------
# decomposition


def test_decompose_zero_features():
    targets = np.array([[1.0, -2.0], [0.5, 3.0]])
    dec = theory.decompose_targets(targets, np.zeros((3, 2)), 1.0)
    assert np.allclose(dec.attainable, 0.0)
    assert np.array_equal(dec.residual, targets)


def test_decompose_hand_case_two_columns():
    # Phi=[[1,0]], Y=[[1,1]], beta=1 -> attainable [[0.5,0]], residual [[0.5,1]]
    dec = theory.decompose_targets(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0)
    assert np.allclose(dec.attainable, [[0.5, 0.0]])
    assert np.allclose(dec.residual, [[0.5, 1.0]])


def test_decompose_hand_case_scalar():
    dec = theory.decompose_targets(np.array([[2.0]]), np.array([[1.0]]), 1.0)
    assert np.allclose(dec.attainable, [[1.0]])
    assert np.allclose(dec.residual, [[1.0]])


def test_decompose_sums_to_targets():
    rng = np.random.default_rng(0)
    targets = rng.standard_normal((3, 10))
    features = rng.standard_normal((4, 10))
    dec = theory.decompose_targets(targets, features, 0.3)
    assert np.max(np.abs(dec.attainable + dec.residual - targets)) <= 1e-12


def test_decompose_attainable_lies_in_feature_rowspace():
    rng = np.random.default_rng(1)
    for _ in range(10):
        d, n = int(rng.integers(1, 5)), int(rng.integers(2, 12))
        features = rng.standard_normal((d, n))
        targets = rng.standard_normal((2, n))
        dec = theory.decompose_targets(targets, features, 0.1)
        proj = rowspace_projector_svd(features)
        off = np.linalg.norm(dec.attainable @ (np.eye(n) - proj))
        assert off <= 1e-8 * (1.0 + np.linalg.norm(targets))


# ---------------------------------------------------------------------------
# functional gradient and criticality


def test_functional_gradient_zero_features():
    grad = theory.functional_gradient(np.ones((2, 5)), np.zeros((3, 5)), 0.7)
    assert np.array_equal(grad, np.zeros((3, 5)))


def test_functional_gradient_zero_targets():
    phi = np.random.default_rng(2).standard_normal((3, 5))
    grad = theory.functional_gradient(np.zeros((2, 5)), phi, 0.7)
    assert np.allclose(grad, 0.0)


def test_functional_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(5):
        targets = rng.standard_normal((2, 6))
        phi = rng.standard_normal((4, 6))
        beta = 0.4
        grad = theory.functional_gradient(targets, phi, beta)
        fd = np.zeros_like(phi)
        for idx in np.ndindex(phi.shape):
            h = 1e-6 * (1.0 + abs(phi[idx]))
            up = phi.copy(); up[idx] += h
            dn = phi.copy(); dn[idx] -= h
            fd[idx] = (losses.induced_loss(up, targets, beta)
                       - losses.induced_loss(dn, targets, beta)) / (2.0 * h)
        scale = max(np.max(np.abs(grad)), np.max(np.abs(fd)), 1e-12)
        assert np.max(np.abs(grad - fd)) / scale <= 1e-4


def test_is_critical_zero_features_nonzero_targets():
    verdict = theory.is_critical(np.ones((2, 4)), np.zeros((3, 4)), 0.5)
    assert verdict["critical"] and not verdict["is_global"]


def test_is_critical_zero_targets():
    phi = np.random.default_rng(4).standard_normal((3, 4))
    verdict = theory.is_critical(np.zeros((2, 4)), phi, 0.5)
    assert verdict["critical"] and verdict["is_global"]


def test_is_critical_hand_case_not_critical():
    # cross term [[0.25, 0.5], [0, 0]] is nonzero
    verdict = theory.is_critical(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]), 1.0)
    assert not verdict["critical"]
    assert np.isclose(verdict["cross_norm"],
                      np.linalg.norm(np.array([[0.25, 0.5], [0.0, 0.0]])))


def test_is_critical_orthogonal_construction():
    # features only span the first coordinate; targets live in the second
    verdict = theory.is_critical(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 0.5)
    assert verdict["critical"] and not verdict["is_global"]


def test_gradient_zero_iff_cross_zero():
    beta = 0.5
    # direction 1: critical instances have zero functional gradient
    for targets, phi in [
        (np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])),
        (np.zeros((2, 3)), np.random.default_rng(5).standard_normal((2, 3))),
        (np.ones((2, 3)), np.zeros((2, 3))),
    ]:
        grad = theory.functional_gradient(targets, phi, beta)
        assert np.linalg.norm(grad) <= 1e-10
        assert theory.is_critical(targets, phi, beta)["critical"]
    # direction 2: non-critical instances have nonzero gradient
    rng = np.random.default_rng(6)
    for _ in range(5):
        targets = rng.standard_normal((2, 6))
        phi = rng.standard_normal((3, 6))
        verdict = theory.is_critical(targets, phi, beta)
        grad_norm = np.linalg.norm(theory.functional_gradient(targets, phi, beta))
        assert not verdict["critical"]
        assert grad_norm > 1e-6


# ---------------------------------------------------------------------------
# envelope gradient checks


def test_envelope_one_parameter_scalar_calculus():
    # relu unit in its linear region: phi = theta*x, everything computable by hand
    theta, x, y, beta = 0.7, 1.3, 2.0, 0.5
    bb = bk.MlpBackbone([1, 1], [np.array([[theta]])], [np.zeros(1)], "relu", "standard")
    report = theory.check_envelope_gradient(
        bb, (np.array([[x]]), np.array([[y]])), "ridge", beta=beta)
    phi = theta * x
    expected = -2.0 * y * y * beta * phi * x / (phi * phi + beta) ** 2
    assert np.isclose(report["analytic"][0], expected, rtol=1e-10)
    assert np.isclose(report["numeric"][0], expected, rtol=1e-6)
    assert report["max_rel_err"] <= 1e-6


def test_envelope_random_tanh_networks():
    rng = np.random.default_rng(7)
    for seed in range(3):
        bb = bk.init_backbone([3, 8, 4], "tanh", "standard", seed=seed)
        x = rng.standard_normal((3, 10))
        y = rng.standard_normal((2, 10))
        report = theory.check_envelope_gradient(bb, (x, y), "ridge", beta=0.3,
                                                has_bias=True)
        assert report["max_rel_err"] <= 1e-4


def test_envelope_proximal_mode():
    rng = np.random.default_rng(8)
    bb = bk.init_backbone([3, 6, 4], "tanh", "standard", seed=21)
    x = rng.standard_normal((3, 9))
    y = rng.standard_normal((2, 9))
    prev = rng.standard_normal((2, 4))
    report = theory.check_envelope_gradient(bb, (x, y), "proximal", lam=0.9,
                                            prev_weights=prev)
    assert report["max_rel_err"] <= 1e-4


def test_envelope_proximal_large_lambda_limit():
    # with lam -> inf the solved W pins to prev_weights, so both gradients
    # approach the plain batch gradient at prev_weights
    rng = np.random.default_rng(9)
    bb = bk.init_backbone([2, 5, 3], "tanh", "standard", seed=22)
    x = rng.standard_normal((2, 8))
    y = rng.standard_normal((2, 8))
    prev = rng.standard_normal((2, 3))
    report = theory.check_envelope_gradient(bb, (x, y), "proximal", lam=1e8,
                                            prev_weights=prev)
    assert report["max_rel_err"] <= 1e-4
    feats, tape = bk.forward(bb, x)
    rep = losses.batch_loss(prev, feats, y, 0.0)
    fixed = np.concatenate(
        [g.ravel() for g in bk.backward(bb, tape, rep.grad_features).as_list()])
    scale = max(np.max(np.abs(fixed)), 1e-12)
    assert np.max(np.abs(report["analytic"] - fixed)) / scale <= 1e-6


def test_envelope_fault_injection_is_detected():
    rng = np.random.default_rng(10)
    bb = bk.init_backbone([2, 5, 3], "tanh", "standard", seed=23)
    x = rng.standard_normal((2, 8))
    y = rng.standard_normal((2, 8))
    report = theory.check_envelope_gradient(bb, (x, y), "ridge", beta=0.5,
                                            inject_gradient_fault=0.02)
    assert report["max_rel_err"] > 1e-3


def test_envelope_relu_reports_kink_skips():
    rng = np.random.default_rng(11)
    bb = bk.init_backbone([3, 8, 4], "relu", "standard", seed=24)
    x = rng.standard_normal((3, 10))
    y = rng.standard_normal((2, 10))
    report = theory.check_envelope_gradient(bb, (x, y), "ridge", beta=0.3)
    assert report["max_rel_err"] <= 1e-4
    assert 0 <= report["n_kink_skipped"] < report["n_params"]


def test_envelope_rejects_bad_mode():
    bb = bk.init_backbone([2, 3], "tanh", "standard", seed=0)
    data = (np.zeros((2, 2)), np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        theory.check_envelope_gradient(bb, data, "lasso", beta=1.0)
    with pytest.raises(ConfigurationError):
        theory.check_envelope_gradient(bb, data, "proximal", lam=1.0)


# ---------------------------------------------------------------------------
# Kalman / MAP equivalence


def test_kalman_scalar_hand_case():
    # lam = (1/2)^2 -> 0.25; prox = (2 + 0.25*0.5)/(1 + 0.25) = 1.7
    report = theory.check_kalman_equivalence(np.array([[2.0]]), np.array([[1.0]]),
                                             np.array([[0.5]]), 1.0, 2.0)
    assert np.isclose(report["lam"], 0.25)
    assert np.isclose(report["proximal"][0, 0], 1.7)
    assert report["rel_err"] <= 1e-6


def test_kalman_equal_sigmas_is_unit_lambda():
    rng = np.random.default_rng(12)
    targets = rng.standard_normal((2, 10))
    features = rng.standard_normal((3, 10))
    prev = rng.standard_normal((2, 3))
    report = theory.check_kalman_equivalence(targets, features, prev, 0.7, 0.7)
    assert report["lam"] == 1.0
    direct = hd.proximal_solution(targets, features, prev, 1.0)
    assert np.array_equal(report["proximal"], direct)
    assert report["rel_err"] <= 1e-6


def test_kalman_vanishing_prior_recovers_least_squares():
    rng = np.random.default_rng(13)
    features = rng.standard_normal((3, 20))   # well-conditioned, n > d
    targets = rng.standard_normal((2, 20))
    prev = rng.standard_normal((2, 3))
    prox = hd.proximal_solution(targets, features, prev, 1e-8)
    ls = targets @ features.T @ np.linalg.inv(features @ features.T)
    assert np.max(np.abs(prox - ls)) <= 1e-6 * (1.0 + np.max(np.abs(ls)))


def test_kalman_random_instances():
    rng = np.random.default_rng(14)
    for _ in range(5):
        targets = rng.standard_normal((2, 8))
        features = rng.standard_normal((3, 8))
        prev = rng.standard_normal((2, 3))
        sigma_y = float(10.0 ** rng.uniform(-1, 1))
        sigma_w = float(10.0 ** rng.uniform(-1, 1))
        report = theory.check_kalman_equivalence(targets, features, prev, sigma_y, sigma_w)
        assert report["rel_err"] <= 1e-6


# ---------------------------------------------------------------------------
# kernel gradient flow


def small_flow_instance(seed=0, d=6, n=8, o=2, beta=1e-2):
    rng = np.random.default_rng(seed)
    phi0 = rng.standard_normal((d, n))
    targets = rng.standard_normal((o, n))
    kernel = theory.default_flow_kernel(d, seed=seed + 1000)
    return theory.FlowState(phi0, kernel, beta), targets


def test_flow_state_rejects_indefinite_kernel():
    with pytest.raises(ConfigurationError):
        theory.FlowState(np.zeros((2, 3)), np.array([[1.0, 0.0], [0.0, -0.5]]), 0.1)


def test_flow_stationary_at_near_global_minimum():
    # d >= n so the targets are attainable; the huge feature scale then makes
    # the residual (hence the velocity) negligible
    rng = np.random.default_rng(15)
    phi0 = 1e3 * rng.standard_normal((4, 3))
    targets = rng.standard_normal((2, 3))
    fs = theory.FlowState(phi0, theory.default_flow_kernel(4, seed=16), 1e-6)
    traj = theory.integrate_flow(fs, targets, dt=0.01, steps=20, record_features=True)
    assert traj.residual_norms[0] <= 1e-9 * np.linalg.norm(targets)
    drifts = [np.linalg.norm(b - a) for a, b in zip(traj.features, traj.features[1:])]
    assert max(drifts) <= 1e-8


def test_flow_exactly_stationary_at_zero_features():
    targets = np.ones((2, 4))
    fs = theory.FlowState(np.zeros((3, 4)), theory.default_flow_kernel(3, seed=17), 0.5)
    traj = theory.integrate_flow(fs, targets, dt=0.05, steps=50, record_features=True)
    for phi in traj.features:
        assert np.array_equal(phi, np.zeros((3, 4)))


def test_flow_converges_to_global_minimum():
    fs, targets = small_flow_instance(seed=18)
    dt = 0.1 / theory.sym_eigvals(fs.kernel)[-1]
    traj = theory.integrate_flow(fs, targets, dt=dt, steps=100000,
                                 stop_residual_ratio=1e-3)
    target_norm = np.linalg.norm(targets)
    assert traj.residual_norms[-1] <= 1e-3 * target_norm
    report = theory.check_eig_monotone(traj)
    assert report["max_violation"] == 0.0


def test_flow_induced_loss_non_increasing():
    fs, targets = small_flow_instance(seed=19)
    dt = 0.1 / theory.sym_eigvals(fs.kernel)[-1]
    traj = theory.integrate_flow(fs, targets, dt=dt, steps=3000)
    vals = traj.induced_values
    assert all(b <= a + 1e-8 * (1.0 + a) for a, b in zip(vals, vals[1:]))


def test_flow_gram_rate_matches_closed_form():
    # the 2(AB + BA) rate identity is exact in the small-beta limit where the
    # shrunk projector is orthogonal; beta=1e-4 keeps its error well under the
    # 1e-3 comparison tolerance
    fs, targets = small_flow_instance(seed=20, beta=1e-4)
    dt = 1e-3
    traj = theory.integrate_flow(fs, targets, dt=dt, steps=40, record_features=True)

    def gram(phi):
        dec = theory.decompose_targets(targets, phi, fs.beta)
        return dec.attainable @ dec.attainable.T

    for t in range(1, 30, 7):
        fd = (gram(traj.features[t + 1]) - gram(traj.features[t - 1])) / (2.0 * dt)
        closed = theory.attainable_gram_rate(targets, traj.features[t], fs.kernel, fs.beta)
        scale = max(np.max(np.abs(fd)), np.max(np.abs(closed)), 1e-12)
        assert np.max(np.abs(fd - closed)) / scale <= 1e-3


def test_eig_monotone_flags_reversed_trajectory():
    fs, targets = small_flow_instance(seed=21)
    dt = 0.1 / theory.sym_eigvals(fs.kernel)[-1]
    traj = theory.integrate_flow(fs, targets, dt=dt, steps=2000)
    assert theory.check_eig_monotone(traj)["max_violation"] == 0.0
    reversed_traj = theory.FlowTrajectory(traj.times, traj.eigenvalues[::-1],
                                          traj.residual_norms[::-1],
                                          traj.induced_values[::-1], traj.final_state)
    assert theory.check_eig_monotone(reversed_traj)["max_violation"] > 0.0


def test_flow_instability_error_on_huge_step():
    # near Phi = 0 the velocity is ~linear in Phi with gain ~ |Y|^2/beta, so a
    # huge step amplifies wildly instead of tracking the flow
    rng = np.random.default_rng(22)
    phi0 = 1e-3 * rng.standard_normal((6, 8))
    targets = rng.standard_normal((2, 8))
    fs = theory.FlowState(phi0, theory.default_flow_kernel(6, seed=1022), 1e-2)
    with pytest.raises(InstabilityError):
        theory.integrate_flow(fs, targets, dt=1e4, steps=2000)


def test_trajectory_csv_dump(tmp_path):
    fs, targets = small_flow_instance(seed=23)
    traj = theory.integrate_flow(fs, targets, dt=0.01, steps=5)
    path = tmp_path / "traj.csv"
    theory.write_trajectory_csv(traj, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,eig0,eig1,residual_norm,induced_loss"
    assert len(lines) == 7

import numpy as np
import pytest

from depthfusion.covariance import (
    UnobservableRegistrationError,
    analyze_observability,
    fisher_matrix,
    icp_covariance,
    information_sum,
    read_covariance_csv,
    write_covariance_csv,
)
from depthfusion.icp import solve_rigid
from depthfusion.liegroup import project_pi, vee

from conftest import random_pose


def skew_ref(v):
    # row k is e_k x v, so (M w)_k = e_k . (v x w): M is the cross-product matrix of v
    return np.cross(np.eye(3), v)


def stacked_jacobian(points):
    """Rows ``[-A_i, I]`` with ``A_i`` the cross-product matrix of ``q_i``, built one block at a time."""
    j = np.zeros((3 * len(points), 6))
    for i, q in enumerate(points):
        a = skew_ref(q)
        j[3 * i : 3 * i + 3, :3] = -a
        j[3 * i : 3 * i + 3, 3:] = np.eye(3)
    return j


def test_skew_reference_is_the_cross_product():
    v, w = np.array([1.0, 2.0, 3.0]), np.array([-0.5, 0.1, 2.0])
    assert np.allclose(skew_ref(v) @ w, np.cross(v, w))


def test_single_point_at_origin():
    f = fisher_matrix([[0.0, 0.0, 0.0]], 0.2)
    expected = np.zeros((6, 6))
    expected[3:, 3:] = np.eye(3) / 0.04
    assert np.allclose(f, expected, rtol=1e-15, atol=0)


def test_fisher_matches_stacked_jacobian(rng):
    q = rng.uniform(-3, 3, (100, 3))
    j = stacked_jacobian(q)
    ref = j.T @ j / 0.2**2
    f = fisher_matrix(q, 0.2)
    assert np.abs(f - ref).max() <= 1e-9 * np.abs(ref).max()


def test_translation_block_is_exact(rng):
    q = rng.normal(size=(37, 3))
    f = fisher_matrix(q, 0.3)
    assert np.array_equal(f[3:, 3:], 37 / 0.3**2 * np.eye(3))


def test_fisher_is_symmetric_psd(rng):
    for _ in range(20):
        f = fisher_matrix(rng.normal(size=(rng.integers(1, 50), 3)) * 4, rng.uniform(0.01, 1))
        assert np.array_equal(f, f.T)
        lam = np.linalg.eigvalsh(f)
        assert lam[0] >= -1e-9 * lam[-1]


def test_collinear_cloud_kernel():
    q = np.column_stack([np.zeros(20), np.zeros(20), np.linspace(-2, 3, 20)])
    rep = analyze_observability(fisher_matrix(q, 0.2))
    assert rep.eigenvalues[0] < 1e-9 * rep.eigenvalues[-1]
    v = rep.eigenvectors[:, 0]
    assert abs(abs(v @ [0, 0, 1, 0, 0, 0]) - 1) < 1e-12
    assert rep.weak.sum() == 1
    assert np.allclose(np.abs(rep.weak_directions[0]), [0, 0, 1, 0, 0, 0], atol=1e-9)


def test_fisher_rejects_bad_input():
    with pytest.raises(ValueError):
        fisher_matrix(np.zeros((0, 3)), 0.2)
    with pytest.raises(ValueError):
        fisher_matrix([[0, 0, 0]], 0.0)
    with pytest.raises(ValueError):
        fisher_matrix([[0, np.nan, 0]], 0.2)


# --- covariance -----------------------------------------------------------------------


def test_covariance_of_diagonal_information():
    a, b, c = 1.0, 2.0, 3.0
    q = np.array([[a, 0, 0], [-a, 0, 0], [0, b, 0], [0, -b, 0], [0, 0, c], [0, 0, -c]])
    sigma = 0.2
    f = fisher_matrix(q, sigma)
    d = np.diag(f) * sigma**2
    assert np.allclose(f, np.diag(np.diag(f)), atol=1e-12)
    assert np.allclose(icp_covariance(q, sigma), sigma**2 * np.diag(1 / d), rtol=1e-12)


def test_covariance_scales_with_variance(rng):
    q = rng.uniform(-2, 2, (200, 3))
    n1 = icp_covariance(q, 0.1)
    n2 = icp_covariance(q, 0.2)
    assert np.linalg.norm(n2 - 4 * n1) <= 1e-12 * np.linalg.norm(n2)


def test_fisher_times_covariance_is_identity(rng):
    for _ in range(20):
        q = rng.uniform(-3, 3, (rng.integers(3, 300), 3))
        sigma = rng.uniform(0.01, 0.5)
        assert np.abs(fisher_matrix(q, sigma) @ icp_covariance(q, sigma) - np.eye(6)).max() < 1e-6


def test_monte_carlo_linear_estimator(rng):
    q = rng.uniform(-2, 2, (500, 3))
    sigma = 0.05
    n = icp_covariance(q, sigma)
    j = stacked_jacobian(q)
    # linearised cost sum ||J_i x + u_i||^2 for noisy sources p_i = q_i + u_i
    noise = rng.normal(scale=sigma, size=(2000, 3 * len(q)))
    est, *_ = np.linalg.lstsq(j, -noise.T, rcond=None)
    sample = np.cov(est)
    rel = np.abs(np.diag(sample) - np.diag(n)) / np.diag(n)
    assert rel.max() < 0.15


def test_monte_carlo_rigid_solve(rng):
    q = rng.uniform(-2, 2, (500, 3))
    sigma = 0.05
    n = icp_covariance(q, sigma)
    est = []
    for _ in range(2000):
        p = q + rng.normal(scale=sigma, size=q.shape)
        x = solve_rigid(p, q)
        est.append(vee(project_pi(x.matrix() - np.eye(4))).vector)
    sample = np.cov(np.array(est).T)
    rel = np.abs(np.diag(sample) - np.diag(n)) / np.diag(n)
    assert rel.max() < 0.15


def test_ill_conditioned_cloud_raises_with_report():
    q = np.column_stack([np.zeros(10), np.zeros(10), np.arange(10.0)])
    with pytest.raises(UnobservableRegistrationError) as exc:
        icp_covariance(q, 0.2)
    assert exc.value.report.weak.sum() >= 1


# --- observability --------------------------------------------------------------------


def test_identity_has_no_weak_directions():
    rep = analyze_observability(np.eye(6))
    assert rep.weak.sum() == 0 and rep.condition_number == 1.0


def test_weak_count_matches_svd_rank(rng):
    for k in range(6):
        basis = rng.normal(size=(6, 6 - k))
        f = basis @ basis.T  # rank 6 - k
        rep = analyze_observability(f)
        s = np.linalg.svd(f, compute_uv=False)
        rank = int((s >= 1e-9 * s[0]).sum())
        assert int((~rep.weak).sum()) == rank == 6 - k


def test_eigen_decomposition_reconstructs(rng):
    f = fisher_matrix(rng.normal(size=(50, 3)), 0.2)
    rep = analyze_observability(f)
    recon = (rep.eigenvectors * rep.eigenvalues) @ rep.eigenvectors.T
    assert np.linalg.norm(recon - f) <= 1e-9 * np.linalg.norm(f)
    assert np.all(np.diff(rep.eigenvalues) >= 0)


def test_asymmetric_input_rejected():
    m = np.eye(6)
    m[0, 1] = 1.0
    with pytest.raises(ValueError):
        analyze_observability(m)


# --- structural properties ------------------------------------------------------------


def test_fisher_ignores_point_order(rng):
    q = rng.normal(size=(80, 3))
    a = fisher_matrix(q, 0.2)
    b = fisher_matrix(q[rng.permutation(80)], 0.2)
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_fisher_is_additive(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(45, 3)) + 2
    both = fisher_matrix(np.vstack([a, b]), 0.2)
    assert np.abs(both - fisher_matrix(a, 0.2) - fisher_matrix(b, 0.2)).max() <= 1e-12 * np.abs(both).max()


def test_cost_increase_is_the_fisher_quadratic_form(rng):
    q = rng.uniform(-2, 2, (60, 3))
    sigma = 0.1
    p = q + rng.normal(scale=sigma, size=q.shape)

    def f(x):
        # linearised cost: sum ||p_i + omega x q_i + mu - q_i||^2
        return float(((p + np.cross(x[:3], q) + x[3:] - q) ** 2).sum())

    j = stacked_jacobian(q)
    x_star, *_ = np.linalg.lstsq(j, (q - p).ravel(), rcond=None)
    fisher = fisher_matrix(q, sigma)
    for _ in range(20):
        dx = rng.normal(size=6) * 1e-3
        lhs = f(x_star + dx) - f(x_star)
        rhs = sigma**2 * dx @ fisher @ dx
        assert abs(lhs - rhs) <= 1e-4 * abs(rhs)


def test_recentering_removes_lever_arm(rng):
    q = rng.normal(size=(100, 3)) + [10.0, 0, 0]
    f = information_sum(q, recenter=True)
    assert np.abs(f[:3, 3:]).max() < 1e-9
    assert np.linalg.cond(f) < np.linalg.cond(information_sum(q))


def test_csv_round_trip(tmp_path, rng):
    q = rng.normal(size=(40, 3))
    n = icp_covariance(q, 0.2)
    rep = analyze_observability(fisher_matrix(q, 0.2))
    write_covariance_csv(tmp_path / "n.csv", n, rep)
    back, eig = read_covariance_csv(tmp_path / "n.csv")
    assert np.array_equal(back, n)
    assert np.array_equal(eig, rep.eigenvalues)


def test_covariance_transports_with_the_map_frame(rng):
    # moving every target point by G conjugates the information by the adjoint of G
    from depthfusion.liegroup import adjoint

    q = rng.normal(size=(50, 3))
    g = random_pose(rng)
    ad = adjoint(g)
    lhs = fisher_matrix(g.apply(q), 0.2)
    rhs = np.linalg.inv(ad).T @ fisher_matrix(q, 0.2) @ np.linalg.inv(ad)
    assert np.abs(lhs - rhs).max() <= 1e-9 * np.abs(lhs).max()

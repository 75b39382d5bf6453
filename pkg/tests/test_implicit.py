import numpy as np
import pytest

from unfoldgnn.energy import from_symmetric_pair, phi_relu, phi_soft_threshold, phi_zero
from unfoldgnn.graph import LaplacianKind, build_graph, propagation_matrix, spectral_norm
from unfoldgnn.implicit import (
    EignnSpec,
    FixedPointConfig,
    FixedPointDivergence,
    eignn_forward,
    eignn_grad_f,
    fixed_point_solve,
    implicit_backward,
    project_weights,
)
from unfoldgnn.unfold import PropagationConfig, propagate

SELF = LaplacianKind.SELF_LOOP_SYM


def random_graph(rng, n, p=0.35):
    mask = np.triu(rng.random((n, n)) < p, k=1)
    pairs = np.argwhere(mask)
    if pairs.shape[0] == 0:
        pairs = np.array([[0, 1]])
    return build_graph(n, pairs)


def contraction_weight(rng, d, p_op, margin=0.8):
    w = rng.normal(size=(d, d))
    return project_weights(w, p_op, margin=margin)


def dense_linear_fixed_point(p_dense, w_p, fx):
    """Kronecker-system oracle for the identity-activation case."""
    n, d = fx.shape
    k = np.kron(w_p.T, p_dense)
    y = np.linalg.solve(np.eye(n * d) - k, fx.reshape(-1, order="F"))
    return y.reshape(n, d, order="F")


class TestProjectWeights:
    def test_scaling_factor(self):
        w = np.diag([2.0, 1.0])
        p = np.eye(3)
        got = project_weights(w, p, margin=0.9)
        np.testing.assert_allclose(got, 0.45 * w, rtol=1e-8)

    def test_zero_unchanged(self):
        w = np.zeros((3, 3))
        np.testing.assert_array_equal(project_weights(w, np.eye(2)), w)

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        w = a + a.T
        got = project_weights(w, 2 * np.eye(3), margin=0.5)
        np.testing.assert_allclose(got, got.T, atol=1e-14)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(5, 5))
        p = rng.normal(size=(6, 6))
        once = project_weights(w, p, margin=0.7)
        twice = project_weights(once, p, margin=0.7)
        np.testing.assert_allclose(twice, once, atol=1e-14)


class TestFixedPointSolve:
    def test_zero_weight_converges_immediately(self):
        rng = np.random.default_rng(2)
        g = random_graph(rng, 8)
        fx = rng.normal(size=(8, 3))
        out = fixed_point_solve(g, np.zeros((3, 3)), fx, FixedPointConfig(sigma=phi_relu()))
        assert out.iterations <= 2
        np.testing.assert_allclose(out.y, np.maximum(fx, 0.0))

    def test_identity_activation_matches_kronecker_solve(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, 10)
        p_dense = propagation_matrix(g, SELF).toarray()
        w = contraction_weight(rng, 3, p_dense)
        fx = rng.normal(size=(10, 3))
        out = fixed_point_solve(g, w, fx, FixedPointConfig(tol=1e-12))
        expected = dense_linear_fixed_point(p_dense, w, fx)
        assert np.linalg.norm(out.y - expected) < 1e-8

    def test_fixed_point_equation_satisfied(self):
        rng = np.random.default_rng(4)
        g = random_graph(rng, 9)
        p_op = propagation_matrix(g, SELF)
        w = contraction_weight(rng, 2, p_op.toarray())
        fx = rng.normal(size=(9, 2))
        cfg = FixedPointConfig(sigma=phi_relu(), tol=1e-10)
        out = fixed_point_solve(g, w, fx, cfg)
        recon = np.maximum(p_op @ out.y @ w + fx, 0.0)
        assert np.linalg.norm(out.y - recon) <= 2 * cfg.tol

    def test_unique_limit_from_different_starts(self):
        # uniqueness probe: restart from the first solve's endpoint + noise
        rng = np.random.default_rng(5)
        g = random_graph(rng, 12)
        p_dense = propagation_matrix(g, SELF).toarray()
        w = contraction_weight(rng, 3, p_dense, margin=0.9)
        fx = rng.normal(size=(12, 3))
        cfg = FixedPointConfig(sigma=phi_relu(), tol=1e-9)
        out1 = fixed_point_solve(g, w, fx, cfg)
        shifted = fixed_point_solve(g, w, fx + 1e-9 * rng.normal(size=fx.shape), cfg)
        assert np.linalg.norm(out1.y - shifted.y) < 2e-7

    def test_geometric_residual_decay(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            g = random_graph(rng, 14)
            p_dense = propagation_matrix(g, SELF).toarray()
            w = contraction_weight(rng, 3, p_dense, margin=0.9)
            fx = rng.normal(size=(14, 3))
            out = fixed_point_solve(g, w, fx, FixedPointConfig(sigma=phi_relu()))
            assert out.contraction_estimate <= 0.95

    def test_max_iters_exhaustion_raises(self):
        rng = np.random.default_rng(7)
        g = random_graph(rng, 8)
        w = np.eye(2) * 0.99
        fx = rng.normal(size=(8, 2))
        with pytest.raises(FixedPointDivergence):
            fixed_point_solve(g, w, fx, FixedPointConfig(tol=1e-14, max_iters=3))


class TestUgnnIgnnEquivalence:
    @pytest.mark.parametrize("phi", [phi_zero(), phi_relu(), phi_soft_threshold(0.05)])
    def test_fixed_points_agree(self, phi):
        # paired weights, unit step, identity attention: the unfolded
        # fixed point and the implicit fixed point coincide
        rng = np.random.default_rng(8)
        for trial in range(6):
            g = random_graph(rng, 10)
            p_dense = propagation_matrix(g, SELF).toarray()
            d = 3
            a = rng.normal(size=(d, d))
            w_sym = a + a.T
            w_sym = project_weights(w_sym, p_dense, margin=0.8)
            spec = from_symmetric_pair(w_sym, np.eye(d) - w_sym, phi=phi,
                                       kind=SELF, gradient_mode="literal")
            fx = rng.normal(size=(10, d))
            ugnn = propagate(spec, g, fx, PropagationConfig(steps=400, alpha=1.0))
            ignn = fixed_point_solve(g, w_sym, fx, FixedPointConfig(sigma=phi, tol=1e-12))
            assert np.linalg.norm(ugnn.y - ignn.y) < 1e-6


class TestImplicitBackward:
    def test_zero_weight_passthrough(self):
        rng = np.random.default_rng(9)
        g = random_graph(rng, 7)
        fx = rng.normal(size=(7, 2))
        w = np.zeros((2, 2))
        out = fixed_point_solve(g, w, fx, FixedPointConfig())
        up = rng.normal(size=(7, 2))
        grad_w, grad_fx = implicit_backward(g, w, fx, out.y, up, FixedPointConfig())
        np.testing.assert_allclose(grad_fx, up, atol=1e-12)

    def test_identity_matches_dense_adjoint(self):
        rng = np.random.default_rng(10)
        g = random_graph(rng, 8)
        p_dense = propagation_matrix(g, SELF).toarray()
        w = contraction_weight(rng, 2, p_dense)
        fx = rng.normal(size=(8, 2))
        cfg = FixedPointConfig(tol=1e-13)
        out = fixed_point_solve(g, w, fx, cfg)
        up = rng.normal(size=(8, 2))
        grad_w, grad_fx = implicit_backward(g, w, fx, out.y, up, cfg)
        n, d = fx.shape
        k = np.kron(w.T, p_dense)
        solve_t = np.linalg.solve(np.eye(n * d) - k.T, up.reshape(-1, order="F"))
        expected_fx = solve_t.reshape(n, d, order="F")
        np.testing.assert_allclose(grad_fx, expected_fx, atol=1e-8)
        expected_w = (p_dense @ out.y).T @ expected_fx
        np.testing.assert_allclose(grad_w, expected_w, atol=1e-8)

    @pytest.mark.parametrize("sigma", [None, phi_relu()])
    def test_matches_finite_differences(self, sigma):
        rng = np.random.default_rng(11)
        g = random_graph(rng, 6)
        p_dense = propagation_matrix(g, SELF).toarray()
        d = 2
        w = contraction_weight(rng, d, p_dense, margin=0.7)
        # keep pre-activations away from the relu kink
        fx = rng.normal(size=(6, d)) + 0.5
        cfg = FixedPointConfig(sigma=sigma, tol=1e-13)
        out = fixed_point_solve(g, w, fx, cfg)
        z = p_dense @ out.y @ w + fx
        assert np.abs(z).min() > 1e-3
        up = rng.normal(size=(6, d))

        def loss(w_mat, fx_mat):
            res = fixed_point_solve(g, w_mat, fx_mat, cfg)
            return float(np.sum(up * res.y))

        grad_w, grad_fx = implicit_backward(g, w, fx, out.y, up, cfg)
        h = 1e-6
        for idx in [(0, 0), (1, 0), (0, 1)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (loss(wp, fx) - loss(wm, fx)) / (2 * h)
            assert grad_w[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)
        for idx in [(0, 0), (3, 1)]:
            fp, fm = fx.copy(), fx.copy()
            fp[idx] += h
            fm[idx] -= h
            fd = (loss(w, fp) - loss(w, fm)) / (2 * h)
            assert grad_fx[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestEignn:
    def test_zero_f_returns_base_prediction(self):
        rng = np.random.default_rng(12)
        g = random_graph(rng, 7)
        fx = rng.normal(size=(7, 2))
        spec = EignnSpec(f_mat=np.zeros((2, 2)), mu=0.9, eps_f=0.1)
        np.testing.assert_allclose(eignn_forward(g, spec, fx), fx)

    def test_identity_f_scaling_and_dense_solve(self):
        rng = np.random.default_rng(13)
        g = random_graph(rng, 9)
        spec = EignnSpec(f_mat=np.eye(2), mu=0.8, eps_f=0.1)
        s_sq = spec.scale_sq()
        assert s_sq == pytest.approx(1.0 / (np.sqrt(2.0) + 0.1))
        fx = rng.normal(size=(9, 2))
        got = eignn_forward(g, spec, fx, tol=1e-12)
        p_dense = propagation_matrix(g, SELF).toarray()
        expected = dense_linear_fixed_point(p_dense, spec.weight(), fx)
        assert np.linalg.norm(got - expected) < 1e-8

    def test_weight_is_contraction_by_construction(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            f = rng.normal(size=(4, 4)) * rng.uniform(0.1, 10)
            spec = EignnSpec(f_mat=f, mu=0.95, eps_f=1e-3)
            assert spectral_norm(spec.weight()) < 1.0

    def test_matches_unfolded_minimizer(self):
        rng = np.random.default_rng(15)
        g = random_graph(rng, 10)
        f = rng.normal(size=(3, 3))
        spec = EignnSpec(f_mat=f, mu=0.7, eps_f=0.2)
        fx = rng.normal(size=(10, 3))
        w_eff = spec.weight()
        espec = from_symmetric_pair(w_eff, np.eye(3) - w_eff, kind=SELF,
                                    gradient_mode="literal")
        ugnn = propagate(espec, g, fx, PropagationConfig(steps=400, alpha=1.0))
        got = eignn_forward(g, spec, fx, tol=1e-12)
        assert np.linalg.norm(got - ugnn.y) < 1e-6

    def test_grad_f_matches_finite_differences(self):
        rng = np.random.default_rng(16)
        g = random_graph(rng, 6)
        f = rng.normal(size=(2, 2))
        fx = rng.normal(size=(6, 2))
        up = rng.normal(size=(6, 2))

        def loss(f_mat):
            spec = EignnSpec(f_mat=f_mat, mu=0.6, eps_f=0.1)
            return float(np.sum(up * eignn_forward(g, spec, fx, tol=1e-13)))

        spec = EignnSpec(f_mat=f, mu=0.6, eps_f=0.1)
        y_star = eignn_forward(g, spec, fx, tol=1e-13)
        cfg = FixedPointConfig(tol=1e-13)
        grad_w, _ = implicit_backward(g, spec.weight(), fx, y_star, up, cfg)
        grad_f = eignn_grad_f(spec, grad_w)
        h = 1e-6
        for idx in [(0, 0), (0, 1), (1, 1)]:
            fp, fm = f.copy(), f.copy()
            fp[idx] += h
            fm[idx] -= h
            fd = (loss(fp) - loss(fm)) / (2 * h)
            assert grad_f[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)

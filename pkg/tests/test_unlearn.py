import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winu import curvature as curv
from winu import metrics, models, oracle, unlearn
from winu.data import Dataset, ForgetSplit
from winu.errors import (
    ConfigError,
    CoreTooLarge,
    MissingTargets,
    NotConverged,
    SingularCore,
    WrongLossKind,
)
from winu.models import ModelSpec

from _oracles import SMALL_RECIPE, blobs, dense_ggn, gauss_jordan_inverse, small_mlp_problem


def ridge_problem(rng, n=200, d=8, m=5, noise=0.1):
    x = rng.standard_normal((n, d))
    y = x @ rng.standard_normal(d) + noise * rng.standard_normal(n)
    return x, y, ForgetSplit(np.arange(m), n)


def ridge_hessian(x, lam):
    return x.T @ x / x.shape[0] + lam * np.eye(x.shape[1])


def mlp_setup(m=4):
    spec, theta, x, y, lam = small_mlp_problem()
    idx = np.arange(m)
    h = dense_ggn(spec, theta, x, lam)
    return spec, theta, x, y, lam, idx, h


def dense_forget_ggn(spec, theta, x_f, n):
    return dense_ggn(spec, theta, x_f, 0.0, n=n)


class TestLinearWoodbury:
    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(30, 300),
        st.integers(1, 12),
        st.integers(1, 10),
        st.floats(1e-3, 1.0),
        st.integers(0, 2**32 - 1),
    )
    def test_matches_closed_form_retrain(self, n, d, m, lam, seed):
        rng = np.random.default_rng(seed)
        x, y, split = ridge_problem(rng, n, d, m)
        theta = oracle.ridge_closed_form(x, y, lam)
        upd = unlearn.linear_woodbury_update(
            theta, curv.CurvatureOracle.exact(ridge_hessian(x, lam)), x[:m], y[:m], n
        )
        ref = oracle.ridge_retrain_closed_form(x, y, split, lam)
        assert np.linalg.norm(theta + upd.delta - ref) / np.linalg.norm(ref) <= 1e-10

    def test_zero_residual(self, rng):
        x, _, _ = ridge_problem(rng)
        theta = rng.standard_normal(8)
        upd = unlearn.linear_woodbury_update(
            theta, curv.CurvatureOracle.exact(ridge_hessian(x, 0.1)), x[:3], x[:3] @ theta, 200
        )
        np.testing.assert_array_equal(upd.delta, 0)

    def test_single_orthogonal_sample(self):
        # x_f = e_1, H = I: delta = e_1 * r / (n - 1)
        n = 10
        upd = unlearn.linear_woodbury_update(
            np.array([2.0, 0.0]), curv.CurvatureOracle.exact(np.eye(2)), np.array([[1.0, 0.0]]), [1.0], n
        )
        np.testing.assert_allclose(upd.delta, [1.0 / (n - 1), 0.0], rtol=1e-14)
        assert upd.diagnostics.woodbury_core_size == 1

    def test_singular_core(self, rng):
        x, y, _ = ridge_problem(rng)
        with pytest.raises(SingularCore):
            unlearn.linear_woodbury_update(
                np.zeros(8), curv.CurvatureOracle.exact(ridge_hessian(x, 0.1)), x[:3], y[:3], 200, pivot_floor=10.0
            )

    def test_core_identity(self, rng):
        # (H - X_f^T X_f / n)^{-1} X_f^T r / n equals the Woodbury delta
        x, y, _ = ridge_problem(rng)
        h = ridge_hessian(x, 0.05)
        theta = rng.standard_normal(8)
        upd = unlearn.linear_woodbury_update(theta, curv.CurvatureOracle.exact(h), x[:5], y[:5], 200)
        direct = gauss_jordan_inverse(h - x[:5].T @ x[:5] / 200) @ (x[:5].T @ (x[:5] @ theta - y[:5])) / 200
        np.testing.assert_allclose(upd.delta, direct, rtol=1e-10, atol=1e-14)


class TestOutputSpace:
    def test_ridge_matches_linear(self, rng):
        x, y, split = ridge_problem(rng)
        lam = 0.01
        spec = ModelSpec.ridge(8)
        theta = oracle.ridge_closed_form(x, y, lam)
        h = curv.CurvatureOracle.exact(ridge_hessian(x, lam))
        a = unlearn.winu_output_space(spec, theta, h, x[:5], y[:5], 200)
        b = unlearn.linear_woodbury_update(theta, h, x[:5], y[:5], 200)
        assert np.linalg.norm(a.delta - b.delta) / np.linalg.norm(b.delta) <= 1e-12
        ref = oracle.ridge_retrain_closed_form(x, y, split, lam)
        np.testing.assert_allclose(theta + a.delta, ref, rtol=1e-10, atol=1e-12)

    def test_core_too_large(self):
        spec = ModelSpec.mlp(2, 2, 10)
        x = np.zeros((501, 2))
        with pytest.raises(CoreTooLarge):
            unlearn.winu_output_space(
                spec, np.zeros(spec.num_params), curv.CurvatureOracle.exact(np.eye(spec.num_params)), x, np.zeros(501, int), 1000
            )

    def test_empty_forget_set(self):
        spec, theta, *_ = small_mlp_problem()
        upd = unlearn.winu_output_space(
            spec, theta, curv.CurvatureOracle.exact(np.eye(spec.num_params)), np.zeros((0, 4)), np.zeros(0, int), 120
        )
        assert not upd.delta.any()

    def test_matches_dense_newton(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        n = x.shape[0]
        upd = unlearn.winu_output_space(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], n)
        h_f = dense_forget_ggn(spec, theta, x[idx], n)
        g_f = unlearn.forget_gradient(spec, theta, x[idx], y[idx], n)
        direct = gauss_jordan_inverse(h - h_f) @ g_f
        np.testing.assert_allclose(upd.delta, direct, rtol=1e-8, atol=1e-12)

    def test_beats_vanilla_against_retrain(self):
        spec, theta, x, y, lam, idx, h = mlp_setup(m=6)
        n = x.shape[0]
        split = ForgetSplit(idx, n)
        retrained = oracle.retrain_mlp(spec, x, y, split, lam, SMALL_RECIPE, warm_start=theta)
        oh = curv.CurvatureOracle.exact(h)
        winu = unlearn.winu_output_space(spec, theta, oh, x[idx], y[idx], n)
        vanilla = unlearn.newton_vanilla(spec, theta, oh, x[idx], y[idx], n)
        forget = Dataset(x[idx], y[idx])
        kl = lambda d: metrics.output_divergence_classification(spec, retrained, theta + d.delta, forget)
        assert kl(winu) <= kl(vanilla)
        assert metrics.relative_parameter_distance(retrained, theta + winu.delta) < metrics.relative_parameter_distance(
            retrained, theta + vanilla.delta
        )

    def test_refuses_unconverged(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        with pytest.raises(NotConverged):
            unlearn.winu_output_space(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], 120, grad_norm=0.5)
        with pytest.warns(RuntimeWarning):
            upd = unlearn.winu_output_space(
                spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], 120, grad_norm=0.5, force=True
            )
        assert np.all(np.isfinite(upd.delta))


class TestRetainCg:
    def test_empty(self, rng):
        x, y, _ = ridge_problem(rng)
        upd = unlearn.newton_retain_cg(ModelSpec.ridge(8), np.zeros(8), x, y, [], 0.1)
        assert not upd.delta.any() and upd.diagnostics.cg_iterations == 0

    def test_ridge_matches_woodbury(self, rng):
        x, y, _ = ridge_problem(rng)
        lam = 0.01
        theta = oracle.ridge_closed_form(x, y, lam)
        cg = unlearn.newton_retain_cg(ModelSpec.ridge(8), theta, x, y, np.arange(5), lam, rel_tol=1e-12)
        wb = unlearn.linear_woodbury_update(theta, curv.CurvatureOracle.exact(ridge_hessian(x, lam)), x[:5], y[:5], 200)
        assert np.linalg.norm(cg.delta - wb.delta) / np.linalg.norm(wb.delta) <= 1e-8

    def test_mlp_matches_output_space(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        cg = unlearn.newton_retain_cg(spec, theta, x, y, idx, lam, rel_tol=1e-10)
        os_ = unlearn.winu_output_space(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], x.shape[0])
        assert np.linalg.norm(cg.delta - os_.delta) / np.linalg.norm(os_.delta) <= 1e-6
        assert cg.diagnostics.cg_iterations > 0


class TestVanilla:
    def test_dense(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        upd = unlearn.newton_vanilla(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], 120)
        g_f = unlearn.forget_gradient(spec, theta, x[idx], y[idx], 120)
        np.testing.assert_allclose(upd.delta, gauss_jordan_inverse(h) @ g_f, rtol=1e-9, atol=1e-13)

    def test_matrix_free_agrees_with_exact(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        op = curv.CurvatureOracle.matrix_free(curv.ggn_operator(spec, theta, x, lam), rel_tol=1e-12)
        a = unlearn.newton_vanilla(spec, theta, op, x[idx], y[idx], 120)
        b = unlearn.newton_vanilla(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], 120)
        np.testing.assert_allclose(a.delta, b.delta, rtol=1e-7, atol=1e-12)
        assert a.diagnostics.cg_iterations > 0

    def test_forget_gradient_single_row(self):
        spec, theta, x, y, *_ = mlp_setup()
        g = unlearn.forget_gradient(spec, theta, x[0], y[0], 10)
        np.testing.assert_allclose(g, models.per_sample_gradient(spec, theta, x[0], y[0]) / 10, atol=1e-15)


class TestMcWinu:
    def config(self, **kw):
        base = dict(method=unlearn.MC_WINU, n=120, lam=0.01, mc_samples=8, seed=3)
        base.update(kw)
        return unlearn.UnlearnConfig(**base)

    def test_enumerated_bank_matches_output_space(self):
        spec, theta, x, y, lam, _, h = mlp_setup()
        idx = np.arange(2)
        oh = curv.CurvatureOracle.exact(h)
        bank = curv.enumerated_gradient_bank(spec, theta, x[idx])
        mc = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config(), bank=bank)
        ref = unlearn.winu_output_space(spec, theta, oh, x[idx], y[idx], 120)
        assert np.linalg.norm(mc.delta - ref.delta) / np.linalg.norm(ref.delta) <= 1e-6

    def test_eta_zero_and_linearity(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        oh = curv.CurvatureOracle.exact(h)
        one = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config())
        zero = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config(eta=0.0))
        half = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config(eta=0.5))
        assert not zero.delta.any()
        np.testing.assert_allclose(half.delta, 0.5 * one.delta, rtol=1e-14, atol=0)
        np.testing.assert_allclose(one.scaled(0.5).delta, half.delta, rtol=1e-14, atol=0)

    def test_seed_determinism(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        oh = curv.CurvatureOracle.exact(h)
        a = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config())
        b = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config())
        c = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config(seed=4))
        np.testing.assert_array_equal(a.delta, b.delta)
        assert not np.array_equal(a.delta, c.delta)

    def test_against_dense_woodbury(self):
        # (H - (1/(nS)) G G^T)^{-1} g_f assembled densely
        spec, theta, x, y, lam, idx, h = mlp_setup()
        bank = curv.mc_gradient_bank(spec, theta, x[idx], 8, 3)
        upd = unlearn.mc_winu(spec, theta, curv.CurvatureOracle.exact(h), x[idx], y[idx], self.config(), bank=bank)
        g = unlearn.forget_gradient(spec, theta, x[idx], y[idx], 120)
        hm = h - bank.columns @ bank.columns.T / (120 * 8)
        np.testing.assert_allclose(upd.delta, gauss_jordan_inverse(hm) @ g, rtol=1e-8, atol=1e-12)

    def test_subspace(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        proj = unlearn.SubspaceProjection.random(spec.num_params, 10, 0)
        p = proj.basis
        upd = unlearn.mc_winu(
            spec, theta, curv.CurvatureOracle.exact(p.T @ h @ p), x[idx], y[idx], self.config(subspace=proj)
        )
        # delta lies in span(P)
        np.testing.assert_allclose(p @ (p.T @ upd.delta), upd.delta, atol=1e-12)
        bank = curv.mc_gradient_bank(spec, theta, x[idx], 8, 3)
        gs = p.T @ bank.columns
        g = p.T @ unlearn.forget_gradient(spec, theta, x[idx], y[idx], 120)
        ref = p @ (gauss_jordan_inverse(p.T @ h @ p - gs @ gs.T / (120 * 8)) @ g)
        np.testing.assert_allclose(upd.delta, ref, rtol=1e-8, atol=1e-12)

    def test_full_subspace_is_identity(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        d = spec.num_params
        eye = unlearn.SubspaceProjection(np.eye(d))
        oh = curv.CurvatureOracle.exact(h)
        a = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config(subspace=eye))
        b = unlearn.mc_winu(spec, theta, oh, x[idx], y[idx], self.config())
        np.testing.assert_allclose(a.delta, b.delta, rtol=1e-12, atol=1e-15)

    def test_diagonal_proxy(self):
        spec, theta, x, y, lam, idx, h = mlp_setup()
        diag = curv.diagonal_ggn(spec, theta, x, lam)
        upd = unlearn.mc_winu(spec, theta, curv.CurvatureOracle.diagonal(diag, lam), x[idx], y[idx], self.config())
        bank = curv.mc_gradient_bank(spec, theta, x[idx], 8, 3)
        g = unlearn.forget_gradient(spec, theta, x[idx], y[idx], 120)
        ref = gauss_jordan_inverse(np.diag(diag) - bank.columns @ bank.columns.T / 960) @ g
        np.testing.assert_allclose(upd.delta, ref, rtol=1e-8, atol=1e-12)

    def test_wrong_loss(self, rng):
        x, y, _ = ridge_problem(rng)
        with pytest.raises(WrongLossKind):
            unlearn.mc_winu(
                ModelSpec.ridge(8), np.zeros(8), curv.CurvatureOracle.exact(np.eye(8)), x[:3], y[:3], self.config()
            )


@pytest.fixture(scope="module")
def tiny():
    """Two-class MLP with d = 12."""
    x, y = blobs(60, 2, 2, seed=4)
    spec = ModelSpec.mlp(2, 2, 2)
    theta = oracle.train_mlp(spec, x, y, 0.05, SMALL_RECIPE)
    return spec, theta, x, y, 0.05


class TestExtensions:
    def parts(self, tiny, m=3):
        spec, theta, x, y, lam = tiny
        n = x.shape[0]
        idx = np.arange(m)
        h = dense_ggn(spec, theta, x, lam)
        h_f = dense_ggn(spec, theta, x[idx], 0.0, n=n)
        g_f = unlearn.forget_gradient(spec, theta, x[idx], y[idx], n)
        return spec, theta, x[idx], y[idx], n, h, h_f, g_f

    def test_gamma_zero_bit_identical(self, tiny):
        spec, theta, xf, yf, n, h, *_ = self.parts(tiny)
        oh = curv.CurvatureOracle.exact(h)
        base = unlearn.winu_output_space(spec, theta, oh, xf, yf, n)
        fm = unlearn.apply_extension(spec, theta, oh, xf, yf, n, unlearn.ObjectiveExtension("forget_maximize", 0.0))
        to = unlearn.apply_extension(
            spec, theta, oh, xf, yf, n, unlearn.ObjectiveExtension("target_output", 0.0, np.ones(3, int))
        )
        np.testing.assert_array_equal(fm.delta, base.delta)
        np.testing.assert_array_equal(to.delta, base.delta)

    @pytest.mark.parametrize("gamma", [0.1, 0.5, 2.0])
    def test_forget_maximize_dense_newton(self, tiny, gamma):
        spec, theta, xf, yf, n, h, h_f, g_f = self.parts(tiny)
        upd = unlearn.apply_extension(
            spec, theta, curv.CurvatureOracle.exact(h), xf, yf, n, unlearn.ObjectiveExtension("forget_maximize", gamma)
        )
        ref = gauss_jordan_inverse(h - (1 + gamma) * h_f) @ ((1 + gamma) * g_f)
        assert np.linalg.norm(upd.delta - ref) / np.linalg.norm(ref) <= 1e-6

    @pytest.mark.parametrize("gamma", [0.1, 0.5, 2.0])
    def test_target_output_default_form(self, tiny, gamma):
        spec, theta, xf, yf, n, h, h_f, g_f = self.parts(tiny)
        targets = 1 - yf
        upd = unlearn.apply_extension(
            spec, theta, curv.CurvatureOracle.exact(h), xf, yf, n,
            unlearn.ObjectiveExtension("target_output", gamma, targets),
        )
        g_hat = unlearn.forget_gradient(spec, theta, xf, targets, n)
        ref = gauss_jordan_inverse(h - h_f) @ (g_f - gamma * g_hat)
        assert np.linalg.norm(upd.delta - ref) / np.linalg.norm(ref) <= 1e-6

    @pytest.mark.parametrize("gamma", [0.1, 0.5, 2.0])
    def test_target_output_exact_newton(self, tiny, gamma):
        # Newton step on L - L_f + (gamma/n) sum loss(x_j, t_j) with its own GGN
        spec, theta, xf, yf, n, h, h_f, g_f = self.parts(tiny)
        targets = 1 - yf
        hess = h - h_f + gamma * h_f
        grad = -g_f + gamma * unlearn.forget_gradient(spec, theta, xf, targets, n)
        ref = -gauss_jordan_inverse(hess) @ grad
        upd = unlearn.apply_extension(
            spec, theta, curv.CurvatureOracle.exact(h), xf, yf, n,
            unlearn.ObjectiveExtension("target_output", gamma, targets, target_curvature=True),
        )
        assert np.linalg.norm(upd.delta - ref) / np.linalg.norm(ref) <= 1e-6

    def test_target_equal_labels_gamma_one_is_noop(self, tiny):
        spec, theta, xf, yf, n, h, *_ = self.parts(tiny)
        upd = unlearn.apply_extension(
            spec, theta, curv.CurvatureOracle.exact(h), xf, yf, n, unlearn.ObjectiveExtension("target_output", 1.0, yf)
        )
        np.testing.assert_allclose(upd.delta, 0, atol=1e-15)

    def test_mc_forget_maximize(self, tiny):
        spec, theta, xf, yf, n, h, h_f, g_f = self.parts(tiny)
        bank = curv.enumerated_gradient_bank(spec, theta, xf)
        cfg = unlearn.UnlearnConfig(unlearn.MC_WINU, n, 0.05)
        upd = unlearn.mc_winu(
            spec, theta, curv.CurvatureOracle.exact(h), xf, yf, cfg, unlearn.ObjectiveExtension("forget_maximize", 0.5), bank
        )
        ref = gauss_jordan_inverse(h - 1.5 * h_f) @ (1.5 * g_f)
        np.testing.assert_allclose(upd.delta, ref, rtol=1e-6, atol=1e-12)

    def test_validation(self):
        with pytest.raises(MissingTargets):
            unlearn.ObjectiveExtension("target_output", 0.5)
        with pytest.raises(ConfigError):
            unlearn.ObjectiveExtension("forget_maximize", -1.0)
        with pytest.raises(ConfigError):
            unlearn.ObjectiveExtension("bogus")


class TestConvergenceGuard:
    def test_silent_when_converged(self, recwarn):
        unlearn.check_convergence(1e-8)
        unlearn.check_convergence(None)
        assert not recwarn.list

    def test_warns(self):
        with pytest.warns(RuntimeWarning):
            unlearn.check_convergence(1e-4)

    def test_refuses(self):
        with pytest.raises(NotConverged) as info:
            unlearn.check_convergence(0.1)
        assert info.value.grad_norm == 0.1
        with pytest.warns(RuntimeWarning):
            unlearn.check_convergence(0.1, force=True)


class TestContainers:
    def test_subspace_orthonormality(self):
        p = unlearn.SubspaceProjection.random(30, 7, 5)
        np.testing.assert_allclose(p.basis.T @ p.basis, np.eye(7), atol=1e-12)
        np.testing.assert_array_equal(p.basis, unlearn.SubspaceProjection.random(30, 7, 5).basis)
        with pytest.raises(ConfigError):
            unlearn.SubspaceProjection(np.ones((4, 2)))
        with pytest.raises(ConfigError):
            unlearn.SubspaceProjection(np.eye(3, 4))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            unlearn.UnlearnConfig("nope", 10, 0.1)
        with pytest.raises(ConfigError):
            unlearn.UnlearnConfig(unlearn.WINU_OUTPUT_SPACE, 10, 0.0)
        with pytest.raises(ConfigError):
            unlearn.UnlearnConfig(unlearn.MC_WINU, 10, 0.1, mc_samples=0)

    def test_update_save_load(self, tmp_path):
        upd = unlearn.UnlearnUpdate(np.arange(5.0), unlearn.Diagnostics("winu_output_space", 6, 12.5, None))
        path = upd.save(tmp_path / "u.winu", {"seed": 1})
        back = unlearn.UnlearnUpdate.load(path)
        np.testing.assert_array_equal(back.delta, upd.delta)
        assert back.diagnostics == upd.diagnostics

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            unlearn.UnlearnUpdate(np.array([np.nan]))

    def test_apply(self):
        upd = unlearn.UnlearnUpdate(np.ones(3))
        np.testing.assert_array_equal(upd.apply(np.zeros(3), 2.0), [2.0, 2.0, 2.0])

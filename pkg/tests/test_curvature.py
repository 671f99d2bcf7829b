import numpy as np
import pytest

from winu import curvature as curv
from winu import models
from winu.errors import DimensionTooLarge, EmptyForgetSet, WrongLossKind
from winu.linalg import LinearOperator
from winu.models import ModelSpec

from _oracles import dense_ggn, explicit_jacobian, softmax_hessian
from conftest import needs_mnist

MLP = ModelSpec.mlp(4, 3, 3)


def mlp_setup(seed=0, n=12):
    rng = np.random.default_rng(seed)
    theta = models.init_params(MLP, seed) + 0.3 * rng.standard_normal(MLP.num_params)
    x = rng.standard_normal((n, 4))
    return theta, x, rng


class TestFullHessian:
    def test_ridge_closed_form(self, rng):
        x = rng.standard_normal((30, 5))
        spec = ModelSpec.ridge(5)
        h = curv.full_hessian_exact(spec, np.zeros(5), x, 0.1)
        np.testing.assert_allclose(h, x.T @ x / 30 + 0.1 * np.eye(5), atol=1e-14)

    def test_single_sample(self):
        h = curv.full_hessian_exact(ModelSpec.ridge(2), np.zeros(2), np.array([[1.0, 0.0]]), 0.0)
        np.testing.assert_array_equal(h, [[1.0, 0.0], [0.0, 0.0]])

    def test_mlp_against_explicit_jacobians(self):
        theta, x, _ = mlp_setup()
        np.testing.assert_allclose(
            curv.full_hessian_exact(MLP, theta, x, 0.05), dense_ggn(MLP, theta, x, 0.05), atol=1e-12
        )

    def test_guard(self):
        with pytest.raises(DimensionTooLarge):
            curv.full_hessian_exact(ModelSpec.ridge(20_001), np.zeros(20_001), np.zeros((1, 20_001)), 1.0)

    @needs_mnist
    def test_mnist_samples_materialized_matches_products(self):
        from winu.data import load_mnist

        data = load_mnist("test").subset(np.arange(5))
        x = data.features / 255.0
        spec = ModelSpec.mlp(784, 3, 10)
        theta = models.init_params(spec, 0)
        h = curv.full_hessian_exact(spec, theta, x, 0.01)
        v = np.random.default_rng(0).standard_normal(spec.num_params)
        hv = curv.ggn_vector_product(spec, theta, x, 0.01, v)
        np.testing.assert_allclose(h @ v, hv, rtol=1e-8, atol=1e-10)


class TestGgnProducts:
    def test_zero_vector(self):
        theta, x, _ = mlp_setup()
        assert not curv.ggn_vector_product(MLP, theta, x, 0.0, np.zeros(MLP.num_params)).any()

    def test_ridge_dense(self, rng):
        x = rng.standard_normal((40, 6))
        v = rng.standard_normal(6)
        out = curv.ggn_vector_product(ModelSpec.ridge(6), np.zeros(6), x, 0.2, v)
        np.testing.assert_allclose(out, (x.T @ x / 40 + 0.2 * np.eye(6)) @ v, rtol=1e-10)

    def test_symmetry(self):
        theta, x, rng = mlp_setup(1)
        u, v = rng.standard_normal((2, MLP.num_params))
        hu = curv.ggn_vector_product(MLP, theta, x, 0.01, u)
        hv = curv.ggn_vector_product(MLP, theta, x, 0.01, v)
        assert u @ hv == pytest.approx(v @ hu, rel=1e-9)

    def test_matches_dense(self):
        theta, x, rng = mlp_setup(2)
        v = rng.standard_normal(MLP.num_params)
        np.testing.assert_allclose(
            curv.ggn_vector_product(MLP, theta, x, 0.01, v), dense_ggn(MLP, theta, x, 0.01) @ v, atol=1e-12
        )

    def test_positive_definite_ritz_values(self):
        theta, x, rng = mlp_setup(3, n=50)
        lam = 0.01
        op = curv.ggn_operator(MLP, theta, x, lam)
        # 30 steps of Lanczos with full reorthogonalization
        d = MLP.num_params
        q = rng.standard_normal(d)
        qs = [q / np.linalg.norm(q)]
        alphas, betas = [], []
        for k in range(30):
            w = op(qs[-1])
            alphas.append(qs[-1] @ w)
            for prev in qs:
                w = w - (prev @ w) * prev
            b = np.linalg.norm(w)
            if b < 1e-12:
                break
            betas.append(b)
            qs.append(w / b)
        t = np.diag(alphas) + np.diag(betas[: len(alphas) - 1], 1) + np.diag(betas[: len(alphas) - 1], -1)
        assert np.linalg.eigvalsh(t).min() >= lam * (1 - 1e-6)


class TestForgetCurvature:
    def test_full_forget_set(self):
        theta, x, rng = mlp_setup(4)
        v = rng.standard_normal(MLP.num_params)
        np.testing.assert_allclose(
            curv.forget_ggn_vector_product(MLP, theta, x, v, x.shape[0]),
            curv.ggn_vector_product(MLP, theta, x, 0.0, v),
            atol=1e-13,
        )

    def test_ridge_rank_one(self, rng):
        xf = rng.standard_normal(3)
        v = rng.standard_normal(3)
        out = curv.forget_ggn_vector_product(ModelSpec.ridge(3), np.zeros(3), xf[None], v, 50)
        np.testing.assert_allclose(out, xf * (xf @ v) / 50)

    def test_complement(self):
        theta, x, rng = mlp_setup(5, n=20)
        n = x.shape[0]
        forget = np.array([1, 4, 9])
        retain = np.setdiff1d(np.arange(n), forget)
        v = rng.standard_normal(MLP.num_params)
        full = curv.ggn_vector_product(MLP, theta, x, 0.0, v)
        fgt = curv.forget_ggn_vector_product(MLP, theta, x[forget], v, n)
        direct = dense_ggn(MLP, theta, x[retain], 0.0, n=n) @ v
        np.testing.assert_allclose(full - fgt, direct, atol=1e-10)

    def test_retain_operator(self):
        theta, x, rng = mlp_setup(6, n=20)
        n = x.shape[0]
        forget = np.array([0, 3])
        retain = np.setdiff1d(np.arange(n), forget)
        v = rng.standard_normal(MLP.num_params)
        op = curv.retain_operator(MLP, theta, x, forget, 0.1)
        np.testing.assert_allclose(op(v), dense_ggn(MLP, theta, x[retain], 0.1, n=n) @ v, atol=1e-9)

    def test_forget_exact_matches_products(self):
        theta, x, rng = mlp_setup(7)
        hf = curv.forget_hessian_exact(MLP, theta, x[:3], 12)
        v = rng.standard_normal(MLP.num_params)
        np.testing.assert_allclose(hf @ v, curv.forget_ggn_vector_product(MLP, theta, x[:3], v, 12), atol=1e-13)

    def test_empty(self):
        theta, x, _ = mlp_setup()
        with pytest.raises(EmptyForgetSet):
            curv.forget_ggn_vector_product(MLP, theta, x[:0], np.zeros(MLP.num_params), 5)


class TestDiagonal:
    def test_ridge(self, rng):
        x = rng.standard_normal((25, 4))
        np.testing.assert_allclose(
            curv.diagonal_ggn(ModelSpec.ridge(4), np.zeros(4), x, 0.3), (x**2).sum(axis=0) / 25 + 0.3
        )

    def test_matches_dense_diagonal(self):
        theta, x, _ = mlp_setup(8)
        h = curv.full_hessian_exact(MLP, theta, x, 0.01)
        d = curv.diagonal_ggn(MLP, theta, x, 0.01)
        np.testing.assert_allclose(d, np.diag(h), atol=1e-10)
        assert np.all(d >= 0.01)

    def test_zero_data(self):
        np.testing.assert_array_equal(curv.diagonal_ggn(MLP, np.zeros(MLP.num_params), np.zeros((0, 4)), 1.0), 1.0)

    def test_subspace(self):
        theta, x, rng = mlp_setup(9)
        basis, _ = np.linalg.qr(rng.standard_normal((MLP.num_params, 5)))
        h = curv.full_hessian_exact(MLP, theta, x, 0.01)
        d = curv.diagonal_ggn(MLP, theta, x, 0.01, basis=basis)
        np.testing.assert_allclose(d, np.diag(basis.T @ h @ basis), atol=1e-10)


class TestOracle:
    def test_modes_agree(self, rng):
        theta, x, _ = mlp_setup(10)
        h = curv.full_hessian_exact(MLP, theta, x, 0.05)
        b = rng.standard_normal(MLP.num_params)
        exact = curv.CurvatureOracle.exact(h)
        free = curv.CurvatureOracle.matrix_free(curv.ggn_operator(MLP, theta, x, 0.05), rel_tol=1e-12)
        np.testing.assert_allclose(free.solve(b), exact.solve(b), rtol=1e-8, atol=1e-10)
        cols = rng.standard_normal((MLP.num_params, 3))
        x_cols, iters = free.solve_counted(cols)
        assert iters > 0
        np.testing.assert_allclose(x_cols, exact.solve(cols), rtol=1e-8, atol=1e-10)

    def test_diagonal_rejects_small_entries(self):
        with pytest.raises(ValueError):
            curv.CurvatureOracle.diagonal(np.array([0.5, 0.001]), 0.01)

    def test_persistence(self, tmp_path, rng):
        a = rng.standard_normal((6, 6))
        h = a @ a.T + np.eye(6)
        o = curv.CurvatureOracle.exact(h)
        o.save(tmp_path / "h.winu")
        back = curv.CurvatureOracle.load(tmp_path / "h.winu")
        b = rng.standard_normal(6)
        np.testing.assert_array_equal(back.solve(b), o.solve(b))
        d = curv.CurvatureOracle.diagonal(np.array([1.0, 2.0]), 0.5)
        d.save(tmp_path / "d.winu")
        np.testing.assert_array_equal(curv.CurvatureOracle.load(tmp_path / "d.winu").solve(np.ones(2)), [1.0, 0.5])

    def test_matrix_free_not_persistable(self, tmp_path):
        o = curv.CurvatureOracle.matrix_free(LinearOperator.from_matrix(np.eye(2)))
        with pytest.raises(ValueError):
            o.save(tmp_path / "x.winu")


class TestMonteCarloBank:
    def test_one_hot_predictions_give_zero_columns(self, rng):
        theta = np.zeros(MLP.num_params)
        theta[-3] = 1000.0  # b2 = (1000, 0, 0): p is exactly e_0
        bank = curv.mc_gradient_bank(MLP, theta, rng.standard_normal((3, 4)), 5, seed=0)
        assert bank.columns.shape == (MLP.num_params, 15)
        assert not bank.columns.any()

    def test_two_class_enumeration(self, rng):
        spec = ModelSpec.mlp(3, 2, 2)
        bank = curv.mc_gradient_bank(spec, np.zeros(spec.num_params), rng.standard_normal((4, 3)), 50, seed=1)
        b2 = bank.columns[-2:]
        assert not bank.columns[:-2].any()
        seen = {tuple(col) for col in b2.T}
        assert seen <= {(0.5, -0.5), (-0.5, 0.5)}
        assert len(seen) == 2

    def test_deterministic(self):
        theta, x, _ = mlp_setup(11)
        a = curv.mc_gradient_bank(MLP, theta, x[:4], 8, seed=7)
        b = curv.mc_gradient_bank(MLP, theta, x[:4], 8, seed=7)
        np.testing.assert_array_equal(a.columns, b.columns)
        c = curv.mc_gradient_bank(MLP, theta, x[:4], 8, seed=8)
        assert not np.array_equal(a.columns, c.columns)

    def test_column_order(self):
        theta, x, _ = mlp_setup(12)
        bank = curv.mc_gradient_bank(MLP, theta, x[:3], 4, seed=2)
        labels = curv.sample_pseudo_labels(models.softmax(models.forward(MLP, theta, x[:3])), 4, 2)
        for j in range(3):
            p = models.softmax(models.forward(MLP, theta, x[j]))
            for s in range(4):
                r = p.copy()
                r[labels[j, s]] -= 1
                expect = models.vector_jacobian_product(MLP, theta, x[j], r)
                np.testing.assert_allclose(bank.columns[:, j * 4 + s], expect, atol=1e-14)

    def test_pseudo_label_frequencies(self):
        p = np.array([[0.2, 0.5, 0.3]])
        labels = curv.sample_pseudo_labels(p, 20000, seed=3)
        freq = np.bincount(labels[0], minlength=3) / 20000
        np.testing.assert_allclose(freq, p[0], atol=0.015)

    def test_wrong_loss(self):
        with pytest.raises(WrongLossKind):
            curv.mc_gradient_bank(ModelSpec.ridge(2), np.zeros(2), np.ones((1, 2)), 2, 0)

    def test_empty_bank_is_zero_operator(self):
        bank = curv.McGradientBank(np.zeros((7, 0)), 3, 0, 0)
        op = curv.mc_ggn_estimate(bank, 10)
        assert not op(np.ones(7)).any()

    def test_persistence(self, tmp_path):
        theta, x, _ = mlp_setup(13)
        bank = curv.mc_gradient_bank(MLP, theta, x[:2], 3, seed=4)
        bank.save(tmp_path / "b.winu")
        back = curv.McGradientBank.load(tmp_path / "b.winu")
        np.testing.assert_array_equal(back.columns, bank.columns)
        assert (back.sample_count, back.forget_size, back.seed) == (3, 2, 4)


class TestMonteCarloExpectation:
    def test_enumerated_identity_generic_jacobian(self, rng):
        # sum_k p_k J^T (p - e_k)(p - e_k)^T J == J^T (diag p - p p^T) J
        for _ in range(20):
            c, d = 3, 4
            j = rng.standard_normal((c, d))
            p = models.softmax(rng.standard_normal(c))
            acc = sum(p[k] * np.outer(j.T @ (p - np.eye(c)[k]), j.T @ (p - np.eye(c)[k])) for k in range(c))
            np.testing.assert_allclose(acc, j.T @ softmax_hessian(p) @ j, atol=1e-12)

    def test_enumerated_bank_equals_forget_ggn(self):
        theta, x, _ = mlp_setup(14)
        bank = curv.enumerated_gradient_bank(MLP, theta, x[:1])
        est = bank.columns @ bank.columns.T / (30 * bank.sample_count)
        exact = curv.forget_hessian_exact(MLP, theta, x[:1], 30)
        np.testing.assert_allclose(est, exact, atol=1e-12)
        op = curv.mc_ggn_estimate(bank, 30)
        v = np.arange(MLP.num_params, dtype=float)
        np.testing.assert_allclose(op(v), exact @ v, atol=1e-11)

    def test_error_shrinks_like_inverse_sqrt(self):
        theta, x, _ = mlp_setup(15, n=20)
        xf = x[:5]
        n = 20
        exact = curv.forget_hessian_exact(MLP, theta, xf, n)
        sizes = [4, 16, 64, 256]
        errs = []
        for s in sizes:
            e = []
            for seed in range(8):
                bank = curv.mc_gradient_bank(MLP, theta, xf, s, seed)
                e.append(np.linalg.norm(bank.columns @ bank.columns.T / (n * s) - exact))
            errs.append(np.mean(e))
        slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
        assert -0.7 <= slope <= -0.3

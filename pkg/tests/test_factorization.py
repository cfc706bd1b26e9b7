import numpy as np
import pytest

from airmc.errors import ConfigError
from airmc.factorization import (
    FactorChain,
    ObjectiveConfig,
    air_objective,
    apply_mask,
    balanced_init,
    default_lambda,
    evaluate_objective,
    forward_product,
    gaussian_init,
    grad_chain,
    make_mask,
    mask_adjoint,
    path_laplacian,
    total_loss,
    tv_objective,
)
from airmc.linalg import svd
from airmc.regularizer import AdaptiveRegularizer, Transformation, reg_value
from airmc.verify import check_balancedness, finite_diff_grad


def naive_product(factors):
    """Oracle: explicit left-multiplication loop."""
    acc = factors[0]
    for f in factors[1:]:
        acc = f @ acc
    return acc


def full_mask(m, n):
    return make_mask(m, n, [(i, j) for i in range(m) for j in range(n)])


class TestMask:
    def test_row_major_order_and_dedup(self):
        mask = make_mask(2, 3, [(1, 2), (0, 0), (0, 2)])
        assert mask.observed_pairs() == [(0, 0), (0, 2), (1, 2)]
        with pytest.raises(ConfigError):
            make_mask(2, 3, [(0, 0), (0, 0)])

    def test_full_mask_flattens_row_major(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(apply_mask(full_mask(2, 3), x), x.reshape(-1))

    def test_single_entry(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(apply_mask(make_mask(2, 3, [(0, 0)]), x), [0.0])

    def test_random_mask_index_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 7))
        pairs = [(int(i), int(j)) for i, j in zip(rng.integers(0, 5, 12), rng.integers(0, 7, 12))]
        pairs = sorted(set(pairs))
        mask = make_mask(5, 7, pairs)
        expected = np.array([x[i, j] for i, j in mask.observed_pairs()])
        np.testing.assert_array_equal(apply_mask(mask, x), expected)

    def test_adjoint_identity_on_observed(self):
        rng = np.random.default_rng(1)
        mask = make_mask(4, 4, [(0, 1), (2, 3), (3, 0)])
        v = rng.standard_normal(mask.o)
        back = mask_adjoint(mask, v)
        np.testing.assert_array_equal(apply_mask(mask, back), v)
        assert np.count_nonzero(back) <= mask.o

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            make_mask(2, 2, [(2, 0)])


class TestForwardProduct:
    def test_single_factor(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(forward_product(FactorChain([x])), x)

    def test_scaled_identities(self):
        chain = FactorChain([2.0 * np.eye(2)] * 3)
        np.testing.assert_allclose(forward_product(chain), 8.0 * np.eye(2), atol=1e-12)

    def test_matches_naive_multiplication(self):
        rng = np.random.default_rng(2)
        factors = [rng.standard_normal((4, 6)), rng.standard_normal((3, 4)),
                   rng.standard_normal((5, 3))]
        chain = FactorChain(factors)
        assert np.max(np.abs(forward_product(chain) - naive_product(factors))) <= 1e-12

    def test_bracketing_invariance(self):
        rng = np.random.default_rng(3)
        f = [rng.standard_normal((4, 4)) for _ in range(4)]
        left = ((f[3] @ f[2]) @ f[1]) @ f[0]
        right = f[3] @ (f[2] @ (f[1] @ f[0]))
        mixed = (f[3] @ f[2]) @ (f[1] @ f[0])
        out = forward_product(FactorChain(f))
        for other in (left, right, mixed):
            assert np.max(np.abs(out - other)) <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            FactorChain([np.ones((2, 3)), np.ones((2, 4))])


class TestTotalLoss:
    def test_exact_fit_no_regularizers(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 3))
        mask = full_mask(3, 3)
        cfg = ObjectiveConfig(mask=mask, y=apply_mask(mask, x))
        loss, parts = total_loss(cfg, FactorChain([x]))
        assert loss == 0.0
        assert parts == {"fidelity": 0.0, "reg_row": 0.0, "reg_col": 0.0, "fixed": 0.0}

    def test_single_offset_entry(self):
        x = np.zeros((2, 2))
        mask = make_mask(2, 2, [(0, 0)])
        cfg = ObjectiveConfig(mask=mask, y=np.array([0.3]))
        loss, _ = total_loss(cfg, FactorChain([x]))
        assert loss == pytest.approx(0.5 * 0.3**2, rel=1e-15)

    def test_composition_oracle(self):
        rng = np.random.default_rng(5)
        m, n = 4, 5
        target = rng.standard_normal((m, n))
        mask = make_mask(m, n, [(i, j) for i in range(m) for j in range(n) if (i + j) % 2])
        y = apply_mask(mask, target)
        rr = AdaptiveRegularizer(w=rng.standard_normal((m, m)), transform=Transformation("row"), lam=0.3)
        cc = AdaptiveRegularizer(w=rng.standard_normal((n, n)), transform=Transformation("column"), lam=0.6)
        cfg = ObjectiveConfig(mask=mask, y=y, row_reg=rr, col_reg=cc)
        chain = FactorChain([rng.standard_normal((m, n))])
        loss, parts = total_loss(cfg, chain)
        xhat = forward_product(chain)
        r = apply_mask(mask, xhat) - y
        assert parts["fidelity"] == pytest.approx(0.5 * float(r @ r), rel=1e-14)
        assert parts["reg_row"] == pytest.approx(0.3 * reg_value(rr, xhat), rel=1e-12)
        assert parts["reg_col"] == pytest.approx(0.6 * reg_value(cc, xhat), rel=1e-12)
        assert loss == pytest.approx(sum(parts.values()), rel=1e-14)

    def test_vanilla_reduction_bitwise(self):
        # Zero-weight regularizers must not change the numbers at all.
        rng = np.random.default_rng(6)
        m, n = 4, 4
        target = rng.standard_normal((m, n))
        mask = make_mask(m, n, [(i, j) for i in range(m) for j in range(n) if (i * j) % 3 != 1])
        y = apply_mask(mask, target)
        chain = FactorChain([rng.standard_normal((m, n))])
        plain = ObjectiveConfig(mask=mask, y=y)
        zeroed = ObjectiveConfig(
            mask=mask,
            y=y,
            row_reg=AdaptiveRegularizer(w=rng.standard_normal((m, m)),
                                        transform=Transformation("row"), lam=0.0),
            col_reg=AdaptiveRegularizer(w=rng.standard_normal((n, n)),
                                        transform=Transformation("column"), lam=0.0),
        )
        l0, _ = total_loss(plain, chain)
        l1, _ = total_loss(zeroed, chain)
        assert l0 == l1
        g0, _ = grad_chain(plain, chain)
        g1, _ = grad_chain(zeroed, chain)
        for a, b in zip(g0, g1):
            assert np.array_equal(a, b)


class TestGradChain:
    def test_depth_one_adjoint(self):
        rng = np.random.default_rng(7)
        m, n = 3, 4
        mask = make_mask(m, n, [(0, 1), (2, 2)])
        x = rng.standard_normal((m, n))
        cfg = ObjectiveConfig(mask=mask, y=np.zeros(mask.o))
        grads, _ = grad_chain(cfg, FactorChain([x]))
        expected = np.zeros((m, n))
        expected[0, 1] = x[0, 1]
        expected[2, 2] = x[2, 2]
        np.testing.assert_array_equal(grads[0], expected)

    def test_zero_at_exact_fit(self):
        rng = np.random.default_rng(8)
        f = [rng.standard_normal((3, 3)) for _ in range(2)]
        chain = FactorChain(f)
        mask = full_mask(3, 3)
        cfg = ObjectiveConfig(mask=mask, y=apply_mask(mask, forward_product(chain)))
        grads, _ = grad_chain(cfg, chain)
        for g in grads:
            assert np.max(np.abs(g)) <= 1e-12

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_finite_difference_all_blocks(self, depth):
        rng = np.random.default_rng(80 + depth)
        m, n = 4, 5
        target = rng.standard_normal((m, n))
        mask = make_mask(m, n, [(i, j) for i in range(m) for j in range(n) if (i + 2 * j) % 3])
        y = apply_mask(mask, target)
        rr = AdaptiveRegularizer(w=0.5 * rng.standard_normal((m, m)),
                                 transform=Transformation("row"), lam=0.25)
        cc = AdaptiveRegularizer(w=0.5 * rng.standard_normal((n, n)),
                                 transform=Transformation("column"), lam=0.45)
        cfg = ObjectiveConfig(mask=mask, y=y, row_reg=rr, col_reg=cc,
                              fixed_laps=[(path_laplacian(m), "row", 0.1)])
        width = min(m, n)
        dims = [n] + [width] * (depth - 1) + [m]
        chain = FactorChain([0.6 * rng.standard_normal((dims[l + 1], dims[l]))
                             for l in range(depth)])
        ev = evaluate_objective(cfg, chain, with_grads=True)
        analytic = list(ev.factor_grads) + [ev.w_row_grad, ev.w_col_grad]

        def f(ps):
            for l in range(depth):
                chain.factors[l] = ps[l]
            rr.w = ps[depth]
            cc.w = ps[depth + 1]
            return evaluate_objective(cfg, chain, with_grads=False).loss

        fd = finite_diff_grad(f, list(chain.factors) + [rr.w, cc.w], step=1e-5)
        for a, b in zip(analytic, fd):
            assert np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12) <= 1e-5


class TestInits:
    def test_gaussian_moments(self):
        chain, _, _ = gaussian_init(240, 240, depth=1, variance=1e-5, seed=0)
        draws = chain.factors[0].reshape(-1)
        stderr = np.sqrt(1e-5 / draws.size)
        assert abs(draws.mean()) <= 4 * stderr
        assert abs(draws.var() - 1e-5) <= 0.1 * 1e-5

    def test_gaussian_deterministic(self):
        a, wr_a, wc_a = gaussian_init(6, 5, depth=3, seed=42, row_w=True, col_w=True)
        b, wr_b, wc_b = gaussian_init(6, 5, depth=3, seed=42, row_w=True, col_w=True)
        for fa, fb in zip(a.factors, b.factors):
            assert np.array_equal(fa, fb)
        assert np.array_equal(wr_a, wr_b) and np.array_equal(wc_a, wc_b)

    def test_gaussian_shapes(self):
        chain, _, _ = gaussian_init(5, 7, depth=3, width=4, seed=1)
        assert [f.shape for f in chain.factors] == [(4, 7), (4, 4), (5, 4)]
        assert chain.shape == (5, 7)

    def test_balanced_residual_and_spectrum(self):
        s = np.array([2.0, 1.0, 0.5, 0.25, 0.1])
        for depth in (2, 3, 4):
            chain = balanced_init(6, 5, depth, s, seed=depth)
            assert check_balancedness(chain) <= 1e-10
            np.testing.assert_allclose(svd(forward_product(chain)).sigma, s, atol=1e-9)

    def test_balanced_depth_one(self):
        s = np.array([3.0, 1.5, 0.2])
        chain = balanced_init(4, 3, 1, s, seed=0)
        np.testing.assert_allclose(svd(chain.factors[0]).sigma, s, atol=1e-12)

    def test_balanced_rejects_negative(self):
        with pytest.raises(ConfigError):
            balanced_init(3, 3, 2, np.array([1.0, -0.1, 0.5]))

    def test_transpose_pair_exactly_balanced(self):
        rng = np.random.default_rng(9)
        w0 = rng.standard_normal((4, 4))
        assert check_balancedness(FactorChain([w0, w0.T])) == 0.0


class TestBuilders:
    def test_default_lambda_rule(self):
        y = np.array([0.0, 2.0, 1.0])
        assert default_lambda(y, 4, 5) == pytest.approx(2.0 / 20.0)

    def test_air_objective_wiring(self):
        mask = full_mask(3, 4)
        y = np.linspace(0, 1, mask.o)
        obj = air_objective(mask, y)
        assert obj.row_reg.w.shape == (3, 3)
        assert obj.col_reg.w.shape == (4, 4)
        lam = default_lambda(y, 3, 4)
        assert obj.row_reg.lam == lam and obj.col_reg.lam == lam

    def test_tv_objective_wiring(self):
        mask = full_mask(3, 4)
        obj = tv_objective(mask, np.zeros(mask.o), weight_row=0.5, weight_col=0.25)
        (lr, sr, wr), (lc, sc, wc) = obj.fixed_laps
        assert sr == "row" and sc == "column"
        assert wr == 0.5 and wc == 0.25
        assert np.max(np.abs(lr.sum(axis=1))) == 0.0

    def test_path_laplacian_psd(self):
        lap = path_laplacian(6)
        vals = np.linalg.eigvalsh(lap)
        assert vals.min() >= -1e-12

import numpy as np
import pytest

import pgmatch.autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


class TestForwardOps:
    def test_sigmoid_symmetry_point(self):
        out = ad.sigmoid(ad.Tensor([0.0]))
        np.testing.assert_allclose(out.values, [0.5])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x))
        np.testing.assert_array_equal(out.values, x)

    def test_softmax_uniform_logits(self):
        out = ad.softmax(ad.Tensor([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.values, [1 / 3] * 3)

    def test_softmax_simplex_property(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = ad.Tensor(rng.standard_normal((4, 6)) * rng.uniform(0.1, 50))
            s = ad.softmax(x, axis=1).values
            assert np.all(s >= 0)
            np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"add.*\(3,\).*\(4,\)"):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))

    def test_domain_errors(self):
        with pytest.raises(ad.DomainError):
            ad.log(ad.Tensor([1.0, -1.0]))
        with pytest.raises(ad.DomainError):
            ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))
        with pytest.raises(ad.DomainError):
            ad.sqrt(ad.Tensor([-2.0]))

    def test_finite_on_finite_inputs(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.standard_normal((5, 5)) * 30)
        for op in (ad.sigmoid, ad.tanh, ad.relu, ad.softplus, ad.exp, ad.square):
            assert np.all(np.isfinite(op(x).values)), op.__name__
        assert np.all(np.isfinite(ad.softmax(x, axis=1).values))

    def test_constants_stay_off_tape(self):
        before = len(ad.active_tape().records)
        ad.add(ad.constant([1.0]), ad.constant([2.0]))
        assert len(ad.active_tape().records) == before


class TestBackward:
    def test_linear_sum(self):
        x = ad.Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = ad.Tensor(rng.standard_normal((4, 3)))
        b = ad.Tensor(rng.standard_normal((3, 4)))

        def f(p, q):
            return ad.tsum(ad.tanh(ad.matmul(ad.sigmoid(ad.matmul(p, q)), p)))

        assert ad.grad_check(f, [a, b], eps=1e-5) < 1e-4

    def test_gradient_linearity(self):
        rng = np.random.default_rng(4)
        vals = rng.standard_normal(5)
        x = ad.Tensor(vals, requires_grad=True)
        ad.backward(ad.add(ad.tsum(ad.square(x)), ad.tmean(ad.sigmoid(x))))
        combined = x.grad.copy()

        ad.clear_tape()
        x.grad = None
        ad.backward(ad.tsum(ad.square(x)))
        ad.backward(ad.tmean(ad.sigmoid(x)))
        np.testing.assert_allclose(x.grad, combined, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.backward(ad.mul(x, x))

    def test_stale_tape_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        loss = ad.tsum(x)
        ad.clear_tape()
        with pytest.raises(ad.TapeError, match="stale"):
            ad.backward(loss)

    def test_double_backward_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        loss = ad.tsum(ad.square(x))
        ad.backward(loss)
        with pytest.raises(ad.TapeError, match="twice"):
            ad.backward(loss)

    def test_repeated_seeded_run_bit_identical(self):
        def run():
            ad.clear_tape()
            rng = np.random.default_rng(42)
            x = ad.Tensor(rng.standard_normal((6, 6)), requires_grad=True)
            y = ad.Tensor(rng.standard_normal((6, 6)))
            loss = ad.tsum(ad.sigmoid(ad.matmul(x, y)))
            ad.backward(loss)
            return loss.item(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestCosineSimilarityRows:
    def test_matches_normalized_oracle(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((4, 5))
        out = ad.cosine_similarity_rows(ad.Tensor(a), ad.Tensor(b)).values
        an = a / np.linalg.norm(a, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        np.testing.assert_allclose(out, an @ bn.T, atol=1e-9)
        assert np.all(np.abs(out) <= 1.0 + 1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        a = ad.Tensor(rng.standard_normal((2, 4)))
        b = ad.Tensor(rng.standard_normal((2, 4)))
        err = ad.grad_check(lambda p, q: ad.tsum(ad.square(ad.cosine_similarity_rows(p, q))),
                            [a, b])
        assert err < 1e-4


class TestGradCheck:
    def test_sigmoid_matmul(self):
        rng = np.random.default_rng(5)
        a = ad.Tensor(rng.standard_normal((3, 3)))
        b = ad.Tensor(rng.standard_normal((3, 3)))
        err = ad.grad_check(lambda p, q: ad.tsum(ad.sigmoid(ad.matmul(p, q))), [a, b])
        assert err < 1e-4

    def test_constant_function_zero_error(self):
        x = ad.Tensor([1.0, 2.0])
        err = ad.grad_check(lambda t: ad.tsum(ad.constant([3.0])), [x])
        assert err == 0.0


class TestAdam:
    def test_zero_grad_leaves_param_unchanged(self):
        p = ad.Tensor([1.5], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.zeros(1)
        opt.step()
        np.testing.assert_array_equal(p.values, [1.5])

    def test_missing_grad_rejected(self):
        p = ad.Tensor([1.5], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        with pytest.raises(ValueError, match="missing grad"):
            opt.step()

    def test_descends_against_constant_gradient(self):
        p = ad.Tensor([0.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.01)
        for _ in range(100):
            p.grad = np.array([2.5])
            opt.step()
        assert p.values[0] < 0.0

    def test_quadratic_bowl_convergence(self):
        p = ad.Tensor([0.0], requires_grad=True)
        opt = ad.Adam([p], lr=1e-2)
        target = ad.constant([5.0])
        for _ in range(5000):
            ad.clear_tape()
            loss = ad.tsum(ad.square(ad.sub(p, target)))
            ad.backward(loss)
            opt.step()
            if abs(p.values[0] - 5.0) < 1e-2:
                break
        assert abs(p.values[0] - 5.0) < 1e-2

    def test_grads_cleared_after_step(self):
        p = ad.Tensor([1.0], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.grad is None

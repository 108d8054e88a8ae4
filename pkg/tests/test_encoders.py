import numpy as np
import pytest

import pgmatch.autodiff as ad
from pgmatch.encoders import (
    GruParams,
    RegionSet,
    TokenSeq,
    embed_words,
    gcn_reason,
    gru_step,
    load_embedding_table,
    region_affinity,
)


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


def zero_gru(p, q):
    z = lambda *shape: ad.Tensor(np.zeros(shape))
    return GruParams(w_xz=z(p, q), w_hz=z(q, q), b_z=z(q),
                     w_xr=z(p, q), w_hr=z(q, q), b_r=z(q),
                     w_xc=z(p, q), w_hc=z(q, q), b_c=z(q))


class TestRegionTypes:
    def test_region_set_validation(self):
        with pytest.raises(ValueError):
            RegionSet(np.zeros(4))
        with pytest.raises(ValueError):
            RegionSet(np.array([[1.0, np.inf]]))
        rs = RegionSet(np.ones((3, 5)))
        assert rs.count == 3 and rs.dim == 5

    def test_token_seq_validation(self):
        with pytest.raises(ValueError):
            TokenSeq(np.array([], dtype=np.int64))
        ts = TokenSeq(np.array([1, 2, 1]))
        assert ts.length == 3


class TestRegionAffinity:
    def test_orthonormal_rows_identity_weights(self):
        f = ad.Tensor(np.eye(4)[:3])  # orthonormal rows
        eye = ad.Tensor(np.eye(4))
        out = region_affinity(f, eye, eye)
        np.testing.assert_allclose(out.values, np.eye(3), atol=1e-15)

    def test_zero_features(self):
        f = ad.Tensor(np.zeros((4, 6)))
        rng = np.random.default_rng(0)
        out = region_affinity(f, ad.Tensor(rng.standard_normal((6, 6))),
                              ad.Tensor(rng.standard_normal((6, 6))))
        np.testing.assert_array_equal(out.values, np.zeros((4, 4)))

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((4, 8))
        wa = rng.standard_normal((8, 8))
        wb = rng.standard_normal((8, 8))
        out = region_affinity(ad.Tensor(f), ad.Tensor(wa), ad.Tensor(wb))
        np.testing.assert_allclose(out.values, (f @ wa) @ (f @ wb).T, atol=1e-12)

    def test_tied_weights_symmetric_psd(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((5, 6))
        w = ad.Tensor(rng.standard_normal((6, 6)))
        out = region_affinity(ad.Tensor(f), w, w).values
        np.testing.assert_allclose(out, out.T, atol=1e-12)
        eigs = np.linalg.eigvalsh(out)
        assert eigs.min() > -1e-10


class TestGcnReason:
    def test_zero_graph_weight_is_identity(self):
        rng = np.random.default_rng(3)
        f = ad.Tensor(rng.standard_normal((4, 5)))
        rel = ad.Tensor(rng.standard_normal((4, 4)))
        out = gcn_reason(f, rel, ad.Tensor(np.zeros((5, 5))))
        np.testing.assert_array_equal(out.values, f.values)

    def test_single_region(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((1, 5))
        wg = rng.standard_normal((5, 5))
        out = gcn_reason(ad.Tensor(f), ad.Tensor(np.asarray([[2.0]])), ad.Tensor(wg))
        expect = f + np.maximum(0.0, f @ wg)  # row-softmax of a single entry is [1]
        np.testing.assert_allclose(out.values, expect, atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((5, 6))
        rel = rng.standard_normal((5, 5))
        wg = rng.standard_normal((6, 6))
        out = gcn_reason(ad.Tensor(f), ad.Tensor(rel), ad.Tensor(wg))
        e = np.exp(rel - rel.max(axis=1, keepdims=True))
        norm = e / e.sum(axis=1, keepdims=True)
        expect = f + np.maximum(0.0, norm @ f @ wg)
        np.testing.assert_allclose(out.values, expect, atol=1e-12)

    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        f = ad.Tensor(rng.standard_normal((7, 3)))
        rel = region_affinity(f, ad.Tensor(rng.standard_normal((3, 3))),
                              ad.Tensor(rng.standard_normal((3, 3))))
        assert gcn_reason(f, rel, ad.Tensor(rng.standard_normal((3, 3)))).shape == (7, 3)


class TestEmbedWords:
    def test_one_hot_table(self):
        table = ad.Tensor(np.eye(5))
        out = embed_words(np.array([3, 0, 3]), table)
        np.testing.assert_array_equal(out.values, np.eye(5)[[3, 0, 3]])

    def test_repeated_id_identical_rows(self):
        rng = np.random.default_rng(7)
        table = ad.Tensor(rng.standard_normal((6, 4)))
        out = embed_words(np.array([2, 2, 2]), table).values
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_gradient_accumulates_into_used_rows(self):
        table = ad.Tensor(np.zeros((5, 3)), requires_grad=True)
        out = embed_words(np.array([1, 1, 4]), table)
        ad.backward(ad.tsum(out))
        expect = np.zeros((5, 3))
        expect[1] = 2.0
        expect[4] = 1.0
        np.testing.assert_array_equal(table.grad, expect)

    def test_out_of_vocab(self):
        table = ad.Tensor(np.zeros((5, 3)))
        with pytest.raises(IndexError):
            embed_words(np.array([5]), table)


class TestGruStep:
    def test_zero_params_halve_hidden(self):
        params = zero_gru(3, 4)
        h = np.array([0.4, -0.2, 0.8, 0.0])
        out = gru_step(ad.Tensor(np.ones(3)), ad.Tensor(h), params)
        np.testing.assert_allclose(out.values, 0.5 * h, atol=1e-15)

    def test_copy_gate_limit(self):
        params = zero_gru(3, 4)
        params.b_z = ad.Tensor(np.full(4, -40.0))  # z -> 0 keeps the old state
        h = np.array([0.4, -0.2, 0.8, 0.1])
        out = gru_step(ad.Tensor(np.ones(3)), ad.Tensor(h), params)
        np.testing.assert_allclose(out.values, h, atol=1e-12)

    def test_bounded_output(self):
        # candidate is tanh-bounded, so the state stays inside (-1, 1)
        rng = np.random.default_rng(8)
        params = GruParams.init(5, 6, rng, scale=0.8)
        h = ad.Tensor(rng.uniform(-1, 1, 6))
        for _ in range(10):
            h = gru_step(ad.Tensor(rng.standard_normal(5)), h, params)
            assert np.all(np.abs(h.values) < 1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        params = GruParams.init(3, 3, rng)
        x = ad.Tensor(rng.standard_normal(3))
        h = ad.Tensor(0.5 * rng.standard_normal(3))
        err = ad.grad_check(lambda a, b: ad.tsum(ad.square(gru_step(a, b, params))), [x, h])
        assert err < 1e-4

    def test_shape_validation(self):
        params = zero_gru(3, 4)
        with pytest.raises(ad.ShapeError):
            gru_step(ad.Tensor(np.zeros(5)), ad.Tensor(np.zeros(4)), params)


class TestEmbeddingTableLoader:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("0 1.0 2.0\n2 -0.5 0.25\n")
        table = load_embedding_table(path, vocab_size=3, dim=2)
        np.testing.assert_array_equal(table, [[1.0, 2.0], [0.0, 0.0], [-0.5, 0.25]])

    def test_overrides_base(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("1 9.0 9.0\n")
        base = np.ones((2, 2))
        table = load_embedding_table(path, vocab_size=2, dim=2, base=base)
        np.testing.assert_array_equal(table, [[1.0, 1.0], [9.0, 9.0]])
        np.testing.assert_array_equal(base, np.ones((2, 2)))  # base untouched

    def test_malformed_rows(self, tmp_path):
        path = tmp_path / "emb.txt"
        path.write_text("0 1.0\n")
        with pytest.raises(ValueError, match="expected id"):
            load_embedding_table(path, vocab_size=2, dim=2)
        path.write_text("7 1.0 2.0\n")
        with pytest.raises(ValueError, match="outside"):
            load_embedding_table(path, vocab_size=2, dim=2)

import numpy as np
import pytest

from ndvad import dpu
from ndvad.dpu import LossWeights
from ndvad.errors import ConfigError, DimensionError, NumericError
from ndvad.ndtensor import Tensor, grad_check


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


class TestAttention:
    def test_zero_psi_and_zero_map(self):
        x = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_array_equal(dpu.attention(x, np.zeros((4, 3))).data, 0.5)
        np.testing.assert_array_equal(dpu.attention(np.zeros((6, 3)), np.ones((4, 3))).data, 0.5)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(1, 3, 2, 2))
        psi = np.array([[1.0, -2.0, 0.5], [0.0, 0.3, 0.1]])
        w = dpu.attention(dpu.map_to_vectors(Tensor(z)), psi).data[0]
        for i in range(2):
            for j in range(2):
                for m in range(2):
                    assert w[i * 2 + j, m] == pytest.approx(sigmoid(z[0, :, i, j] @ psi[m]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            dpu.attention(np.zeros((4, 3)), np.zeros((2, 5)))

    def test_param_count(self):
        assert dpu.attention_param_count(10, 128) == 1280
        assert dpu.init_attention(10, 128).shape == (10, 128)


class TestEnsemble:
    def test_uniform_weights_give_mean(self):
        x = np.random.default_rng(2).normal(size=(7, 3))
        p = dpu.ensemble(x, np.full((7, 2), 0.3)).data[0]
        np.testing.assert_allclose(p, np.tile(x.mean(axis=0), (2, 1)))

    def test_one_hot(self):
        x = np.random.default_rng(3).normal(size=(4, 3))
        w = np.zeros((4, 1))
        w[0] = 1.0
        np.testing.assert_allclose(dpu.ensemble(x, w).data[0, 0], x[0])

    def test_hand_example(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 2.0]])
        w = np.array([[1.0], [1.0], [2.0], [4.0]])
        np.testing.assert_allclose(dpu.ensemble(x, w).data[0, 0], [11 / 8, 11 / 8])

    def test_degenerate_weights(self):
        with pytest.raises(NumericError, match="degenerate"):
            dpu.ensemble(np.ones((3, 2)), np.zeros((3, 1)))


class TestRetrieve:
    @pytest.mark.parametrize("mode", ["softmax", "raw"])
    def test_single_prototype(self, mode):
        x = np.abs(np.random.default_rng(4).normal(size=(5, 3))) + 0.1
        p = np.array([[0.5, 1.0, 2.0]])
        xt, beta = dpu.retrieve(x, p, mode)
        np.testing.assert_allclose(beta.data, 1.0)
        np.testing.assert_allclose(xt.data[0], np.tile(p, (5, 1)))

    def test_orthonormal_argmax(self):
        p = np.eye(3)
        _, beta = dpu.retrieve(p[1:2], p)
        assert int(np.argmax(beta.data[0, 0])) == 1

    def test_raw_hand_example(self):
        xt, beta = dpu.retrieve(np.array([[2.0, 1.0]]), np.eye(2), "raw")
        np.testing.assert_allclose(beta.data[0, 0], [2 / 3, 1 / 3])
        np.testing.assert_allclose(xt.data[0, 0], [2 / 3, 1 / 3])

    def test_raw_degenerate_names_location(self):
        x = np.array([[1.0, 1.0], [1.0, -1.0]])
        with pytest.raises(NumericError, match="location 1"):
            dpu.retrieve(x, np.eye(2), "raw")

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            dpu.retrieve(np.ones((2, 2)), np.eye(2), "cosine")


class TestAggregate:
    def test_cases(self):
        rng = np.random.default_rng(5)
        x, xt = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
        np.testing.assert_array_equal(dpu.aggregate(x, np.zeros_like(x)).data, x)
        np.testing.assert_array_equal(dpu.aggregate(x, -x).data, 0.0)
        expected = np.empty_like(x)
        for idx in np.ndindex(x.shape):
            expected[idx] = x[idx] + xt[idx]
        np.testing.assert_array_equal(dpu.aggregate(x, xt).data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dpu.aggregate(np.zeros((2, 3)), np.zeros((3, 2)))


class TestForward:
    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        z = rng.normal(size=(2, 5, 3, 4))
        out = dpu.dpu_forward(z, rng.normal(size=(4, 5)))
        assert out.encoding.shape == z.shape
        assert out.prototypes.shape == (2, 4, 5)
        assert out.beta.shape == (2, 12, 4)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        z, psi = rng.normal(size=(1, 3, 2, 3)), rng.normal(size=(2, 3))
        assert grad_check(lambda z, psi: (dpu.dpu_forward(z, psi).encoding * np.arange(18).reshape(1, 3, 2, 3)).sum(),
                          [z, psi]) < 1e-5

    def test_prototypes_in_convex_hull_box(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(1, 4, 5, 5))
        out = dpu.dpu_forward(z, rng.normal(size=(6, 4)))
        v = dpu.map_to_vectors(Tensor(z)).data[0]
        p = out.prototypes.data[0]
        assert np.all(p >= v.min(axis=0) - 1e-12) and np.all(p <= v.max(axis=0) + 1e-12)

    def test_permuting_attention_permutes_prototypes(self):
        rng = np.random.default_rng(9)
        z, psi = rng.normal(size=(1, 4, 3, 3)), rng.normal(size=(5, 4))
        perm = np.array([3, 0, 4, 1, 2])
        a, b = dpu.dpu_forward(z, psi), dpu.dpu_forward(z, psi[perm])
        np.testing.assert_allclose(b.prototypes.data, a.prototypes.data[:, perm])
        np.testing.assert_allclose(b.beta.data, a.beta.data[:, :, perm])
        np.testing.assert_allclose(b.encoding.data, a.encoding.data)
        x = dpu.map_to_vectors(Tensor(z))
        assert dpu.loss_compact(x, b.prototypes, b.beta).item() == pytest.approx(
            dpu.loss_compact(x, a.prototypes, a.beta).item())
        assert dpu.loss_diverse(b.prototypes).item() == pytest.approx(dpu.loss_diverse(a.prototypes).item())


class TestLosses:
    def test_compact_zero_when_on_prototype(self):
        p = np.array([[[3.0, 0.0], [0.0, 3.0]]])
        x = np.array([[[3.0, 0.0], [0.0, 3.0], [3.0, 0.0]]])
        _, beta = dpu.retrieve(x, p)
        assert dpu.loss_compact(x, p, beta).item() == 0.0

    def test_compact_345(self):
        beta = np.ones((1, 1, 1))
        assert dpu.loss_compact(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]]), beta).item() == pytest.approx(5.0)

    def test_compact_loop_oracle(self):
        rng = np.random.default_rng(10)
        x, p = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        _, beta = dpu.retrieve(x, p)
        expected = np.mean([np.linalg.norm(xn - p[np.argmax(p @ xn)]) for xn in x])
        assert dpu.loss_compact(x, p, beta).item() == pytest.approx(expected)

    def test_argmax_ties_toward_smallest(self):
        assert dpu.most_relevant(np.array([[[0.5, 0.5], [0.2, 0.8]]])).tolist() == [[0, 1]]

    def test_argmax_index_is_constant(self):
        # gradient w.r.t. p: only the selected prototype receives (p* - x)/||p* - x||
        x = Tensor(np.array([[[3.0, 4.0]]]), requires_grad=True)
        p = Tensor(np.array([[[0.0, 0.0], [-10.0, 0.0]]]), requires_grad=True)
        beta = np.array([[[1.0, 0.0]]])
        from ndvad.ndtensor import grad

        gx, gp = grad(dpu.loss_compact(x, p, beta), [x, p])
        np.testing.assert_allclose(gx.data[0, 0], [0.6, 0.8])
        np.testing.assert_allclose(gp.data[0], [[-0.6, -0.8], [0.0, 0.0]])

    def test_diverse_cases(self):
        assert dpu.loss_diverse(np.array([[1.0, 2.0]])).item() == 0.0
        assert dpu.loss_diverse(np.array([[0.0, 0.0], [3.0, 0.0]])).item() == 0.0
        assert dpu.loss_diverse(np.array([[0.0, 0.0], [0.5, 0.0]]), gamma=1.0).item() == pytest.approx(0.5)

    def test_diverse_pair_oracle(self):
        p = np.random.default_rng(11).normal(scale=0.4, size=(5, 3))
        pairs = [max(0.0, 1.0 - np.linalg.norm(p[i] - p[j])) for i in range(5) for j in range(i + 1, 5)]
        assert dpu.loss_diverse(p).item() == pytest.approx(np.mean(pairs))

    def test_total_matches_terms(self):
        rng = np.random.default_rng(12)
        pred, target = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
        x = rng.normal(size=(2, 6, 3))
        p = dpu.ensemble(x, rng.uniform(0.1, 1, (2, 6, 4)))
        _, beta = dpu.retrieve(x, p)
        terms = dpu.loss_total(pred, target, x, p, beta, LossWeights(1.0, 0.01))
        l_fra = np.mean((pred - target) ** 2)
        l_c = dpu.loss_compact(x, p, beta).item()
        l_d = dpu.loss_diverse(p).item()
        assert terms.frame.item() == pytest.approx(l_fra)
        assert terms.total.item() == pytest.approx(l_fra + l_c + 0.01 * l_d)
        only = dpu.loss_total(pred, target, x, p, beta, LossWeights(lambda1=0.0))
        assert only.total.item() == only.frame.item()

    def test_total_zero_case(self):
        y = np.zeros((1, 1, 2, 2))
        p = np.array([[[0.0, 0.0], [2.0, 0.0]]])
        x = np.array([[[0.0, 0.0], [2.0, 0.0]]])
        _, beta = dpu.retrieve(x, p)
        assert dpu.loss_total(y, y, x, p, beta).total.item() == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda2=-1.0)


def test_dump_maps(tmp_path):
    w = np.random.default_rng(13).uniform(size=(1, 6, 3))
    paths = dpu.dump_maps(w, (2, 3), tmp_path, frame=7)
    assert [p.name for p in paths] == ["7_map0.pgm", "7_map1.pgm", "7_map2.pgm", "7_mapsum.pgm"]
    img = dpu.read_pgm(paths[0])
    assert img.shape == (2, 3) and img.min() == 0 and img.max() == 255
    assert np.argmax(img) == np.argmax(w[0, :, 0])

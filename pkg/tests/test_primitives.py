import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as npst

from mmentail import nn

finite = st.floats(-50, 50, allow_nan=False)


def small_matrix(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(
        lambda s: npst.arrays(np.float64, s, elements=finite))


class TestSoftmax:
    @given(npst.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                       elements=finite))
    def test_rows_form_a_distribution(self, z):
        out = nn.softmax(z)
        assert (out > 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @given(npst.arrays(np.float64, 5, elements=finite), finite)
    def test_shift_invariance(self, z, c):
        np.testing.assert_allclose(nn.softmax(z), nn.softmax(z + c), atol=1e-12)

    def test_extreme_values_stay_finite(self):
        out = nn.softmax(np.array([1e4, -1e4, 0.0]))
        assert np.isfinite(out).all() and out[0] == pytest.approx(1.0)

    def test_matches_direct_formula(self):
        z = np.array([0.3, -1.2, 2.0])
        expected = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(nn.softmax(z), expected, atol=1e-12)


class TestAttention:
    def test_matches_naive_loops(self):
        rng = np.random.default_rng(0)
        Q, K, V = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), \
            rng.standard_normal((5, 2))
        out, (_, _, _, weights) = nn.sdp_attention(Q, K, V)
        for i in range(3):
            scores = np.array([Q[i] @ K[j] / np.sqrt(4) for j in range(5)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            np.testing.assert_allclose(weights[i], w, atol=1e-12)
            np.testing.assert_allclose(out[i], w @ V, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        _, (_, _, _, weights) = nn.sdp_attention(
            rng.standard_normal((6, 3)), rng.standard_normal((4, 3)),
            rng.standard_normal((4, 3)))
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(2)
        Q, K, V = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 5, 4)), \
            rng.standard_normal((2, 5, 2))
        batched, _ = nn.sdp_attention(Q, K, V)
        for b in range(2):
            single, _ = nn.sdp_attention(Q[b], K[b], V[b])
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_self_attention_is_sdp_on_itself(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((4, 3))
        a, _ = nn.self_attention(X)
        b, _ = nn.sdp_attention(X, X, X)
        np.testing.assert_array_equal(a, b)

    def test_shape_errors(self):
        with pytest.raises(nn.ShapeError):
            nn.sdp_attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
        with pytest.raises(nn.ShapeError):
            nn.sdp_attention(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros((5, 2)))


class TestDense:
    @given(small_matrix())
    def test_matches_matmul(self, x):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((x.shape[1], 3))
        b = rng.standard_normal(3)
        out, _ = nn.dense(x, w, b, "none")
        np.testing.assert_allclose(out, x @ w + b, atol=1e-9)

    def test_relu_clamps(self):
        x = np.array([[1.0, -1.0]])
        w = np.eye(2)
        out, _ = nn.dense(x, w, np.zeros(2), "relu")
        np.testing.assert_array_equal(out, [[1.0, 0.0]])


class TestConv:
    def test_matches_naive_loops(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((6, 7, 2))
        K = rng.standard_normal((3, 3, 2, 4))
        b = rng.standard_normal(4)
        out, _ = nn.conv2d_valid(X, K, b)
        assert out.shape == (4, 5, 4)
        for i in range(4):
            for j in range(5):
                for c in range(4):
                    patch = X[i:i + 3, j:j + 3, :]
                    want = (patch * K[:, :, :, c]).sum() + b[c]
                    assert out[i, j, c] == pytest.approx(want, abs=1e-10)

    def test_batch_axis(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((2, 5, 5, 1))
        K = rng.standard_normal((3, 3, 1, 2))
        out, _ = nn.conv2d_valid(X, K, np.zeros(2))
        single, _ = nn.conv2d_valid(X[1], K, np.zeros(2))
        np.testing.assert_allclose(out[1], single, atol=1e-12)

    def test_kernel_larger_than_input(self):
        with pytest.raises(nn.ShapeError):
            nn.conv2d_valid(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))


class TestMaxpool:
    def test_matches_naive(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((7, 8, 3))
        out, _ = nn.maxpool2d(X, (2, 3))
        assert out.shape == (3, 2, 3)
        for i in range(3):
            for j in range(2):
                for c in range(3):
                    want = X[2 * i:2 * i + 2, 3 * j:3 * j + 3, c].max()
                    assert out[i, j, c] == want

    def test_floor_division_drops_remainder(self):
        X = np.arange(5 * 5).reshape(5, 5, 1).astype(float)
        out, _ = nn.maxpool2d(X, (2, 2))
        assert out.shape == (2, 2, 1)

    def test_identity_pool(self):
        X = np.random.default_rng(7).standard_normal((3, 4, 2))
        out, _ = nn.maxpool2d(X, (1, 1))
        np.testing.assert_array_equal(out, X)

    def test_pool_larger_than_input(self):
        with pytest.raises(nn.ShapeError):
            nn.maxpool2d(np.zeros((2, 2, 1)), (3, 1))


class TestGru:
    def test_matches_manual_recurrence(self):
        rng = np.random.default_rng(8)
        params = nn.GruParams.init(rng, 3, 4)
        X = rng.standard_normal((5, 3))
        (ctx, final), _ = nn.gru_forward(X, params)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))
        h = np.zeros(4)
        for t in range(5):
            z = sig(X[t] @ params.w_z + h @ params.u_z + params.b_z)
            r = sig(X[t] @ params.w_r + h @ params.u_r + params.b_r)
            c = np.tanh(X[t] @ params.w_c + r * (h @ params.u_c) + params.b_c)
            h = (1.0 - z) * h + z * c
            np.testing.assert_allclose(ctx[t], h, atol=1e-12)
        np.testing.assert_allclose(final, h, atol=1e-12)

    def test_causal(self):
        rng = np.random.default_rng(9)
        params = nn.GruParams.init(rng, 2, 3)
        X = rng.standard_normal((6, 2))
        (ctx, _), _ = nn.gru_forward(X, params)
        X2 = X.copy()
        X2[4:] += 10.0
        (ctx2, _), _ = nn.gru_forward(X2, params)
        np.testing.assert_array_equal(ctx[:4], ctx2[:4])
        assert not np.allclose(ctx[4:], ctx2[4:])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(10)
        params = nn.GruParams.init(rng, 3, 2)
        X = rng.standard_normal((3, 4, 3))
        (ctx, final), _ = nn.gru_forward(X, params)
        for b in range(3):
            (c1, f1), _ = nn.gru_forward(X[b], params)
            np.testing.assert_allclose(ctx[b], c1, atol=1e-12)
            np.testing.assert_allclose(final[b], f1, atol=1e-12)

    def test_input_dim_mismatch(self):
        params = nn.GruParams.init(np.random.default_rng(0), 3, 2)
        with pytest.raises(nn.ShapeError):
            nn.gru_forward(np.zeros((4, 5)), params)


class TestHeUniform:
    @given(st.integers(1, 64), st.integers(0, 1000))
    def test_bounds(self, fan_in, seed):
        rng = np.random.default_rng(seed)
        w = nn.he_uniform(rng, (20, 10), fan_in)
        limit = np.sqrt(6.0 / fan_in)
        assert (np.abs(w) <= limit).all()

    def test_spread_tracks_fan_in(self):
        rng = np.random.default_rng(0)
        wide = nn.he_uniform(rng, (4000,), 4)
        narrow = nn.he_uniform(rng, (4000,), 400)
        assert wide.std() > 5 * narrow.std()


class TestBatchNorm:
    def test_train_normalizes_batch(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((50, 4)) * 3 + 7
        params = nn.BatchNormParams.init(4)
        out, _ = nn.batchnorm(x, params, train=True)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-3)

    def test_running_stats_momentum(self):
        x = np.ones((4, 2)) * 5.0
        params = nn.BatchNormParams.init(2)
        nn.batchnorm(x, params, train=True)
        np.testing.assert_allclose(params.running_mean, 0.9 * 0.0 + 0.1 * 5.0)

    def test_inference_uses_running_stats(self):
        params = nn.BatchNormParams.init(2)
        params.running_mean = np.array([1.0, 2.0])
        params.running_var = np.array([4.0, 9.0])
        out, _ = nn.batchnorm(np.array([[3.0, 5.0]]), params, train=False)
        np.testing.assert_allclose(
            out[0], [(3 - 1) / np.sqrt(4 + nn.BN_EPS), (5 - 2) / np.sqrt(9 + nn.BN_EPS)])


class TestDropout:
    def test_identity_cases(self):
        x = np.ones((3, 3))
        out, cache = nn.dropout(x, 0.0, np.random.default_rng(0), train=True)
        assert cache is None and out is x
        out, cache = nn.dropout(x, 0.5, None, train=False)
        assert cache is None and out is x

    def test_inverted_scaling(self):
        x = np.ones((2000, 1))
        out, mask = nn.dropout(x, 0.4, np.random.default_rng(1), train=True)
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.6, atol=1e-12)
        assert abs(out.mean() - 1.0) < 0.1


class TestCrossEntropy:
    def test_matches_neg_log_prob(self):
        logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
        y = np.array([0, 2])
        loss, probs, _ = nn.softmax_cross_entropy(logits, y)
        want = -(np.log(probs[0, 0]) + np.log(probs[1, 2])) / 2
        assert loss == pytest.approx(want, abs=1e-9)

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, size=6)
        _, _, d_logits = nn.softmax_cross_entropy(logits, y)
        np.testing.assert_allclose(d_logits.sum(axis=1), 0.0, atol=1e-12)

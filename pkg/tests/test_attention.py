import math

import numpy as np
import pytest

from gradcheck import check_gradients
from wellcast import tensor as T
from wellcast.attention import (COUNTER, AttentionConfig, DistillWeights,
                                MultiHeadWeights, QKV, causal_mask, distill,
                                full_attention, multi_head,
                                probsparse_attention, select_top_queries,
                                sparsity_measure, top_u_count)
from wellcast.errors import DimensionError
from wellcast.rng import TRAIN, stream
from wellcast.tensor import Tensor


@pytest.fixture(autouse=True)
def clean_record():
    T.reset_record()
    COUNTER.reset()
    yield
    T.reset_record()


def make_qkv(rng, l_q, l_k, d, requires_grad=False):
    return QKV(
        Tensor(rng.normal(size=(l_q, d)), requires_grad=requires_grad),
        Tensor(rng.normal(size=(l_k, d)), requires_grad=requires_grad),
        Tensor(rng.normal(size=(l_k, d)), requires_grad=requires_grad),
    )


class TestFullAttention:
    def test_single_key_collapse(self):
        rng = stream(0, TRAIN)
        qkv = make_qkv(rng, 5, 1, 3)
        out = full_attention(qkv)
        for i in range(5):
            assert np.allclose(out.data[i], qkv.v.data[0])

    def test_identical_keys_average_values(self):
        rng = stream(1, TRAIN)
        k_row = rng.normal(size=3)
        qkv = QKV(Tensor(rng.normal(size=(4, 3))),
                  Tensor(np.tile(k_row, (6, 1))),
                  Tensor(rng.normal(size=(6, 3))))
        out = full_attention(qkv)
        mean_v = qkv.v.data.mean(axis=0)
        assert np.allclose(out.data, np.tile(mean_v, (4, 1)), atol=1e-12)

    def test_hand_instance(self):
        # d=1, Q=[0;1], K=[0;1], V=[1;2]:
        # row 0: softmax([0,0]) . V = 1.5
        # row 1: softmax([0,1]) . V = (1 + 2e)/(1+e)
        qkv = QKV(Tensor([[0.0], [1.0]]), Tensor([[0.0], [1.0]]),
                  Tensor([[1.0], [2.0]]))
        out = full_attention(qkv)
        assert np.isclose(out.data[0, 0], 1.5, atol=1e-12)
        expected = (1.0 + 2.0 * math.e) / (1.0 + math.e)
        assert np.isclose(out.data[1, 0], expected, atol=1e-12)
        assert np.isclose(expected, 1.7310585786300049)

    def test_rows_are_convex_combinations(self):
        rng = stream(2, TRAIN)
        qkv = make_qkv(rng, 8, 12, 4)
        out = full_attention(qkv)
        lo = qkv.v.data.min(axis=0) - 1e-12
        hi = qkv.v.data.max(axis=0) + 1e-12
        assert np.all(out.data >= lo) and np.all(out.data <= hi)

    def test_empty_keys_rejected(self):
        qkv = QKV(Tensor(np.zeros((2, 3))), Tensor(np.zeros((0, 3))),
                  Tensor(np.zeros((0, 3))))
        with pytest.raises(DimensionError):
            full_attention(qkv)

    def test_gradients(self):
        rng = stream(3, TRAIN)
        qkv = make_qkv(rng, 3, 4, 2, requires_grad=True)
        w = T.constant(stream(4, TRAIN).normal(size=(3, 2)))

        def make_loss():
            return T.tsum(T.mul(full_attention(qkv), w))

        check_gradients(make_loss, [qkv.q, qkv.k, qkv.v])

    def test_masked_gradients(self):
        rng = stream(5, TRAIN)
        qkv = make_qkv(rng, 4, 4, 2, requires_grad=True)
        w = T.constant(stream(6, TRAIN).normal(size=(4, 2)))
        mask = causal_mask(4, 4)

        def make_loss():
            return T.tsum(T.mul(full_attention(qkv, mask), w))

        check_gradients(make_loss, [qkv.q, qkv.k, qkv.v])


class TestSparsityMeasure:
    def test_uniform_scores_lse_minus_mean(self):
        # all scores zero over 4 keys: M = log 4 - 0
        q = np.zeros(3)
        keys = np.zeros((4, 3))
        m = sparsity_measure(q, keys, "lse_minus_mean")
        assert np.isclose(m, math.log(4.0), atol=1e-12)

    def test_uniform_scores_paper_literal(self):
        # M = log 4 - mean(exp(0)) = log 4 - 1
        m = sparsity_measure(np.zeros(3), np.zeros((4, 3)), "paper_literal")
        assert np.isclose(m, math.log(4.0) - 1.0, atol=1e-12)

    def test_uniform_is_minimal_for_fixed_mean(self):
        # Jensen: among score vectors with the same mean, equal scores give
        # the smallest log-sum-exp, hence the smallest measure
        rng = stream(7, TRAIN)
        d = 4
        keys = rng.normal(size=(6, d))
        q = rng.normal(size=d)
        scores = keys @ q / np.sqrt(d)
        m_actual = sparsity_measure(q, keys, "lse_minus_mean")
        m_uniform = math.log(len(scores))  # measure of a constant score row
        del scores
        assert m_actual >= m_uniform - 1e-12

    def test_measure_depends_only_on_scores(self):
        # shifting K along a direction orthogonal to q leaves scores, and
        # hence M, unchanged
        q = np.array([1.0, 0.0])
        keys = stream(8, TRAIN).normal(size=(5, 2))
        shift = np.array([0.0, 2.5])  # q . shift = 0
        a = sparsity_measure(q, keys)
        b = sparsity_measure(q, keys + shift)
        assert np.isclose(a, b, atol=1e-12)

    def test_stability_under_large_scores(self):
        q = np.array([60.0])
        keys = np.array([[10.0], [-10.0], [5.0]])
        m = sparsity_measure(q, keys, "lse_minus_mean")
        assert np.isfinite(m)


class TestSelectTopQueries:
    def test_saturation_returns_all_in_order(self):
        rng = stream(9, TRAIN)
        cfg = AttentionConfig(d_model=4, n_heads=1, c=50.0)
        q = rng.normal(size=(5, 4))
        k = rng.normal(size=(6, 4))
        sel = select_top_queries(q, k, cfg)
        assert np.array_equal(sel, np.arange(5))

    def test_dominant_query_selected_first(self):
        # one query aligned with a key direction produces a one-hot-ish score
        # row; uniform rows give minimal M, so the spiky query must win
        cfg = AttentionConfig(d_model=4, n_heads=1, c=0.1)
        keys = np.eye(4)
        q = np.vstack([np.ones(4) * 0.2,
                       np.ones(4) * 0.2,
                       np.array([8.0, 0.0, 0.0, 0.0]),
                       np.ones(4) * 0.2])
        sel = select_top_queries(q, keys, cfg)
        assert top_u_count(0.1, 4) == 1
        assert np.array_equal(sel, [2])
        # brute-force M ranking oracle
        ms = [sparsity_measure(q[i], keys) for i in range(4)]
        assert np.argmax(ms) == 2

    def test_tie_break_lower_indices(self):
        cfg = AttentionConfig(d_model=4, n_heads=1, c=1.0)
        q = np.tile(np.ones(4), (6, 1))
        k = stream(10, TRAIN).normal(size=(5, 4))
        u = top_u_count(1.0, 6)
        sel = select_top_queries(q, k, cfg)
        assert np.array_equal(sel, np.arange(u))

    def test_u_formula(self):
        assert top_u_count(5.0, 1) == 1
        assert top_u_count(5.0, 96) == min(96, math.ceil(5 * math.log(96)))
        assert top_u_count(0.01, 50) == 1
        assert top_u_count(100.0, 7) == 7


class TestProbSparse:
    @pytest.mark.parametrize("seed", range(10))
    def test_reduction_to_full_attention(self, seed):
        rng = stream(40 + seed, TRAIN)
        l_q = int(rng.integers(2, 12))
        l_k = l_q if seed % 2 == 0 else int(rng.integers(2, 12))
        d = int(rng.integers(1, 5))
        causal = bool(seed % 2 == 0)  # causal needs L_k == L_q alignment here
        qkv = make_qkv(rng, l_q, l_k, d)
        cfg = AttentionConfig(d_model=d, n_heads=1, c=1000.0)
        sparse = probsparse_attention(qkv, cfg, causal=causal)
        dense = full_attention(qkv, causal_mask(l_q, l_k) if causal else None)
        assert np.abs(sparse.data - dense.data).max() < 1e-10

    def test_lazy_rows_get_mean_of_values(self):
        rng = stream(11, TRAIN)
        cfg = AttentionConfig(d_model=3, n_heads=1, c=0.1)  # u = 1
        qkv = make_qkv(rng, 4, 4, 3)
        out = probsparse_attention(qkv, cfg, causal=False)
        sel = select_top_queries(qkv.q.data, qkv.k.data, cfg)
        dense = full_attention(qkv)
        mean_v = qkv.v.data.mean(axis=0)
        for i in range(4):
            if i in sel:
                assert np.allclose(out.data[i], dense.data[i], atol=1e-12)
            else:
                assert np.allclose(out.data[i], mean_v, atol=1e-12)

    def test_causal_lazy_rows_get_running_mean(self):
        # force the active set: zero queries have exactly-uniform score rows
        # (zero excess measure), the aligned query at row 2 exceeds them
        rng = stream(12, TRAIN)
        cfg = AttentionConfig(d_model=3, n_heads=1, c=0.1)  # u = 1
        keys = rng.normal(size=(5, 3))
        q = np.zeros((5, 3))
        q[2] = keys[1] * 4.0
        v = rng.normal(size=(5, 3))
        qkv = QKV(Tensor(q), Tensor(keys), Tensor(v))
        out = probsparse_attention(qkv, cfg, causal=True)
        running = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
        dense = full_attention(qkv, causal_mask(5, 5))
        for i in (1, 3, 4):  # lazy rows: running mean of visible values
            assert np.allclose(out.data[i], running[i], atol=1e-12)
        for i in (0, 2):  # active rows: exact masked attention
            assert np.allclose(out.data[i], dense.data[i], atol=1e-12)

    def test_causal_bit_exact(self):
        rng = stream(13, TRAIN)
        cfg = AttentionConfig(d_model=4, n_heads=1, c=1.0)
        base = rng.normal(size=(8, 4))
        keys = base.copy()
        t0 = 4
        for mode_causal in (True,):
            qkv_a = QKV(Tensor(base.copy()), Tensor(keys.copy()), Tensor(keys.copy()))
            out_a = probsparse_attention(qkv_a, cfg, causal=mode_causal)
            perturbed = base.copy()
            perturbed[t0 + 1:] += rng.normal(size=(8 - t0 - 1, 4)) * 5.0
            qkv_b = QKV(Tensor(perturbed), Tensor(perturbed), Tensor(perturbed))
            out_b = probsparse_attention(qkv_b, cfg, causal=mode_causal)
            assert np.array_equal(out_a.data[:t0 + 1], out_b.data[:t0 + 1])

    def test_full_attention_causal_bit_exact(self):
        rng = stream(14, TRAIN)
        base = rng.normal(size=(7, 3))
        t0 = 3
        mask = causal_mask(7, 7)
        out_a = full_attention(QKV(Tensor(base), Tensor(base), Tensor(base)), mask)
        pert = base.copy()
        pert[t0 + 1:] *= -3.0
        out_b = full_attention(QKV(Tensor(pert), Tensor(pert), Tensor(pert)), mask)
        assert np.array_equal(out_a.data[:t0 + 1], out_b.data[:t0 + 1])

    def test_convex_combination_in_sparse_mode(self):
        rng = stream(15, TRAIN)
        cfg = AttentionConfig(d_model=4, n_heads=1, c=0.5)
        qkv = make_qkv(rng, 9, 9, 4)
        out = probsparse_attention(qkv, cfg, causal=False)
        lo = qkv.v.data.min(axis=0) - 1e-12
        hi = qkv.v.data.max(axis=0) + 1e-12
        assert np.all(out.data >= lo) and np.all(out.data <= hi)

    def test_dot_product_counter(self):
        rng = stream(16, TRAIN)
        l_q, l_k, d = 10, 12, 4
        cfg = AttentionConfig(d_model=d, n_heads=1, c=1.0)
        qkv = make_qkv(rng, l_q, l_k, d)
        COUNTER.reset()
        probsparse_attention(qkv, cfg, causal=False)
        u = top_u_count(1.0, l_q)
        assert COUNTER.measure_dot_products == l_q * l_k
        assert COUNTER.attention_dot_products == u * l_k

    def test_gradients_through_sparse_path(self):
        rng = stream(17, TRAIN)
        cfg = AttentionConfig(d_model=2, n_heads=1, c=0.5)
        qkv = make_qkv(rng, 5, 5, 2, requires_grad=True)
        w = T.constant(stream(18, TRAIN).normal(size=(5, 2)))

        def make_loss():
            return T.tsum(T.mul(probsparse_attention(qkv, cfg, causal=True), w))

        check_gradients(make_loss, [qkv.q, qkv.k, qkv.v])


class TestMultiHead:
    def test_single_head_identity_projections_match_full(self):
        rng = stream(19, TRAIN)
        d_model = 4
        cfg = AttentionConfig(d_model=d_model, n_heads=1, c=5.0)
        weights = MultiHeadWeights(d_model, 1, rng)
        for w in (weights.w_q[0], weights.w_k[0], weights.w_v[0], weights.w_out):
            w.data = np.eye(d_model)
        x = Tensor(rng.normal(size=(6, d_model)))
        out = multi_head(x, x, weights, cfg, mode="full")
        direct = full_attention(QKV(x, x, x))
        assert np.allclose(out.data, direct.data, atol=1e-12)

    def test_head_permutation_permutes_concat_blocks(self):
        rng = stream(20, TRAIN)
        d_model, n_heads = 8, 2
        cfg = AttentionConfig(d_model=d_model, n_heads=n_heads, c=5.0)
        weights = MultiHeadWeights(d_model, n_heads, rng)
        weights.w_out.data = np.eye(d_model)  # expose the concatenation
        x = Tensor(rng.normal(size=(5, d_model)))
        out = multi_head(x, x, weights, cfg, mode="full").data
        # swap the two heads' projection weights
        weights.w_q.reverse(); weights.w_k.reverse(); weights.w_v.reverse()
        swapped = multi_head(x, x, weights, cfg, mode="full").data
        d = d_model // n_heads
        assert np.allclose(out[:, :d], swapped[:, d:], atol=1e-12)
        assert np.allclose(out[:, d:], swapped[:, :d], atol=1e-12)

    def test_multi_head_gradcheck(self):
        rng = stream(21, TRAIN)
        cfg = AttentionConfig(d_model=4, n_heads=2, c=5.0)
        weights = MultiHeadWeights(4, 2, rng)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        w = T.constant(stream(22, TRAIN).normal(size=(4, 4)))

        def make_loss():
            return T.tsum(T.mul(multi_head(x, x, weights, cfg, mode="full",
                                           causal=True), w))

        check_gradients(make_loss, [x] + weights.params()[:2])


class TestDistill:
    @pytest.mark.parametrize("length", list(range(2, 65)))
    def test_output_length_halves(self, length):
        rng = stream(23, TRAIN)
        d_model = 4
        weights = DistillWeights(d_model, rng)
        x = Tensor(rng.normal(size=(length, d_model)))
        out = distill(x, weights)
        assert out.shape == ((length + 1) // 2, d_model)

    def test_identity_kernel_positive_inputs_strided_max(self):
        # center-tap identity kernels + positive inputs: ELU is identity and
        # the distill reduces to a strided running max of the raw inputs
        d_model = 3
        weights = DistillWeights(d_model, stream(24, TRAIN))
        k = np.zeros((d_model, d_model, 3))
        for c in range(d_model):
            k[c, c, 1] = 1.0
        weights.kernels.data = k
        rng = stream(25, TRAIN)
        x = rng.uniform(0.5, 2.0, size=(9, d_model))
        out = distill(Tensor(x), weights)
        padded = np.pad(x, ((1, 1), (0, 0)), constant_values=-np.inf)
        expect = np.stack([padded[s:s + 3].max(axis=0)
                           for s in range(0, 9, 2)])
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_too_short_rejected(self):
        weights = DistillWeights(2, stream(26, TRAIN))
        with pytest.raises(DimensionError):
            distill(Tensor(np.zeros((1, 2))), weights)

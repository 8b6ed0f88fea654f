import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codemsd import autodiff as ad
from codemsd.attention import (
    AttentionHeadParams,
    CrossCompletionParams,
    FusionParams,
    attention_head,
    complete_image,
    complete_text,
    export_weights_csv,
    global_fusion,
)
from codemsd.autodiff import ShapeError, Tensor


def rand_head(rng, F, std=0.5, grad=False):
    return AttentionHeadParams(*(Tensor(rng.normal(0, std, (F, F)), requires_grad=grad) for _ in range(3)))


def zero_value_head(rng, F):
    h = rand_head(rng, F)
    h.P_V = Tensor(np.zeros((F, F)))
    return h


def head_oracle(q, k, v, PQ, PK, PV):
    """Scalar-loop attention head."""
    F = PQ.shape[0]
    Q, K, V = q @ PQ, k @ PK, v @ PV
    out = np.zeros((q.shape[0], F))
    for i in range(q.shape[0]):
        logits = [sum(Q[i, f] * K[j, f] for f in range(F)) / math.sqrt(F) for j in range(k.shape[0])]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += (e[j] / z) * V[j]
    return out


class TestAttentionHead:
    def test_single_row_returns_value(self, rng):
        x = Tensor(rng.normal(size=(1, 3)))
        out = attention_head(x, x, x, AttentionHeadParams.identity(3))
        assert np.allclose(out.data, x.data, atol=1e-15)

    def test_equal_logits_average_values(self):
        q = Tensor([[0.0, 0.0]])
        v = Tensor([[1.0, 2.0], [3.0, -4.0]])
        out = attention_head(q, v, v, AttentionHeadParams.identity(2))
        assert np.allclose(out.data, [[2.0, -1.0]], atol=1e-15)

    def test_two_key_hand_case(self):
        w = []
        out = attention_head(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)), AttentionHeadParams.identity(2), w)
        e = math.exp(1 / math.sqrt(2))
        expected = [e / (e + 1), 1 / (e + 1)]
        assert np.allclose(w[0], [expected], atol=1e-15)
        assert np.allclose(w[0], [[0.6698, 0.3302]], atol=5e-5)
        # values are the identity rows, so the output equals the weights
        assert np.allclose(out.data, [expected], atol=1e-15)

    def test_matches_scalar_oracle(self, rng):
        q, k = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        h = rand_head(rng, 4)
        out = attention_head(Tensor(q), Tensor(k), Tensor(v), h)
        assert np.allclose(out.data, head_oracle(q, k, v, h.P_Q.data, h.P_K.data, h.P_V.data), atol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
    def test_rows_in_convex_hull_of_values(self, seed, m, n):
        rng = np.random.default_rng(seed)
        h = rand_head(rng, 3, std=2.0)
        v = rng.normal(size=(n, 3))
        w = []
        out = attention_head(Tensor(rng.normal(size=(m, 3))), Tensor(rng.normal(size=(n, 3))), Tensor(v), h, w)
        W = w[0]
        assert np.all(W >= 0) and np.allclose(W.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(out.data, W @ (v @ h.P_V.data), atol=1e-12)

    def test_feature_mismatch(self, rng):
        with pytest.raises(ShapeError):
            attention_head(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), AttentionHeadParams.identity(4))

    def test_key_value_length_mismatch(self):
        with pytest.raises(ShapeError):
            attention_head(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), AttentionHeadParams.identity(2))


class TestCompleteImage:
    def test_shape(self, rng):
        I, L, F = 4, 8, 16
        params = CrossCompletionParams(rand_head(rng, F), Tensor(rng.normal(size=(I, I + L))))
        out = complete_image(Tensor(rng.normal(size=(L, F))), Tensor(rng.normal(size=(I, F))), params)
        assert out.shape == (I, F)

    def test_selector_probe_returns_ocr_rows(self, rng):
        I, L, F = 4, 8, 6
        zero = AttentionHeadParams(*(Tensor(np.zeros((F, F))) for _ in range(3)))
        P_ca = np.hstack([np.eye(I), np.zeros((I, L))])
        z_o = rng.normal(size=(L, F))
        out = complete_image(Tensor(z_o), Tensor(rng.normal(size=(I, F))), CrossCompletionParams(zero, Tensor(P_ca)))
        assert np.array_equal(out.data, z_o[:I])

    def test_bad_selector_shape(self, rng):
        params = CrossCompletionParams(rand_head(rng, 3), Tensor(np.ones((2, 5))))
        with pytest.raises(ShapeError):
            complete_image(Tensor(np.ones((4, 3))), Tensor(np.ones((2, 3))), params)

    def test_gradients(self, rng):
        I, L, F = 3, 4, 5
        head = rand_head(rng, F, grad=True)
        P_ca = Tensor(rng.normal(size=(I, I + L)), requires_grad=True)
        z_o = Tensor(rng.normal(size=(L, F)), requires_grad=True)
        z_v = Tensor(rng.normal(size=(I, F)), requires_grad=True)
        params = {**head.tensors(), "P_ca": P_ca, "z_o": z_o, "z_v": z_v}
        rep = ad.grad_check(lambda: ad.sum_all(complete_image(z_o, z_v, CrossCompletionParams(head, P_ca))), params)
        assert rep.passed and rep.raw_worst < 1e-4, rep.summary()


class TestCompleteText:
    def test_shape(self, rng):
        L, F = 8, 16
        out = complete_text(Tensor(rng.normal(size=(L, F))), Tensor(rng.normal(size=(L, F))), rand_head(rng, F))
        assert out.shape == (2 * L, F)

    def test_zero_values_leave_residual(self, rng):
        z_t, z_o = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = complete_text(Tensor(z_t), Tensor(z_o), zero_value_head(rng, 4))
        assert np.array_equal(out.data, np.vstack([z_t, z_o]))

    def test_text_rows_depend_on_ocr(self, rng):
        head = rand_head(rng, 4)
        z_t, z_o = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a = complete_text(Tensor(z_t), Tensor(z_o), head).data[:3]
        b = complete_text(Tensor(z_t), Tensor(z_o + 0.1), head).data[:3]
        assert np.max(np.abs(a - b)) > 1e-6

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            complete_text(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), rand_head(rng, 4))


class TestGlobalFusion:
    def test_shape(self, rng):
        out = global_fusion(Tensor(rng.normal(size=(4, 16))), Tensor(rng.normal(size=(16, 16))), FusionParams(rand_head(rng, 16)))
        assert out.shape == (1, 16)

    def test_zero_values_give_mean_of_rows(self, rng):
        Z_v, Z_t = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        out = global_fusion(Tensor(Z_v), Tensor(Z_t), FusionParams(zero_value_head(rng, 3)))
        assert np.allclose(out.data[0], np.vstack([Z_v, Z_t]).mean(axis=0), atol=1e-15)

    def test_gradients(self, rng):
        head = rand_head(rng, 4, grad=True)
        Z_v, Z_t = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
        W = Tensor(rng.normal(size=(1, 4)))
        rep = ad.grad_check(lambda: ad.sum_all(ad.mul(global_fusion(Z_v, Z_t, FusionParams(head)), W)), head.tensors())
        assert rep.passed and rep.raw_worst < 1e-4, rep.summary()

    def test_weights_exported(self, rng, tmp_path):
        w = []
        global_fusion(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 3))), FusionParams(rand_head(rng, 3)), w)
        assert [x.shape for x in w] == [(2, 4), (4, 2)]
        export_weights_csv(w[0], tmp_path / "w.csv")
        back = np.loadtxt(tmp_path / "w.csv", delimiter=",")
        assert np.array_equal(back, w[0])


def test_batched_blocks_match_per_example(rng):
    I, L, F, B = 3, 4, 5, 2
    params = CrossCompletionParams(rand_head(rng, F), Tensor(rng.normal(size=(I, I + L))))
    z_o, z_v = rng.normal(size=(B, L, F)), rng.normal(size=(B, I, F))
    batched = complete_image(Tensor(z_o), Tensor(z_v), params).data
    for b in range(B):
        assert np.allclose(batched[b], complete_image(Tensor(z_o[b]), Tensor(z_v[b]), params).data, atol=1e-14)

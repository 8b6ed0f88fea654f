import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from codemsd import autodiff as ad
from codemsd.autodiff import NonFiniteError, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def fd(fn, x, h=1e-6):
    """Plain central differences over every entry of ``x`` (independent of the library)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


class TestTensor:
    def test_vectors_and_scalars_become_rows(self):
        assert Tensor(3.0).shape == (1, 1)
        assert Tensor([1, 2, 3]).shape == (1, 3)

    def test_item_requires_single_entry(self):
        with pytest.raises(ShapeError):
            Tensor([1, 2]).item()

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            ad.backward(leaf([[1.0, 2.0]]) * 2.0)


class TestMatmul:
    def test_identity(self, rng):
        X = rng.normal(size=(2, 3))
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_gradient_matches_finite_differences(self, rng):
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        W = rng.normal(size=(3, 2))
        a, b = leaf(A), leaf(B)
        ad.backward(ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(W))))
        assert np.max(ad.relative_error(a.grad, fd(lambda x: np.sum((x @ B) * W), A))) < 1e-6
        assert np.max(ad.relative_error(b.grad, fd(lambda x: np.sum((A @ x) * W), B))) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_left_operand_shares_weight(self, rng):
        X = rng.normal(size=(3, 2, 4))
        W = rng.normal(size=(4, 5))
        out = ad.matmul(Tensor(X), Tensor(W))
        assert np.allclose(out.data, X @ W)


class TestSoftmax:
    def test_zeros_give_uniform(self):
        assert np.allclose(ad.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_log_two(self):
        assert np.allclose(ad.softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_large_logit_no_overflow(self):
        with ad.check_finite():
            out = ad.softmax_rows(Tensor([[1000.0, 0.0]]))
        assert out.data.tolist() == [[1.0, 0.0]]

    @given(arrays(np.float64, (3, 5), elements=st.floats(-700, 700)))
    def test_rows_sum_to_one(self, x):
        s = ad.softmax_rows(Tensor(x)).data.sum(axis=1)
        assert np.all(np.abs(s - 1.0) <= 1e-12)


class TestConcat:
    def test_empty_block_is_identity(self, rng):
        X = rng.normal(size=(3, 4))
        assert np.array_equal(ad.concat_rows(Tensor(X), Tensor(np.zeros((0, 4)))).data, X)

    def test_hand_case(self):
        assert ad.concat_rows(Tensor([[1, 2]]), Tensor([[3, 4]])).data.tolist() == [[1, 2], [3, 4]]

    def test_shapes_add(self):
        assert ad.concat_rows(Tensor(np.ones((4, 8))), Tensor(np.ones((6, 8)))).shape == (10, 8)

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat_rows(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


class TestMeanPool:
    def test_hand_case(self):
        assert ad.mean_pool_rows(Tensor([[1, 3], [5, 7]])).data.tolist() == [[3.0, 5.0]]

    def test_single_row(self):
        assert ad.mean_pool_rows(Tensor([[2.5, -1.0]])).data.tolist() == [[2.5, -1.0]]

    @given(arrays(np.float64, (5, 3), elements=finite), st.permutations(range(5)))
    def test_row_permutation_invariant(self, x, perm):
        a = ad.mean_pool_rows(Tensor(x)).data
        b = ad.mean_pool_rows(Tensor(x[list(perm)])).data
        assert np.allclose(a, b, rtol=1e-14, atol=1e-13)


class TestFrobenius:
    def test_hand_values(self):
        assert ad.frobenius_norm(Tensor([[3, 4], [0, 0]])).item() == 5.0
        assert ad.frobenius_norm(Tensor(np.eye(2))).item() == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_zero_has_zero_gradient(self):
        x = leaf(np.zeros((2, 2)))
        y = ad.frobenius_norm(x)
        ad.backward(y)
        assert y.item() == 0.0
        assert np.array_equal(x.grad, np.zeros((2, 2)))


class TestRowNormalize:
    def test_hand_case(self):
        assert np.allclose(ad.row_l2_normalize(Tensor([[3, 4]])).data, [[0.6, 0.8]], atol=1e-12)

    def test_unit_rows_unchanged(self, rng):
        X = rng.normal(size=(4, 3))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        assert np.allclose(ad.row_l2_normalize(Tensor(X)).data, X, atol=1e-12)

    def test_zero_row_stays_finite(self):
        with ad.check_finite():
            out = ad.row_l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))
        assert out.data[0].tolist() == [0.0, 0.0]


class TestCrossEntropy:
    def test_uniform_three_classes(self):
        assert ad.cross_entropy(Tensor([[0.0, 0.0, 0.0]]), 0).item() == pytest.approx(math.log(3), abs=1e-15)

    def test_hand_value(self):
        assert ad.cross_entropy(Tensor([[1.0, 0.0]]), 0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)

    def test_large_margin_goes_to_zero(self):
        assert ad.cross_entropy(Tensor([[800.0, 0.0]]), 0).item() == 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ad.cross_entropy(Tensor([[0.0, 0.0]]), 2)

    def test_mean_over_rows(self):
        logits = Tensor([[1.0, 0.0], [0.0, 2.0]])
        expect = 0.5 * (math.log(1 + math.exp(-1)) + math.log(1 + math.exp(-2)))
        assert ad.cross_entropy(logits, [0, 1]).item() == pytest.approx(expect, abs=1e-15)


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        ad.backward(ad.mul(x, x))
        assert x.grad.item() == 6.0

    def test_constant_path_has_zero_gradient(self):
        x = leaf(3.0)
        ad.backward(ad.add(ad.scale(x, 0.0), Tensor(5.0)))
        assert x.grad.item() == 0.0

    def test_reused_node_accumulates(self):
        x = leaf(2.0)
        y = ad.mul(x, x)
        ad.backward(ad.add(y, y))
        assert x.grad.item() == 8.0

    def test_relu_gradient_zero_at_kink(self):
        x = leaf([[-1.0, 0.0, 2.0]])
        ad.backward(ad.sum_all(ad.relu(x)))
        assert x.grad.tolist() == [[0.0, 0.0, 1.0]]

    def test_no_grad_records_nothing(self):
        x = leaf(2.0)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad and y.parents == ()

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_check_finite_raises(self):
        with ad.check_finite(), pytest.raises(NonFiniteError):
            ad.log(Tensor([[0.0]]))

    @staticmethod
    def _losses(a, b, shared):
        ab = ad.matmul(a, b)
        ab2 = ab if shared else ad.matmul(a, b)
        return ad.sum_all(ad.mul(ab, ab)), ad.cross_entropy(ab2, [0, 1, 0])

    def _grads(self, A, B, shared, which):
        a, b = leaf(A), leaf(B)
        l1, l2 = self._losses(a, b, shared)
        ad.backward({0: l1, 1: l2, 2: ad.add(l1, l2)}[which])
        return a.grad, b.grad

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
    def test_linearity_over_summed_losses(self, A, B):
        # separate graphs meet only at the leaves: exact
        together = self._grads(A, B, False, 2)
        first, second = self._grads(A, B, False, 0), self._grads(A, B, False, 1)
        for k in range(2):
            assert np.array_equal(together[k], first[k] + second[k])

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
    def test_linearity_through_shared_node(self, A, B):
        # cotangents merge before the matmul backward, so only up to rounding
        together = self._grads(A, B, True, 2)
        first, second = self._grads(A, B, True, 0), self._grads(A, B, True, 1)
        for k in range(2):
            assert np.allclose(together[k], first[k] + second[k], rtol=1e-12, atol=1e-12)

    def test_replay_is_bit_identical(self, rng):
        A = rng.normal(size=(4, 4))
        outs = []
        for _ in range(2):
            a = leaf(A)
            loss = ad.cross_entropy(ad.matmul(ad.softmax_rows(a), a), [0, 1, 2, 3])
            ad.backward(loss)
            outs.append((loss.item(), a.grad.tobytes()))
        assert outs[0] == outs[1]


class TestEmbedding:
    def test_gather_and_scatter(self):
        table = leaf(np.arange(12.0).reshape(4, 3))
        out = ad.embedding(table, np.array([[1, 1, 3]]))
        assert out.data[0].tolist() == [[3, 4, 5], [3, 4, 5], [9, 10, 11]]
        ad.backward(ad.sum_all(out))
        assert table.grad[:, 0].tolist() == [0, 2, 0, 1]


class TestGradCheck:
    def test_quadratic_form_is_nearly_exact(self, rng):
        M = rng.normal(size=(4, 4))
        x = leaf(rng.normal(size=(1, 4)))
        rep = ad.grad_check(lambda: ad.sum_all(ad.mul(ad.matmul(x, Tensor(M)), x)), {"x": x}, h=1e-5)
        assert rep.raw_worst < 1e-9

    def test_softmax_cross_entropy_composite(self, rng):
        W = leaf(rng.normal(size=(5, 3)))
        X = Tensor(rng.normal(size=(4, 5)))
        rep = ad.grad_check(lambda: ad.cross_entropy(ad.matmul(X, W), [0, 2, 1, 1]), {"W": W}, tol=1e-4)
        assert rep.passed and rep.raw_worst < 1e-4

    def test_corrupted_gradient_is_flagged(self, rng):
        W = leaf(rng.normal(size=(5, 3)))
        X = Tensor(rng.normal(size=(4, 5)))
        fn = lambda: ad.cross_entropy(ad.matmul(X, W), [0, 2, 1, 1])
        ad.backward(fn())
        bad = W.grad * 1.01
        rep = ad.grad_check(fn, {"W": W}, analytic={"W": bad})
        assert not rep.passed
        assert rep.max_rel_error["W"] == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_replay_and_rerun_agree(self, rng):
        W = leaf(rng.normal(size=(3, 3)))
        fn = lambda: ad.sum_all(ad.softmax_rows(ad.matmul(W, W)))
        r1 = ad.grad_check(fn, {"W": W}, replay=True)
        r2 = ad.grad_check(fn, {"W": W}, replay=False)
        assert r1.raw_max_rel_error == pytest.approx(r2.raw_max_rel_error, abs=1e-9)

    def test_noise_floor_scales_with_loss(self):
        assert ad.fd_noise_floor(100.0, 1e-5) == pytest.approx(100 * ad.fd_noise_floor(1.0, 1e-5))

    def test_summary_mentions_verdict(self, rng):
        W = leaf(rng.normal(size=(2, 2)))
        rep = ad.grad_check(lambda: ad.sum_all(ad.mul(W, W)), {"W": W})
        assert rep.summary().splitlines()[-1].startswith("PASS")


@pytest.mark.parametrize(
    "op",
    [
        lambda x: ad.sum_all(ad.mul(ad.softmax_rows(x), x)),
        lambda x: ad.frobenius_norm(ad.add_scalar(x, 0.5)),
        lambda x: ad.sum_all(ad.mul(ad.row_l2_normalize(x), Tensor(np.arange(12.0).reshape(3, 4)))),
        lambda x: ad.sum_all(ad.mean_pool_rows(ad.concat_rows(x, ad.scale(x, 2.0)))),
        lambda x: ad.sum_all(ad.mul(ad.concat_cols(x, x), ad.concat_cols(x, Tensor(np.ones((3, 4)))))),
        lambda x: ad.sum_all(ad.log(ad.add_scalar(ad.mul(x, x), 1.0))),
        lambda x: ad.sum_all(ad.hinge(1.0, x)),
        lambda x: ad.mean_all(ad.log_weighted_softmax_mass(x, np.array([[1.0, 0.5, 0.0, 0.2]] * 3))),
        lambda x: ad.sum_all(ad.sum_cols(ad.transpose(ad.mul(x, x)))),
        lambda x: ad.sum_all(ad.mul(ad.stack_rows([ad.mean_pool_rows(x), ad.mean_pool_rows(ad.mul(x, x))]), Tensor(np.ones((2, 4))))),
    ],
    ids=["softmax", "frobenius", "rownorm", "meanpool-concat", "concat-cols", "log", "hinge", "weighted-mass", "sum-cols", "stack"],
)
def test_op_gradients(op, rng):
    x = leaf(rng.normal(size=(3, 4)) + 0.01)
    rep = ad.grad_check(lambda: op(x), {"x": x}, tol=1e-6)
    assert rep.passed, rep.summary()

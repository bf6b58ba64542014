"""Tests for the reverse-mode autodiff core.

Expected values are hand-derived or come from a test-local central
difference oracle that is independent of the library's own grad_check.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triagenet import autodiff as ad
from triagenet.autodiff import (
    NoTapeError,
    ShapeError,
    Tensor,
    WindowTooLargeError,
    add_n,
    concat,
    conv_valid,
    cross_entropy,
    dot,
    dropout,
    grad_check,
    lookup,
    max_rows,
    relu,
    softmax,
    take_rows,
    tanh,
    tsum,
    unfold,
)


def central_difference(f, arrays, eps=1e-5):
    """Independent numeric gradient: perturb every coordinate of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


class TestConvValid:
    def test_hand_computed_relu_affine(self):
        # filter [[2]], bias -3 over column [1, 2, 3]: relu(2x - 3) = [0, 1, 3]
        x = Tensor([[1.0], [2.0], [3.0]])
        w = Tensor([[2.0]])
        b = Tensor(-3.0)
        out = conv_valid(x, w, b)
        np.testing.assert_array_equal(out.data, [0.0, 1.0, 3.0])

    def test_output_length(self):
        x = Tensor(np.ones((4, 3)))
        w = Tensor(np.ones((2, 3)))
        out = conv_valid(x, w, Tensor(0.0))
        assert out.shape == (3,)

    def test_zero_input_zero_filter(self):
        out = conv_valid(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 2))), Tensor(0.0))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_column_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv_valid(Tensor(np.ones((4, 3))), Tensor(np.ones((2, 2))), Tensor(0.0))

    def test_window_too_large_raises(self):
        with pytest.raises(WindowTooLargeError):
            conv_valid(Tensor(np.ones((2, 3))), Tensor(np.ones((5, 3))), Tensor(0.0))

    @given(
        L=st.integers(min_value=1, max_value=12),
        k=st.integers(min_value=1, max_value=6),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_length_property(self, L, k, data):
        m = data.draw(st.integers(min_value=1, max_value=L))
        x = Tensor(np.ones((L, k)))
        w = Tensor(np.ones((m, k)))
        out = conv_valid(x, w, Tensor(0.0))
        assert out.shape == (L - m + 1,)


class TestUnfold:
    def test_windows_content(self):
        x = Tensor(np.arange(8.0).reshape(4, 2))
        out = unfold(x, 2)
        expected = np.array(
            [[0.0, 1.0, 2.0, 3.0], [2.0, 3.0, 4.0, 5.0], [4.0, 5.0, 6.0, 7.0]]
        )
        np.testing.assert_array_equal(out.data, expected)

    def test_gradient_overlap_accumulates(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        loss = tsum(unfold(x, 2))
        loss.backward()
        # middle row participates in both windows
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [2.0, 2.0], [1.0, 1.0]])


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_large_logits_no_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_log_odds(self):
        # softmax([ln 1, ln 3]) = [1/4, 3/4]
        out = softmax(Tensor([np.log(1.0), np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.empty(0)))

    @given(
        st.lists(
            st.floats(min_value=-50, max_value=50, allow_nan=False),
            min_size=1,
            max_size=8,
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_simplex_and_shift_invariance(self, logits):
        v = np.array(logits)
        out = softmax(Tensor(v))
        assert np.all(out.data > 0)
        assert abs(out.data.sum() - 1.0) < 1e-12
        shifted = softmax(Tensor(v + 7.5))
        np.testing.assert_allclose(out.data, shifted.data, atol=1e-12)


class TestCrossEntropy:
    def test_certain_correct_is_zero(self):
        assert cross_entropy(Tensor([1.0, 0.0, 0.0]), 0).item() == 0.0

    def test_even_split(self):
        loss = cross_entropy(Tensor([0.5, 0.5]), 1)
        assert abs(loss.item() - np.log(2.0)) < 1e-15

    def test_zero_probability_clamped(self):
        loss = cross_entropy(Tensor([0.0, 1.0]), 0)
        assert np.isfinite(loss.item())
        assert abs(loss.item() - (-np.log(1e-12))) < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([0.5, 0.5]), 2)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_relu_gate(self):
        x = Tensor([-1.0, 2.0])
        tsum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_diamond_graph_accumulates(self):
        x = Tensor([3.0])
        y = ad.scale(x, 2.0)
        z = y + y
        tsum(z).backward()
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_linearity_of_losses(self):
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(3, 3)))
        x1 = Tensor(rng.normal(size=3))
        x2 = Tensor(rng.normal(size=3))

        joint = tsum(dot(w, x1)) + tsum(dot(w, x2))
        joint.backward()
        joint_grad = w.grad.copy()

        w.zero_grad()
        tsum(dot(w, x1)).backward()
        tsum(dot(w, x2)).backward()  # accumulates onto the first
        np.testing.assert_allclose(w.grad, joint_grad, atol=1e-12)

    def test_non_scalar_raises(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(ShapeError):
            relu(x).backward()

    def test_detached_raises(self):
        x = Tensor(5.0)
        with pytest.raises(NoTapeError):
            x.backward()
        y = tsum(relu(Tensor([1.0, 2.0])))
        with pytest.raises(NoTapeError):
            y.detach().backward()

    def test_mlp_matches_central_difference_oracle(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.normal(size=(3, 4)))
        b1 = Tensor(rng.normal(size=4))
        w2 = Tensor(rng.normal(size=(4, 2)))
        b2 = Tensor(rng.normal(size=2))
        x = np.array([0.3, -1.2, 0.8])

        def forward():
            h = relu(dot(Tensor(x), w1) + b1)
            return tsum(tanh(dot(h, w2) + b2))

        loss = forward()
        loss.backward()
        analytic = [w1.grad, b1.grad, w2.grad, b2.grad]

        numeric = central_difference(
            lambda: forward().item(), [w1.data, b1.data, w2.data, b2.data]
        )
        for a, n in zip(analytic, numeric):
            err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
            assert err.max() < 1e-4

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            w = Tensor(rng.normal(size=(4, 4)))
            x = Tensor(rng.normal(size=4))
            loss = tsum(relu(dot(w, x)))
            loss.backward()
            return loss.data.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestOps:
    def test_dot_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dot(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_take_rows_forward_and_grad(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        y = take_rows(x, 2)
        np.testing.assert_array_equal(y.data, [[0.0, 1.0], [2.0, 3.0]])
        tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])

    def test_concat_roundtrip_grads(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0])
        out = concat([a, b])
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])
        tsum(ad.mul(out, Tensor([1.0, 10.0, 100.0]))).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 10.0])
        np.testing.assert_array_equal(b.grad, [100.0])

    def test_add_n_fixed_order(self):
        ts = [Tensor([float(i)]) for i in range(5)]
        out = add_n(ts)
        np.testing.assert_array_equal(out.data, [10.0])
        tsum(out).backward()
        for t in ts:
            np.testing.assert_array_equal(t.grad, [1.0])

    def test_max_rows_routes_gradient_to_argmax(self):
        x = Tensor([[1.0, 5.0], [4.0, 2.0], [4.0, 5.0]])
        y = max_rows(x)
        np.testing.assert_array_equal(y.data, [4.0, 5.0])
        tsum(y).backward()
        # ties break toward the first maximal row
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])

    def test_lookup_gathers_and_scatters(self):
        table = Tensor(np.arange(8.0).reshape(4, 2))
        ids = np.array([0, 0, 3])
        out = lookup(table, ids)
        np.testing.assert_array_equal(out.data, [[0.0, 1.0], [0.0, 1.0], [6.0, 7.0]])
        tsum(out).backward()
        np.testing.assert_array_equal(
            table.grad, [[2.0, 2.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]]
        )

    def test_lookup_out_of_range(self):
        with pytest.raises(IndexError):
            lookup(Tensor(np.ones((2, 2))), np.array([2]))

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_invalid_rate(self):
        with pytest.raises(ShapeError):
            dropout(Tensor([1.0]), 1.0, np.random.default_rng(0))

    def test_dropout_rescales_survivors(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.ones(1000))
        out = dropout(x, 0.5, rng)
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 2.0)
        assert 0.4 < kept.size / 1000 < 0.6


class TestGradCheck:
    def test_quadratic_is_tight(self):
        x = Tensor([1.5, -0.5, 2.0])

        def f():
            return tsum(ad.mul(x, x))

        report = grad_check(f, [x])
        assert report.max_rel_error < 1e-8
        assert report.checked == 3
        assert report.excluded == []

    def test_relu_kink_coordinate_excluded(self):
        x = Tensor([0.0, 1.0])

        def f():
            return tsum(relu(x))

        report = grad_check(f, [x])
        assert (0, 0) in report.excluded
        assert report.checked == 1
        assert report.max_rel_error < 1e-8

    def test_composite_network(self):
        rng = np.random.default_rng(19)
        w = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(rng.normal(size=3))
        x = np.array([0.5, -0.25, 1.0, 0.75])

        def f():
            h = relu(dot(Tensor(x), w) + b)
            return cross_entropy(softmax(h), 1)

        report = grad_check(f, [w, b])
        assert report.max_rel_error < 1e-4

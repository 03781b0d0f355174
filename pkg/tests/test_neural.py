"""
Kernel tests: naive-loop oracles for the forward pass and central-difference
checks for every backward pass.
"""

import math

import numpy as np
import pytest

import neural as nn
from errors import GraphError, ModelError, NumericalError, ShapeError
from neural import Parameter, SeededRng, Tensor

GRAD_TOL = 1e-4


def leaf(np_rng, *shape, low=None):
    data = np_rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


# ============================================
# NAIVE ORACLES
# ============================================

def naive_conv1d(x, w, b, stride, padding, dilation, groups):
    n, c_in, length = x.shape
    c_out, c_group, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    l_out = (length + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    per_group = c_out // groups
    y = np.zeros((n, c_out, l_out))
    for i in range(n):
        for o in range(c_out):
            g = o // per_group
            for t in range(l_out):
                acc = 0.0 if b is None else b[o]
                for c in range(c_group):
                    for j in range(k):
                        acc += w[o, c, j] * xp[i, g * c_group + c, t * stride + j * dilation]
                y[i, o, t] = acc
    return y


def naive_attention(q_in, k_in, v_in, heads, p):
    d = q_in.shape[-1]
    dh = d // heads
    q, k, v = q_in @ p["wq"] + p["bq"], k_in @ p["wk"] + p["bk"], v_in @ p["wv"] + p["bv"]
    out = np.zeros((q_in.shape[0], d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(q_in.shape[0]):
            scores = np.array([q[i, cols] @ k[j, cols] / math.sqrt(dh) for j in range(k_in.shape[0])])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, cols] = sum(w[j] * v[j, cols] for j in range(k_in.shape[0]))
    return out @ p["wo"] + p["bo"]


class TestOracles:
    def test_linear_matches_loops(self, np_rng):
        x, W, b = np_rng.standard_normal((3, 5)), np_rng.standard_normal((5, 4)), np_rng.standard_normal(4)
        expected = np.array([[sum(x[i, k] * W[k, j] for k in range(5)) + b[j] for j in range(4)] for i in range(3)])
        out = nn.linear(Tensor(x), Tensor(W), Tensor(b)).data
        assert np.max(np.abs(out - expected)) < 1e-12

    @pytest.mark.parametrize("stride,padding,dilation,groups", [
        (1, 0, 1, 1), (2, 3, 1, 1), (1, 2, 2, 1), (3, 1, 1, 2), (1, 1, 1, 4),
    ])
    def test_conv1d_matches_loops(self, np_rng, stride, padding, dilation, groups):
        x = np_rng.standard_normal((2, 4, 17))
        w = np_rng.standard_normal((4, 4 // groups, 3))
        b = np_rng.standard_normal(4)
        out = nn.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation, groups).data
        assert np.max(np.abs(out - naive_conv1d(x, w, b, stride, padding, dilation, groups))) < 1e-12

    def test_attention_matches_loops(self, np_rng):
        d, heads = 8, 2
        p = {name: np_rng.standard_normal((d, d) if name.startswith("w") else d)
             for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        q, kv = np_rng.standard_normal((5, d)), np_rng.standard_normal((7, d))
        params = {name: Tensor(v) for name, v in p.items()}
        out = nn.multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), heads, params).data
        assert np.max(np.abs(out - naive_attention(q, kv, kv, heads, p))) < 1e-12

    def test_max_pool_ignores_padding(self):
        x = Tensor(-np.arange(1.0, 7.0).reshape(1, 1, 6))
        out = nn.max_pool1d(x, kernel=3, stride=2, padding=1).data
        assert out.tolist() == [[[-1.0, -2.0, -4.0]]]

    def test_avg_pool_zero_pads_tail(self):
        out = nn.avg_pool1d(Tensor(np.arange(5.0)), 2).data
        np.testing.assert_allclose(out, [0.5, 2.5, 2.0])

    def test_softmax_rows_sum_to_one(self, np_rng):
        out = nn.softmax(Tensor(np_rng.standard_normal((6, 4)) * 50), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_layer_norm_statistics(self, np_rng):
        out = nn.layer_norm(Tensor(np_rng.standard_normal((3, 16)) * 5 + 2)).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_gelu_uses_exact_erf(self):
        x = np.array([-1.0, 0.0, 2.0])
        expected = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(nn.activation(Tensor(x), "gelu").data, expected, atol=1e-12)


# ============================================
# GRADIENTS
# ============================================

class TestGradients:
    def test_elementwise_chain(self, np_rng):
        a, b = leaf(np_rng, 3, 4), leaf(np_rng, 4, low=0.5)
        fn = lambda: nn.tensor_sum(nn.exp(a * 0.3) / b - nn.log(b) + nn.power(b, 1.5) * nn.sigmoid(a))
        assert nn.gradcheck(fn, [a, b]) < GRAD_TOL

    @pytest.mark.parametrize("kind", ["relu", "gelu", "silu"])
    def test_activations(self, np_rng, kind):
        x = leaf(np_rng, 2, 5)
        x.data += np.sign(x.data) * 0.05
        assert nn.gradcheck(lambda: nn.tensor_sum(nn.activation(x, kind) * x), [x]) < GRAD_TOL

    def test_softplus_and_clip(self, np_rng):
        x = leaf(np_rng, 6)
        x.data = np.array([-2.0, -0.7, 0.1, 0.4, 1.3, 3.0])
        fn = lambda: nn.tensor_sum(nn.softplus(x) * nn.clip(x, -1.0, 1.0))
        assert nn.gradcheck(fn, [x]) < GRAD_TOL

    def test_shape_ops(self, np_rng):
        x = leaf(np_rng, 2, 3, 4)
        fn = lambda: nn.tensor_sum(
            nn.concat([nn.flip(x, 2), nn.swapaxes(nn.reshape(x, (2, 4, 3)), 1, 2)], axis=-1)[:, 1:, ::2] ** 2
        )
        assert nn.gradcheck(fn, [x]) < GRAD_TOL

    def test_fancy_index_accumulates(self, np_rng):
        x = leaf(np_rng, 5)
        idx = np.array([0, 2, 2, 4])
        assert nn.gradcheck(lambda: nn.tensor_sum(x[idx] ** 2), [x]) < GRAD_TOL
        x.grad = None
        nn.backward(nn.tensor_sum(x[idx]))
        assert x.grad.tolist() == [1.0, 0.0, 2.0, 0.0, 1.0]

    def test_matmul_batched(self, np_rng):
        a, b = leaf(np_rng, 2, 3, 4), leaf(np_rng, 2, 4, 5)
        assert nn.gradcheck(lambda: nn.mean(nn.matmul(a, b) ** 2), [a, b]) < GRAD_TOL

    @pytest.mark.parametrize("stride,padding,dilation,groups", [(1, 1, 1, 1), (2, 2, 2, 1), (1, 1, 1, 3)])
    def test_conv1d(self, np_rng, stride, padding, dilation, groups):
        x, w, b = leaf(np_rng, 2, 3, 11), leaf(np_rng, 3, 3 // groups, 3), leaf(np_rng, 3)
        fn = lambda: nn.tensor_sum(nn.conv1d(x, w, b, stride, padding, dilation, groups) ** 2)
        assert nn.gradcheck(fn, [x, w, b]) < GRAD_TOL

    def test_pools(self, np_rng):
        x = leaf(np_rng, 1, 2, 9)
        fn = lambda: nn.tensor_sum(nn.max_pool1d(x, 3, 2, 1) ** 2) + nn.tensor_sum(nn.avg_pool1d(x, 4) ** 2)
        assert nn.gradcheck(fn, [x]) < GRAD_TOL

    def test_layer_norm_and_softmax(self, np_rng):
        x, g, b = leaf(np_rng, 3, 6), leaf(np_rng, 6), leaf(np_rng, 6)
        target = np_rng.standard_normal((3, 6))
        fn = lambda: nn.tensor_sum(nn.softmax(nn.layer_norm(x, g, b), axis=-1) * Tensor(target))
        assert nn.gradcheck(fn, [x, g, b]) < GRAD_TOL

    def test_attention(self, np_rng):
        d = 8
        params = {name: leaf(np_rng, *((d, d) if name.startswith("w") else (d,)))
                  for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        for p in params.values():
            p.data *= 0.3
        q, kv = leaf(np_rng, 2, 3, d), leaf(np_rng, 2, 4, d)
        fn = lambda: nn.tensor_sum(nn.multi_head_attention(q, kv, kv, 2, params) ** 2)
        assert nn.gradcheck(fn, [q, kv] + list(params.values())) < GRAD_TOL


# ============================================
# GRAPH SEMANTICS + ERRORS
# ============================================

class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        nn.backward(nn.tensor_sum(y + y))
        assert x.grad.tolist() == [12.0]

    def test_parameter_grad_accumulates_until_zeroed(self):
        p = Parameter(np.ones(2))
        nn.backward(nn.tensor_sum(p * 2.0))
        nn.backward(nn.tensor_sum(p * 2.0))
        assert p.grad.tolist() == [4.0, 4.0]
        p.zero_grad()
        assert p.grad.tolist() == [0.0, 0.0]

    def test_no_grad_records_nothing(self):
        p = Parameter(np.ones(2))
        with nn.no_grad():
            y = nn.tensor_sum(p * 3.0)
        assert not y.requires_grad
        with pytest.raises(GraphError):
            nn.backward(y)

    def test_backward_needs_scalar(self):
        with pytest.raises(ShapeError):
            nn.backward(Parameter(np.ones(3)) * 2.0)

    def test_log_of_zero_is_numerical_error(self):
        with pytest.raises(NumericalError):
            nn.log(Tensor(np.array([0.0, 1.0])))

    def test_unknown_activation(self):
        with pytest.raises(ModelError):
            nn.activation(Tensor(np.ones(2)), "swish-ish")

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            nn.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError):
            nn.conv1d(Tensor(np.ones((1, 1, 3))), Tensor(np.ones((1, 1, 5))))
        with pytest.raises(ShapeError):
            nn.multi_head_attention(np.ones((2, 6)), np.ones((2, 6)), np.ones((2, 6)), 4, {})

    def test_dropout_identity_in_eval(self, np_rng):
        x = Tensor(np_rng.standard_normal(10))
        assert nn.dropout(x, 0.5, SeededRng(0), training=False) is x

    def test_dropout_scales_kept_units(self):
        out = nn.dropout(Tensor(np.ones(1000)), 0.5, SeededRng(0), training=True).data
        assert set(np.unique(out)) <= {0.0, 2.0}


class TestSeededRng:
    def test_same_seed_same_draws(self):
        assert np.array_equal(SeededRng(7, 1).normal(size=5), SeededRng(7, 1).normal(size=5))

    def test_streams_are_independent(self):
        assert not np.array_equal(SeededRng(7, 1).normal(size=5), SeededRng(7, 2).normal(size=5))

    def test_child_matches_explicit_stream(self):
        assert np.array_equal(SeededRng(3, 1).child(4).random(3), SeededRng(3, 1, 4).random(3))

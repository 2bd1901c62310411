import numpy as np
import pytest

from scenematch import attention as att
from scenematch import autograd as ag
from scenematch.autograd import Tensor
from scenematch.model import ModelConfig, init_params

from conftest import check_grads


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def layer_params(seed=0, C=8, layers=1, live=True):
    layers_ = init_params(ModelConfig(C=C, layers=layers), seed)["layers"]
    if live:  # the fusion MLP starts at zero; give it weight so messages matter
        r = np.random.default_rng(seed + 100)
        for lp in layers_:
            lp["mlp"][-1]["w"].data[:] = r.normal(0, 0.3, lp["mlp"][-1]["w"].shape)
            lp["ln1"]["g"].data[:] = r.uniform(0.5, 1.5, C)
            lp["ln2"]["b"].data[:] = r.normal(0, 0.1, 2 * C)
    return layers_


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def mlp(x, layers):
    from scipy.special import erf

    for k, layer in enumerate(layers):
        x = x @ layer["w"].data + layer["b"].data
        if k < len(layers) - 1:
            x = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    return x


def reference_layer(xs, xt, p):
    """Straight-line layer: both cross directions computed from their own score products."""
    wq, wk, wv = (p[k].data for k in ("wq", "wk", "wv"))
    hs = layer_norm(xs, p["ln1"]["g"].data, p["ln1"]["b"].data)
    ht = layer_norm(xt, p["ln1"]["g"].data, p["ln1"]["b"].data)
    d = np.sqrt(wq.shape[1])
    out = []
    for h_self, h_other, x in ((hs, ht, xs), (ht, hs, xt)):
        self_msg = softmax((h_self @ wq) @ (h_self @ wk).T / d) @ (h_self @ wv)
        out.append((x, self_msg))
    cross_s = softmax((hs @ wq) @ (ht @ wk).T / d) @ (ht @ wv)
    cross_t = softmax((ht @ wk) @ (hs @ wq).T / d) @ (hs @ wv)
    res = []
    for (x, self_msg), cross in zip(out, (cross_s, cross_t)):
        fused = layer_norm(np.hstack([self_msg, cross]), p["ln2"]["g"].data, p["ln2"]["b"].data)
        res.append(x + mlp(fused, p["mlp"]))
    return res


class TestSelfAttention:
    def test_single_token(self, rng):
        p = layer_params()[0]
        x = Tensor(rng.normal(size=(1, 8)))
        np.testing.assert_allclose(att.self_attention(x, p).data, x.data @ p["wv"].data, atol=1e-15)

    def test_identical_rows(self, rng):
        p = layer_params()[0]
        x = Tensor(np.tile(rng.normal(size=(1, 8)), (5, 1)))
        out = att.self_attention(x, p).data
        np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_per_query_loop(self, seed):
        r = np.random.default_rng(seed)
        p = layer_params(seed)[0]
        x = r.normal(size=(7, 8))
        q, k, v = x @ p["wq"].data, x @ p["wk"].data, x @ p["wv"].data
        expected = np.zeros_like(x)
        for i in range(7):
            s = np.array([q[i] @ k[j] for j in range(7)]) / np.sqrt(8)
            w = np.exp(s - s.max())
            w /= w.sum()
            expected[i] = sum(w[j] * v[j] for j in range(7))
        np.testing.assert_allclose(att.self_attention(Tensor(x), p).data, expected, atol=1e-10)

    def test_heads_split_channels(self, rng):
        p = layer_params()[0]
        x = rng.normal(size=(5, 8))
        two = att.self_attention(Tensor(x), p, heads=2).data
        q, k, v = x @ p["wq"].data, x @ p["wk"].data, x @ p["wv"].data
        halves = [softmax(q[:, s] @ k[:, s].T / 2.0) @ v[:, s] for s in (slice(0, 4), slice(4, 8))]
        np.testing.assert_allclose(two, np.hstack(halves), atol=1e-12)


class TestCrossAttention:
    def test_single_tokens(self, rng):
        p = layer_params()[0]
        xs, xt = Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8)))
        ms, mt = att.shared_cross_attention(xs, xt, p)
        np.testing.assert_allclose(ms.data, xt.data @ p["wv"].data, atol=1e-15)
        np.testing.assert_allclose(mt.data, xs.data @ p["wv"].data, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_product_reference(self, seed):
        r = np.random.default_rng(seed)
        p = layer_params(seed)[0]
        xs, xt = r.normal(size=(5, 8)), r.normal(size=(9, 8))
        ms, mt = att.shared_cross_attention(Tensor(xs), Tensor(xt), p)
        q_s, k_t = xs @ p["wq"].data, xt @ p["wk"].data
        np.testing.assert_allclose(ms.data, softmax(q_s @ k_t.T / np.sqrt(8)) @ (xt @ p["wv"].data), atol=1e-12)
        np.testing.assert_allclose(mt.data, softmax(k_t @ q_s.T / np.sqrt(8)) @ (xs @ p["wv"].data), atol=1e-12)

    def test_roles_are_asymmetric(self, rng):
        p = layer_params(4)[0]
        xs, xt = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(6, 8)))
        ms, mt = att.shared_cross_attention(xs, xt, p)
        mt2, ms2 = att.shared_cross_attention(xt, xs, p)
        assert not np.allclose(ms.data, ms2.data)
        assert not np.allclose(mt.data, mt2.data)

    def test_one_score_product(self, rng):
        p = layer_params()[0]
        xs, xt = Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(9, 8)))
        with ag.count_ops() as ops:
            att.shared_cross_attention(xs, xt, p)
        assert [s for _, s in ops if s in ((5, 9), (9, 5))] == [(5, 9)]


class TestParallelLayer:
    def test_zero_fusion_is_identity(self, rng):
        p = layer_params(live=False)[0]
        xs, xt = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(6, 8)))
        a, b = att.parallel_layer(xs, xt, p)
        assert a.data.tobytes() == xs.data.tobytes() and b.data.tobytes() == xt.data.tobytes()

    @pytest.mark.parametrize("seed", range(3))
    def test_straight_line_reference(self, seed):
        r = np.random.default_rng(seed)
        p = layer_params(seed)[0]
        xs, xt = r.normal(size=(6, 8)), r.normal(size=(4, 8))
        a, b = att.parallel_layer(Tensor(xs), Tensor(xt), p)
        ra, rb = reference_layer(xs, xt, p)
        np.testing.assert_allclose(a.data, ra, atol=1e-10)
        np.testing.assert_allclose(b.data, rb, atol=1e-10)

    def test_permutation_equivariant(self, rng):
        p = layer_params(1)[0]
        xs, xt = rng.normal(size=(7, 8)), rng.normal(size=(5, 8))
        perm = rng.permutation(7)
        a, b = att.parallel_layer(Tensor(xs), Tensor(xt), p)
        a2, b2 = att.parallel_layer(Tensor(xs[perm]), Tensor(xt), p)
        np.testing.assert_allclose(a2.data, a.data[perm], atol=1e-12)
        np.testing.assert_allclose(b2.data, b.data, atol=1e-12)


class TestStack:
    def test_one_layer_equals_parallel_layer(self, rng):
        layers = layer_params(layers=2)
        xs, xt = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(3, 8)))
        a, b = att.stack_forward(xs, xt, layers, L=1)
        c, d = att.parallel_layer(xs, xt, layers[0])
        assert a.data.tobytes() == c.data.tobytes() and b.data.tobytes() == d.data.tobytes()

    def test_zeroed_second_layer(self, rng):
        layers = layer_params(layers=2)
        for layer in layers[1]["mlp"]:
            layer["w"].data[:] = 0
            layer["b"].data[:] = 0
        xs, xt = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(3, 8)))
        a, b = att.stack_forward(xs, xt, layers, L=2)
        c, d = att.stack_forward(xs, xt, layers, L=1)
        np.testing.assert_array_equal(a.data, c.data)
        np.testing.assert_array_equal(b.data, d.data)

    def test_bad_depth(self, rng):
        with pytest.raises(ValueError):
            att.stack_forward(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))), layer_params(), L=2)

    def test_three_layer_gradients(self, rng):
        layers = layer_params(7, C=4, layers=3)
        xs, xt = Tensor(rng.normal(size=(3, 4)), True, "xs"), Tensor(rng.normal(size=(2, 4)), True, "xt")
        w_s, w_t = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))

        def loss():
            a, b = att.stack_forward(xs, xt, layers)
            return ag.sum(a * w_s) + ag.sum(b * w_t)

        tensors = [xs, xt] + [t for _, t in ag.parameters(layers)]
        check_grads(loss, tensors)

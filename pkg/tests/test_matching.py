import itertools

import numpy as np
import pytest
from conftest import numeric_grad, rel_err
from hypothesis import given
from hypothesis import strategies as st

from sigma_match.autograd import Tensor
from sigma_match.errors import NumericError, PreconditionError, ShapeError
from sigma_match.graph_core import LN_EPS, AdjacencyMatrix, Domain, NodeSet, Params
from sigma_match.matching import (
    AffinityMatrix,
    brute_force_assignment,
    build_match_targets,
    compute_affinity,
    cross_graph_interaction,
    hungarian,
    hungarian_oracle,
    instance_normalize,
    matching_loss,
    multiple_matching_loss,
    node_affinity,
    node_classification_loss,
    sinkhorn_normalize,
    stochastic_residual,
)


def ns(v, labels=None, domain=Domain.SOURCE):
    v = np.asarray(v, float)
    return NodeSet(Tensor(v, requires_grad=True), np.zeros(len(v), int) if labels is None else labels, domain)


def ln(h, g=None, s=None):
    out = (h - h.mean(-1, keepdims=True)) / np.sqrt(h.var(-1, keepdims=True) + LN_EPS)
    return out if g is None else out * g + s


def cgi_params(rng, d, zero_p=False):
    p = Params()
    for k in ("wq", "wk", "wv", "wp"):
        p.add(f"cgi.{k}.weight", rng.standard_normal((d, d)) * 0.5)
    if zero_p:
        p["cgi.wp.weight"].data[:] = 0.0
    p.add("cgi.ln.gain", rng.random(d) + 0.5)
    p.add("cgi.ln.shift", rng.standard_normal(d))
    return p


def aff_params(rng, d, dp, h):
    p = Params()
    p.add("aff.fp.weight", rng.standard_normal((d, dp)))
    p.add("aff.fp.bias", rng.standard_normal(dp))
    p.add("aff.mlp.fc1.weight", rng.standard_normal((2 * dp, h)))
    p.add("aff.mlp.fc1.bias", rng.standard_normal(h))
    p.add("aff.mlp.fc2.weight", rng.standard_normal((h, 1)))
    p.add("aff.mlp.fc2.bias", rng.standard_normal(1))
    return p


def sinkhorn_oracle(x, k):
    m = np.exp(x - x.max())
    for _ in range(k):
        m = m / m.sum(axis=0, keepdims=True)
        m = m / m.sum(axis=1, keepdims=True)
    return m


class TestCGI:
    def test_zero_projection_is_layer_norm(self, rng):
        p = cgi_params(rng, 4, zero_p=True)
        s, t = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        xs, xt = cross_graph_interaction(ns(s), ns(t), p)
        g, sh = p["cgi.ln.gain"].data, p["cgi.ln.shift"].data
        np.testing.assert_allclose(xs.values, ln(s, g, sh), atol=1e-12)
        np.testing.assert_allclose(xt.values, ln(t, g, sh), atol=1e-12)

    def test_singleton_attention(self, rng):
        p = cgi_params(rng, 3)
        s, t = rng.standard_normal((4, 3)), rng.standard_normal((1, 3))
        xs, _ = cross_graph_interaction(ns(s), ns(t), p)
        w = {k: p[f"cgi.{k}.weight"].data for k in ("wv", "wp")}
        msg = (t @ w["wv"]) @ w["wp"]
        np.testing.assert_allclose(xs.values, ln(s + msg, p["cgi.ln.gain"].data, p["cgi.ln.shift"].data),
                                   atol=1e-12)

    def test_dense_oracle(self, rng):
        d = 4
        p = cgi_params(rng, d)
        s, t = rng.standard_normal((3, d)), rng.standard_normal((4, d))
        xs, xt = cross_graph_interaction(ns(s), ns(t), p)
        w = {k: p[f"cgi.{k}.weight"].data for k in ("wq", "wk", "wv", "wp")}
        g, sh = p["cgi.ln.gain"].data, p["cgi.ln.shift"].data

        def attend(a, b):
            out = np.zeros_like(a)
            for i in range(len(a)):
                logits = np.array([(a[i] @ w["wq"]) @ (b[j] @ w["wk"]) for j in range(len(b))])
                e = np.exp(logits - logits.max())
                att = e / e.sum()
                msg = sum(att[j] * (b[j] @ w["wv"]) for j in range(len(b))) @ w["wp"]
                out[i] = ln(msg + a[i], g, sh)
            return out

        np.testing.assert_allclose(xs.values, attend(s, t), atol=1e-10)
        np.testing.assert_allclose(xt.values, attend(t, s), atol=1e-10)

    def test_role_symmetry(self, rng):
        p = cgi_params(rng, 3)
        s, t = rng.standard_normal((2, 3)), rng.standard_normal((5, 3))
        a_s, a_t = cross_graph_interaction(ns(s), ns(t), p)
        b_t, b_s = cross_graph_interaction(ns(t), ns(s), p)
        np.testing.assert_allclose(a_s.values, b_s.values, atol=1e-12)
        np.testing.assert_allclose(a_t.values, b_t.values, atol=1e-12)

    def test_empty_side(self, rng):
        with pytest.raises(PreconditionError):
            cross_graph_interaction(ns(np.zeros((0, 3))), ns(np.ones((2, 3))), cgi_params(rng, 3))


class TestAffinity:
    def test_configured_sum(self, rng):
        d, h = 3, 2
        p = Params()
        p.add("aff.fp.weight", np.eye(d))
        p.add("aff.fp.bias", np.zeros(d))
        # hidden unit 0 = +sum, unit 1 = -sum; output = relu(u0) - relu(u1) = sum
        w1 = np.zeros((2 * d, h))
        w1[:, 0], w1[:, 1] = 1.0, -1.0
        p.add("aff.mlp.fc1.weight", w1)
        p.add("aff.mlp.fc1.bias", np.zeros(h))
        p.add("aff.mlp.fc2.weight", np.array([[1.0], [-1.0]]))
        p.add("aff.mlp.fc2.bias", np.zeros(1))
        s, t = rng.standard_normal((2, d)), rng.standard_normal((3, d))
        raw = node_affinity(ns(s), ns(t), p).raw.data
        np.testing.assert_allclose(raw, s.sum(1)[:, None] + t.sum(1)[None, :], atol=1e-12)

    def test_row_swap(self, rng):
        p = aff_params(rng, 3, 4, 5)
        s, t = rng.standard_normal((3, 3)), rng.standard_normal((2, 3))
        a = node_affinity(ns(s), ns(t), p).raw.data
        b = node_affinity(ns(s[[1, 0, 2]]), ns(t), p).raw.data
        np.testing.assert_allclose(b, a[[1, 0, 2]], atol=1e-12)

    def test_loop_oracle(self, rng):
        p = aff_params(rng, 3, 2, 4)
        s, t = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        raw = node_affinity(ns(s), ns(t), p).raw.data
        a = {k: t_.data for k, t_ in p.items()}
        for i, j in itertools.product(range(2), range(2)):
            z = np.concatenate([s[i] @ a["aff.fp.weight"] + a["aff.fp.bias"],
                                t[j] @ a["aff.fp.weight"] + a["aff.fp.bias"]])
            h = np.maximum(z @ a["aff.mlp.fc1.weight"] + a["aff.mlp.fc1.bias"], 0)
            ref = h @ a["aff.mlp.fc2.weight"][:, 0] + a["aff.mlp.fc2.bias"][0]
            assert raw[i, j] == pytest.approx(ref, abs=1e-10)

    def test_mlp_width_checked(self, rng):
        p = aff_params(rng, 3, 2, 4)
        p.add("aff.mlp.fc2.weight", np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            node_affinity(ns(np.ones((2, 3))), ns(np.ones((2, 3))), p)


class TestInstanceNorm:
    def test_example(self):
        out = instance_normalize(np.array([[1.0, 3.0], [1.0, 3.0]]), eps=0.0)
        np.testing.assert_allclose(out.data, [[-1, 1], [-1, 1]])

    def test_constant(self):
        np.testing.assert_array_equal(instance_normalize(np.full((3, 2), 4.0)).data, 0.0)

    def test_moments(self, rng):
        out = instance_normalize(rng.standard_normal((5, 7)) * 3 + 1).data
        assert abs(out.mean()) < 1e-6 and abs(out.var() - 1) < 1e-6


class TestSinkhorn:
    def test_constant_input(self):
        np.testing.assert_allclose(sinkhorn_normalize(np.full((4, 4), 2.0)).data, 0.25)

    def test_square_random(self, rng):
        x = rng.random((3, 3))
        m = sinkhorn_normalize(x).data
        np.testing.assert_allclose(m.sum(0), 1, atol=1e-6)
        np.testing.assert_allclose(m.sum(1), 1, atol=1e-6)
        np.testing.assert_allclose(m, sinkhorn_oracle(x, 20), atol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_matches_iteration_oracle(self, n, m, k, seed):
        x = np.random.default_rng(seed).standard_normal((n, m)) * 3
        np.testing.assert_allclose(sinkhorn_normalize(x, k).data, sinkhorn_oracle(x, k), atol=1e-12)

    def test_diag_dominant(self):
        x = np.eye(4) * 10.0
        m = sinkhorn_normalize(x).data
        assert np.all(m.argmax(1) == np.arange(4))
        assert np.all(np.diag(m) > 0.99)

    def test_rectangular_rows_stochastic(self, rng):
        m = sinkhorn_normalize(rng.random((3, 6))).data
        np.testing.assert_allclose(m.sum(1), 1, atol=1e-12)
        assert stochastic_residual(m) < 1e-6

    def test_idempotent(self, rng):
        m = sinkhorn_normalize(rng.random((5, 5))).data
        np.testing.assert_allclose(sinkhorn_normalize(np.log(m)).data, m, atol=1e-6)

    def test_rejects_nonfinite(self):
        with pytest.raises(NumericError):
            sinkhorn_normalize(np.array([[np.inf, 0.0], [0.0, 0.0]]))


class TestTargetsAndLoss:
    def test_targets(self):
        np.testing.assert_array_equal(build_match_targets([1, 2], [2, 1]).y, [[0, 1], [1, 0]])
        np.testing.assert_array_equal(build_match_targets([1, 1], [2, 3]).y, 0)
        np.testing.assert_array_equal(build_match_targets([1, 1], [1, 1]).y, 1)
        np.testing.assert_array_equal(build_match_targets([0, 1], [0, 1], False).y, [[0, 0], [0, 1]])

    def test_perfect(self):
        i = np.eye(2)
        out = matching_loss(i, i, i, i)
        assert out.floats() == {"te": 0.0, "fs": 0.0, "qc": 0.0, "total": 0.0}

    def test_hand_example(self):
        out = matching_loss(np.array([[1.0, 0.0], [0.5, 1.0]]), np.eye(2), np.eye(2), np.eye(2))
        assert out.te.item() == 0.0
        assert out.fs.item() == pytest.approx(0.125, abs=1e-15)
        assert out.qc.item() == 0.0

    @pytest.mark.parametrize("mode", ["squared", "literal"])
    def test_loop_oracle(self, mode, rng):
        n = 4
        m, a_s, a_t = rng.random((n, n)), rng.random((n, n)), rng.random((n, n))
        y = (rng.random((n, n)) < 0.4).astype(float)
        y[0] = 0.0
        out = matching_loss(m, y, a_s, a_t, mode)
        rows = [i for i in range(n) if y[i].sum() > 0]
        te = sum((max(m[i, j] * y[i, j] for j in range(n)) - 1) ** 2 for i in rows) / len(rows)
        fs = sum((m[i, j] * (1 - y[i, j])) ** 2 for i in range(n) for j in range(n)) / (1 - y).sum()
        qc = 0.0
        for i in range(n):
            for j in range(n):
                r = sum(a_s[i, k] * m[k, j] for k in range(n)) - sum(m[i, k] * a_t[k, j] for k in range(n))
                qc += r * r if mode == "squared" else r
        qc /= n * n
        assert out.te.item() == pytest.approx(te, abs=1e-10)
        assert out.fs.item() == pytest.approx(fs, abs=1e-10)
        assert out.qc.item() == pytest.approx(qc, abs=1e-10)
        assert out.te_excluded == n - len(rows)

    def test_all_positive_targets(self):
        out = matching_loss(np.full((2, 2), 0.5), np.ones((2, 2)), np.eye(2), np.eye(2))
        assert out.fs_undefined and out.fs.item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matching_loss(np.eye(2), np.eye(3), np.eye(2), np.eye(2))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            matching_loss(np.eye(2), np.eye(2), np.eye(2), np.eye(2), "cubic")

    def test_gradients_through_chain(self, rng):
        d = 3
        p = cgi_params(rng, d)
        for k, v in aff_params(rng, d, 2, 4).items():
            p.add(k, v.data)
        s, t = rng.standard_normal((3, d)), rng.standard_normal((4, d))
        a_s, a_t = rng.random((3, 3)), rng.random((4, 4))
        y = build_match_targets([1, 2, 0], [2, 1, 1, 0])

        def run(src, tgt):
            xs, xt = cross_graph_interaction(src, tgt, p)
            aff = compute_affinity(xs, xt, p)
            return matching_loss(aff, y, AdjacencyMatrix(Tensor(a_s)), AdjacencyMatrix(Tensor(a_t))).total

        src, tgt = ns(s), ns(t)
        run(src, tgt).backward()
        f = lambda: run(ns(s), ns(t)).item()
        assert rel_err(src.embeddings.grad, numeric_grad(f, s)) < 1e-4
        assert rel_err(tgt.embeddings.grad, numeric_grad(f, t)) < 1e-4
        for name, tensor in p.items():
            assert rel_err(tensor.grad, numeric_grad(f, tensor.data)) < 1e-4, name

    @pytest.mark.parametrize("mode", ["squared", "literal"])
    def test_gradients_wrt_affinity_and_adjacency(self, mode, rng):
        m, a_s, a_t = rng.random((3, 4)), rng.random((3, 3)), rng.random((4, 4))
        y = build_match_targets([1, 2, 0], [2, 1, 1, 0]).y
        ts = [Tensor(x, requires_grad=True) for x in (m, a_s, a_t)]
        matching_loss(ts[0], y, ts[1], ts[2], mode).total.backward()
        f = lambda: matching_loss(m, y, a_s, a_t, mode).total.item()
        for t, x in zip(ts, (m, a_s, a_t)):
            assert rel_err(t.grad, numeric_grad(f, x)) < 1e-4


class TestMultipleMatching:
    def test_bce_at_zero(self):
        assert multiple_matching_loss(np.zeros((2, 3)), np.ones((2, 3)), "bce").item() == pytest.approx(np.log(2))

    def test_mse_exact(self):
        y = np.array([[0.2, 0.7]])
        z = np.log(y / (1 - y))
        assert multiple_matching_loss(z, y, "mse").item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_case(self, rng):
        z, y = rng.standard_normal((2, 2)), np.array([[1.0, 0.0], [0.0, 1.0]])
        sig = 1 / (1 + np.exp(-z))
        bce = -(y * np.log(sig) + (1 - y) * np.log(1 - sig)).mean()
        assert multiple_matching_loss(z, y, "bce").item() == pytest.approx(bce, abs=1e-10)
        assert multiple_matching_loss(z, y, "mse").item() == pytest.approx(((sig - y) ** 2).mean(), abs=1e-10)


class TestNodeClassification:
    def params(self, d, h, k, rng=None, zero=False):
        p = Params()
        for name, shape in (("fc1", (d, h)), ("fc2", (h, k))):
            w = np.zeros(shape) if zero else rng.standard_normal(shape)
            p.add(f"cls.{name}.weight", w)
            p.add(f"cls.{name}.bias", np.zeros(shape[1]) if zero else rng.standard_normal(shape[1]))
        return p

    def test_uniform_logits(self):
        out = node_classification_loss(ns(np.ones((1, 3)), [4]), self.params(3, 2, 8, zero=True))
        assert out.item() == pytest.approx(np.log(8))

    def test_large_margin(self):
        p = self.params(2, 2, 3, zero=True)
        p["cls.fc2.bias"].data[:] = [0.0, 50.0, 0.0]
        assert node_classification_loss(ns(np.zeros((1, 2)), [1]), p).item() < 1e-20

    def test_three_nodes(self, rng):
        p = self.params(3, 4, 3, rng)
        v, labels = rng.standard_normal((3, 3)), np.array([0, 2, 1])
        a = {k: t.data for k, t in p.items()}
        total = 0.0
        for i in range(3):
            z = np.maximum(v[i] @ a["cls.fc1.weight"] + a["cls.fc1.bias"], 0) @ a["cls.fc2.weight"] + a["cls.fc2.bias"]
            total += -(z[labels[i]] - np.log(np.exp(z).sum()))
        assert node_classification_loss(ns(v, labels), p).item() == pytest.approx(total / 3, abs=1e-10)

    def test_label_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            node_classification_loss(ns(np.ones((1, 3)), [5]), self.params(3, 2, 3, rng))


class TestHungarian:
    def test_examples(self):
        perm, cost = hungarian_oracle(np.array([[1.0, 2.0], [2.0, 1.0]]))
        np.testing.assert_array_equal(perm, [0, 1])
        assert cost == 2.0
        perm, cost = hungarian_oracle(1.0 - np.eye(4))
        np.testing.assert_array_equal(perm, np.arange(4))
        assert cost == 0.0

    @given(st.integers(1, 7), st.integers(0, 2**31 - 1))
    def test_kernel_matches_brute_force(self, n, seed):
        c = np.random.default_rng(seed).random((n, n))
        _, brute = brute_force_assignment(c)
        _, fast = hungarian(c)
        assert fast == pytest.approx(brute, abs=1e-12)

    def test_large_instance_uses_kernel(self, rng):
        c = rng.random((12, 12))
        perm, cost = hungarian_oracle(c)
        assert sorted(perm) == list(range(12))
        from scipy.optimize import linear_sum_assignment

        r, col = linear_sum_assignment(c)
        assert cost == pytest.approx(c[r, col].sum(), abs=1e-12)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            hungarian_oracle(np.zeros((2, 3)))

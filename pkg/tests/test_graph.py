import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdflow import autodiff as ad
from gdflow import graph as gr
from gdflow.autodiff import Tensor


def brute_knn(x, k):
    out = []
    for i in range(len(x)):
        d = [(float(((x[i] - x[j]) ** 2).sum()), j) for j in range(len(x)) if j != i]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def test_knn_collinear():
    x = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    assert set(gr.knn(x, 2)[0]) == {1, 2}


def test_knn_all_others():
    x = np.random.default_rng(0).normal(size=(6, 3))
    idx = gr.knn(x, 5)
    for i in range(6):
        assert sorted(idx[i]) == [j for j in range(6) if j != i]


def test_knn_matches_bruteforce():
    x = np.random.default_rng(1).normal(size=(64, 3))
    assert np.array_equal(gr.knn(x, 16), brute_knn(x, 16))


def test_knn_ties_lower_index():
    # 1 and 3 are equidistant from 2
    x = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [10, 0, 0]])
    assert list(gr.knn(x, 1)[2]) == [1]


def test_knn_tree_path_matches_bruteforce():
    x = np.random.default_rng(2).normal(size=(5000, 3))
    idx = gr.knn(x, 8)
    rows = np.random.default_rng(3).choice(5000, 40, replace=False)
    for i in rows:
        d = ((x - x[i]) ** 2).sum(1)
        d[i] = np.inf
        assert list(idx[i]) == list(np.lexsort((np.arange(5000), d))[:8])


def test_knn_segments_stay_local():
    x = np.random.default_rng(4).normal(size=(30, 3))
    idx = gr.knn(x, 4, sizes=[10, 20])
    assert idx[:10].max() < 10 and idx[10:].min() >= 10


def test_knn_errors():
    with pytest.raises(ValueError):
        gr.knn(np.zeros((3, 3)), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 10**6))
def test_knn_property_matches_bruteforce(n, k, seed):
    # small integer grid forces many exact ties
    x = np.random.default_rng(seed).integers(0, 3, (n, 3)).astype(float)
    assert np.array_equal(gr.knn(x, k), brute_knn(x, k))


def test_gaussian_weight_at_delta():
    # distances 1 and 3: std 1, so the first neighbour sits at exactly delta
    w = gr.gaussian_weights(Tensor([[1.0, 9.0]])).data
    assert w[0, 0] == pytest.approx(np.exp(-0.5), abs=1e-12)


def test_gaussian_weight_coincident():
    w = gr.gaussian_weights(Tensor([[0.0, 4.0]])).data
    assert w[0, 0] == pytest.approx(1.0)


def test_gaussian_weight_degenerate_row():
    w = gr.gaussian_weights(Tensor([[4.0, 4.0, 4.0]])).data
    assert np.array_equal(w, np.ones((1, 3)))


def test_riemannian_examples():
    j = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = gr.riemannian_metric(j, 1.0)
    assert np.array_equal(g, np.diag([2.0, 1.0]))
    assert gr.riemannian_distance([1.0, 0.0], [0.0, 0.0], g, g) == pytest.approx(np.sqrt(2))
    g0 = gr.riemannian_metric(j, 0.0)
    assert gr.riemannian_distance([3.0, 4.0], [0.0, 0.0], g0, g0) == 5.0


def test_riemannian_rejects_nan():
    with pytest.raises(ValueError):
        gr.riemannian_distance([np.nan, 0], [0, 0], np.eye(2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 3, 3), elements=st.floats(-5, 5)),
       st.floats(0, 3))
def test_riemannian_symmetric_and_dominating(p, j, alpha):
    gi, gj = gr.riemannian_metric(j[0], alpha), gr.riemannian_metric(j[1], alpha)
    a = gr.riemannian_distance(p[0], p[1], gi, gj)
    b = gr.riemannian_distance(p[1], p[0], gj, gi)
    assert a == b
    assert a >= np.sqrt(np.sum((p[0] - p[1]) ** 2))


def _params(d, d_h, k, heads, seed=0):
    return gr.MetricParams.init(d, d_h, k, heads, None, np.random.default_rng(seed), scale=0.3)


def test_jacobian_zero_weights():
    p = _params(2, 3, 3, 2)
    p.w_out = Tensor(np.zeros_like(p.w_out.data))
    x = Tensor(np.random.default_rng(0).normal(size=(6, 5)))
    j = gr.jacobian_attention(x, gr.knn(x, 3), p)
    assert j.shape == (6, 2, 2)
    assert np.array_equal(j.data, np.zeros((6, 2, 2)))


def test_jacobian_single_head_hand():
    d, c = 2, 2
    x = np.array([[1.0, 2.0], [0.5, -1.0]])
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[2.0, 0.0], [1.0, 1.0]])
    wo = np.array([[1.0, 2.0, 3.0, 4.0]])
    p = gr.MetricParams(Tensor(wq), Tensor(wk), Tensor(wo), Tensor(0.0), 1, d)
    idx = np.array([[1], [0]])
    j = gr.jacobian_attention(Tensor(x), idx, p).data
    for i in range(2):
        h = x[idx[i, 0]]
        s = (h @ wq) @ (h @ wk) / np.sqrt(d)
        s = s if s > 0 else 0.01 * s
        assert np.allclose(j[i], s * wo.reshape(2, 2))
    assert c == 2


@pytest.mark.parametrize("heads", [1, 2, 3])
def test_jacobian_shape_any_heads(heads):
    p = _params(3, 4, 5, heads)
    x = Tensor(np.random.default_rng(1).normal(size=(10, 7)))
    assert gr.jacobian_attention(x, gr.knn(x, 5), p).shape == (10, 3, 3)


def test_jacobian_shape_mismatch():
    p = _params(3, 4, 5, 1)
    x = Tensor(np.random.default_rng(1).normal(size=(10, 6)))
    with pytest.raises(ad.ShapeError):
        gr.jacobian_attention(x, gr.knn(x, 5), p)


def test_geometric_reduces_to_euclidean():
    rng = np.random.default_rng(5)
    p = Tensor(rng.normal(size=(20, 3)))
    z = Tensor(rng.normal(size=(20, 4)))
    params = _params(3, 4, 6, 1)
    params.alpha_raw = Tensor(-800.0)  # softplus underflows to 0
    e = gr.euclidean_adjacency(p, 6)
    for use_j in (False, True):
        g = gr.geometric_adjacency(p, z, params, 6, use_jacobian=use_j)
        assert np.array_equal(g.idx, e.idx)
        assert np.allclose(g.weights.data, e.weights.data, rtol=0, atol=1e-12)


def test_geometric_weights_match_scalar_oracle():
    rng = np.random.default_rng(6)
    n, d, d_h, k = 8, 3, 2, 3
    p = Tensor(rng.normal(size=(n, d)))
    z = Tensor(rng.normal(size=(n, d_h)))
    params = _params(d, d_h, k, 2)
    g = gr.geometric_adjacency(p, z, params, k)
    alpha = float(params.alpha.data)
    x = gr.embedding(p, z, params.alpha)
    j = gr.jacobian_attention(x, g.idx, params).data
    metrics = [gr.riemannian_metric(j[i], alpha) for i in range(n)]
    for i in range(n):
        ell = np.array([gr.riemannian_distance(p.data[i], p.data[m], metrics[i], metrics[m]) for m in g.idx[i]])
        delta = max(ell.std(), 1e-3 * ell.mean(), 1e-6)
        assert np.allclose(g.weights.data[i], np.exp(-(ell**2) / (2 * delta**2)), rtol=1e-9)
    assert np.all((g.weights.data > 0) & (g.weights.data <= 1))


def test_geometric_weights_differentiable():
    rng = np.random.default_rng(7)
    p = Tensor(rng.normal(size=(10, 2)), requires_grad=True)
    z = Tensor(rng.normal(size=(10, 2)), requires_grad=True)
    params = _params(2, 2, 3, 1)
    w = rng.normal(size=(10, 3))

    def f():
        return (gr.geometric_adjacency(p, z, params, 3).weights * w).sum()

    assert ad.grad_check(f, [p, z, *params.tensors()]).passed


def test_operator_single_node():
    diag, off, pat = gr.build_operator(np.zeros((1, 0), dtype=int), Tensor(np.zeros((1, 0))))
    assert np.array_equal(diag.data, [1.0])


def test_operator_two_nodes():
    g = gr._make_graph(np.array([[1], [0]]), Tensor([[1.0], [1.0]]))
    a = g.dense()
    assert np.allclose(np.linalg.eigvalsh(2 * a - np.eye(2)), [0.0, 1.0])
    assert np.allclose(np.linalg.eigvalsh(a), [0.5, 1.0])


def test_operator_symmetric_max_union():
    idx = np.array([[1], [2], [0]])
    g = gr._make_graph(idx, Tensor([[0.3], [0.7], [0.5]]))
    a = g.dense()
    assert np.array_equal(a, a.T)
    x = np.random.default_rng(3).normal(size=(40, 3))
    b = gr.euclidean_adjacency(x, 7).dense()
    assert np.array_equal(b, b.T)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 16), st.integers(0, 10**6))
def test_operator_spectrum_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n))
    x = rng.normal(size=(n, 3))
    ev = np.linalg.eigvalsh(gr.euclidean_adjacency(x, k).dense())
    assert ev.min() >= -1e-10 and ev.max() <= 1 + 1e-10


def test_operator_apply_matches_dense():
    x = np.random.default_rng(8).normal(size=(12, 3))
    g = gr.euclidean_adjacency(x, 4)
    z = np.random.default_rng(9).normal(size=(12, 2))
    assert np.allclose(g.apply(Tensor(z)).data, g.dense() @ z, atol=1e-14)
    assert np.allclose(g.complement().dense(), np.eye(12) - g.dense(), atol=1e-15)

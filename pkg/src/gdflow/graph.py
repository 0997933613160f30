"""Neighbour search and graph construction.

Two adjacency builders share one pipeline: pick k neighbours, turn neighbour
distances into Gaussian edge weights with a per-point bandwidth, symmetrize,
normalize.  The geometric builder measures distances with a learned
per-point metric ``G_i = I + alpha^2 J_i^T J_i``; the Euclidean one uses the
identity metric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor

EXHAUSTIVE_LIMIT = 4096
_MARGIN = 4
_SQRT_EPS = 1e-30


# ---------------------------------------------------------------------------
# kNN
# ---------------------------------------------------------------------------

def _segments(n: int, sizes) -> list[tuple[int, int]]:
    if sizes is None:
        return [(0, n)]
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    if offs[-1] != n:
        raise ValueError(f"segment sizes sum to {offs[-1]}, expected {n}")
    return list(zip(offs[:-1], offs[1:]))


def _exact_rows(x: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    out = np.empty((len(rows), k), dtype=np.int64)
    for r, i in enumerate(rows):
        d = ((x - x[i]) ** 2).sum(1)
        d[i] = np.inf
        out[r] = np.lexsort((np.arange(len(x)), d))[:k]
    return out


def _refine(x: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """Order candidate lists by exact distance then index; keep the first k."""
    dist = ((x[:, None, :] - x[cand]) ** 2).sum(-1)
    order = np.lexsort((cand, dist), axis=-1)
    cand = np.take_along_axis(cand, order, 1)
    dist = np.take_along_axis(dist, order, 1)
    res = cand[:, :k]
    if cand.shape[1] > k:
        # the k-th distance ties with an unseen candidate only if the margin is exhausted
        suspicious = dist[:, -1] <= dist[:, k - 1] * (1 + 1e-9) + 1e-300
        if np.any(suspicious):
            rows = np.nonzero(suspicious)[0]
            res = res.copy()
            res[rows] = _exact_rows(x, rows, k)
    return res


def _knn_block(x: np.ndarray, k: int) -> np.ndarray:
    n, c = x.shape
    if n <= k:
        raise ValueError(f"kNN needs more than k={k} points, got {n}")
    m = min(k + _MARGIN, n - 1)
    if n >= EXHAUSTIVE_LIMIT and c <= 3:
        _, cand = cKDTree(x).query(x, m + 1)
        cand = cand[:, 1:]
        # cKDTree may return the query point elsewhere than slot 0 for duplicates
        self_hit = cand == np.arange(n)[:, None]
        if np.any(self_hit):
            bad = np.nonzero(self_hit.any(1))[0]
            cand[bad] = _exact_rows(x, bad, m)
        return _refine(x, cand, k)
    out = np.empty((n, m), dtype=np.int64)
    sq = (x * x).sum(1)
    # cache-sized row blocks are markedly faster than one large block
    step = max(1, min(n, 2**17 // n))
    for s in range(0, n, step):
        e = min(n, s + step)
        # the row constant |x_i|^2 does not change the ranking within a row
        d = x[s:e] @ x.T
        d *= -2.0
        d += sq[None, :]
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        if m < n - 1:
            out[s:e] = np.argpartition(d, m - 1, axis=1)[:, :m]
        else:
            out[s:e] = np.argsort(d, axis=1)[:, :m]
    return _refine(x, out, k)


def knn(points, k: int, sizes=None) -> np.ndarray:
    """Indices of the k nearest other points, nearest first, ties to lower index.

    ``sizes`` splits the rows into independent clouds (indices stay global).
    """
    x = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    out = np.empty((len(x), k), dtype=np.int64)
    for s, e in _segments(len(x), sizes):
        out[s:e] = _knn_block(x[s:e], k) + s
    return out


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------

@dataclass
class NeighborGraph:
    """kNN graph with Gaussian weights and the normalized operator.

    The operator ``(I + D^-1/2 (W + I) D^-1/2) / 2`` is stored as a diagonal
    plus off-diagonal values on ``pattern``; its spectrum lies in [0, 1].
    """

    k: int
    idx: np.ndarray
    weights: Tensor
    diag: Tensor
    offvals: Tensor
    pattern: ad.SparsePattern

    @property
    def n(self) -> int:
        return self.pattern.n

    def apply(self, z: Tensor) -> Tensor:
        return ad.sparse_apply(self.diag, self.offvals, z, self.pattern)

    def complement(self) -> "NeighborGraph":
        """The operator ``I - A`` on the same pattern."""
        return NeighborGraph(self.k, self.idx, self.weights, 1.0 - self.diag, -self.offvals, self.pattern)

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.pattern.rows, self.pattern.cols] = self.offvals.data
        a[np.diag_indices(self.n)] += self.diag.data
        return a


def _symmetric_structure(idx: np.ndarray):
    n, k = idx.shape
    src = np.repeat(np.arange(n), k)
    dst = idx.reshape(-1)
    key = src * n + dst
    order = np.argsort(key)
    skey = key[order]
    rkey = dst * n + src
    pos = np.searchsorted(skey, rkey)
    pos = np.minimum(pos, len(skey) - 1)
    has_rev = skey[pos] == rkey
    rev = np.where(has_rev, order[pos], 0)
    return src, dst, rev, has_rev


def build_operator(idx: np.ndarray, weights: Tensor):
    """Symmetrize with max(W, W^T), add self loops, normalize, shift to [0, 1].

    Returns ``(diag, offvals, pattern)``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n, k = idx.shape
    if k == 0:
        return Tensor(np.ones(n)), Tensor(np.zeros(0)), ad.SparsePattern([], [], n)
    src, dst, rev, has_rev = _symmetric_structure(idx)
    w = ad.reshape(weights, (n * k,))
    w_rev = ad.gather_rows(w, rev)
    s = ad.where(has_rev, ad.maximum(w, w_rev), w)
    lone = np.nonzero(~has_rev)[0]
    rows = np.concatenate([src, dst[lone]])
    cols = np.concatenate([dst, src[lone]])
    vals = ad.concat([s, ad.gather_rows(s, lone)], axis=0)
    deg = ad.scatter_add(vals, rows, n) + 1.0
    inv_sqrt = 1.0 / ad.sqrt(deg)
    # pair the degree factors first so (i, j) and (j, i) round identically
    off = 0.5 * (vals * (ad.gather_rows(inv_sqrt, rows) * ad.gather_rows(inv_sqrt, cols)))
    diag = 0.5 + 0.5 / deg
    return diag, off, ad.SparsePattern(rows, cols, n)


def _make_graph(idx, weights) -> NeighborGraph:
    diag, off, pattern = build_operator(idx, weights)
    return NeighborGraph(idx.shape[1], idx, weights, diag, off, pattern)


# ---------------------------------------------------------------------------
# edge weights
# ---------------------------------------------------------------------------

def gaussian_weights(dist2: Tensor) -> Tensor:
    """``exp(-l^2 / (2 delta_i^2))`` with delta_i the std of row i's distances.

    delta_i is floored at ``max(1e-6, 1e-3 * mean distance)``; rows whose
    distances are all equal get unit weights.
    """
    dist = ad.sqrt(dist2 + _SQRT_EPS)
    mean = dist.mean(axis=1, keepdims=True)
    var = ad.square(dist - mean).mean(axis=1, keepdims=True)
    std = ad.sqrt(var + _SQRT_EPS)
    floor = ad.maximum(1e-3 * mean, Tensor(1e-6))
    delta = ad.maximum(std, floor)
    w = ad.exp(-dist2 / (2.0 * ad.square(delta)))
    d = dist.data
    degenerate = (d.max(1) - d.min(1)) <= 1e-12 * d.max(1)
    if np.any(degenerate):
        w = ad.where(np.broadcast_to(degenerate[:, None], w.shape), Tensor(1.0), w)
    return w


def _pairwise_offsets(x: Tensor, idx: np.ndarray) -> Tensor:
    n, k = idx.shape
    return ad.reshape(x, (n, 1, x.shape[1])) - ad.gather_rows(x, idx)


def euclidean_adjacency(points, k: int, sizes=None, idx: np.ndarray | None = None) -> NeighborGraph:
    x = points if isinstance(points, Tensor) else Tensor(points)
    if idx is None:
        idx = knn(x, k, sizes)
    delta = _pairwise_offsets(x, idx)
    dist2 = ad.square(delta).sum(axis=2)
    return _make_graph(idx, gaussian_weights(dist2))


# ---------------------------------------------------------------------------
# learned metric
# ---------------------------------------------------------------------------

@dataclass
class MetricParams:
    """Attention weights for the per-point Jacobian.

    ``w_q``/``w_k``: (d + d_h) x (heads * key_dim); ``w_out``:
    (heads * k * k) x (d * d); ``alpha_raw`` maps to alpha via softplus.
    """

    w_q: Tensor
    w_k: Tensor
    w_out: Tensor
    alpha_raw: Tensor
    heads: int
    d: int

    @property
    def alpha(self) -> Tensor:
        return ad.softplus(self.alpha_raw)

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_out, self.alpha_raw]

    @classmethod
    def init(cls, d: int, d_h: int, k: int, heads: int, key_dim: int | None, rng, alpha: float = 1.0, scale: float = 1.0):
        key_dim = key_dim or d
        c = d + d_h
        wq = rng.standard_normal((c, heads * key_dim)) / np.sqrt(c)
        wk = rng.standard_normal((c, heads * key_dim)) / np.sqrt(c)
        wo = rng.standard_normal((heads * k * k, d * d)) * (scale / np.sqrt(heads * k * k))
        # inverse softplus so that softplus(alpha_raw) == alpha
        a_raw = np.log(np.expm1(alpha)) if alpha > 0 else -30.0
        return cls(Tensor(wq), Tensor(wk), Tensor(wo), Tensor(a_raw), heads, d)


def jacobian_attention(x: Tensor, idx: np.ndarray, params: MetricParams) -> Tensor:
    """Per-point d x d Jacobian from multi-head attention over the neighbour block."""
    n, k = idx.shape
    c = x.shape[1]
    h = params.heads
    if params.w_q.shape[0] != c or params.w_k.shape != params.w_q.shape:
        raise ad.ShapeError(f"attention weights {params.w_q.shape} do not match embedding width {c}")
    dk = params.w_q.shape[1] // h
    if params.w_out.shape != (h * k * k, params.d * params.d):
        raise ad.ShapeError(f"output projection {params.w_out.shape} != {(h * k * k, params.d ** 2)}")
    block = ad.gather_rows(x, idx)  # n, k, c
    q = ad.transpose(ad.reshape(block @ params.w_q, (n, k, h, dk)), (0, 2, 1, 3))
    kt = ad.transpose(ad.reshape(block @ params.w_k, (n, k, h, dk)), (0, 2, 3, 1))
    scores = ad.leaky_relu((q @ kt) / np.sqrt(params.d))  # n, h, k, k
    flat = ad.reshape(scores, (n, h * k * k))
    return ad.reshape(flat @ params.w_out, (n, params.d, params.d))


def riemannian_metric(j: np.ndarray, alpha: float) -> np.ndarray:
    j = np.asarray(j, dtype=np.float64)
    return np.eye(j.shape[-1]) + alpha**2 * np.swapaxes(j, -1, -2) @ j


def riemannian_distance(p_i, p_j, g_i, g_j=None) -> float:
    """``sqrt(dp^T G dp)`` with G the average of the two endpoint metrics.

    Pass ``g_j=None`` to use the centre metric alone.
    """
    p_i, p_j, g_i = (np.asarray(v, dtype=np.float64) for v in (p_i, p_j, g_i))
    g = g_i if g_j is None else 0.5 * (g_i + np.asarray(g_j, dtype=np.float64))
    if not (np.all(np.isfinite(p_i)) and np.all(np.isfinite(p_j)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite input to riemannian_distance")
    dp = p_i - p_j
    base = float(np.sum(dp * dp))
    # G - I is PSD for metrics built by riemannian_metric; keep rounding from dipping below |dp|^2
    return float(np.sqrt(max(float(dp @ g @ dp), base)))


def riemannian_dist2(p: Tensor, j: Tensor, alpha: Tensor, idx: np.ndarray, symmetric: bool = True) -> Tensor:
    """Squared neighbour distances under the learned metric, shape (n, k)."""
    n, k = idx.shape
    d = p.shape[1]
    delta = _pairwise_offsets(p, idx)  # n, k, d
    base = ad.square(delta).sum(axis=2)
    ji = delta @ ad.transpose(j, (0, 2, 1))  # rows: (J_i dp)^T
    term = ad.square(ji).sum(axis=2)
    a2 = ad.square(alpha)
    if symmetric:
        jj = ad.gather_rows(j, idx)  # n, k, d, d
        jjd = ad.reshape(delta, (n, k, 1, d)) @ ad.transpose(jj, (0, 1, 3, 2))
        term = 0.5 * (term + ad.reshape(ad.square(jjd).sum(axis=3), (n, k)))
    return base + a2 * term


def embedding(p: Tensor, z: Tensor, alpha: Tensor) -> Tensor:
    return ad.concat([p, alpha * z], axis=1)


def geometric_adjacency(p: Tensor, z: Tensor, params: MetricParams, k: int, sizes=None,
                        symmetric: bool = True, use_jacobian: bool = True) -> NeighborGraph:
    alpha = params.alpha
    x = embedding(p, z, alpha)
    idx = knn(x, k, sizes)
    if use_jacobian:
        j = jacobian_attention(x, idx, params)
        dist2 = riemannian_dist2(p, j, alpha, idx, symmetric)
    else:
        dist2 = ad.square(_pairwise_offsets(p, idx)).sum(axis=2)
    return _make_graph(idx, gaussian_weights(dist2))


def dynamic_euclidean_adjacency(p: Tensor, z: Tensor, alpha: Tensor, k: int, sizes=None) -> NeighborGraph:
    """Euclidean kernel on the joint embedding ``(P, alpha Z)``; rebuilt as Z evolves."""
    return euclidean_adjacency(embedding(p, z, alpha), k, sizes)

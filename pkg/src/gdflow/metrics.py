"""Point-set distances and the training losses built on them.

Squared-distance convention for CD and EMD, plain Euclidean distance for HD.
Discrete choices (nearest neighbours, optimal matchings) are made on the
forward values and held fixed for gradients.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .graph import knn
from .pointcloud import EmptyCloudError, PointCloud

EXACT_EMD_LIMIT = 512
METRICS = ("cd", "emd", "hd", "rmsd")


class SizeMismatchError(ValueError):
    pass


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyCloudError("point set is empty")
    return pts


def nearest_sq(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of ``a``: index of its nearest row in ``b`` and the squared distance."""
    _, idx = cKDTree(b).query(a)
    d2 = ((a - b[idx]) ** 2).sum(1)
    return idx, d2


def chamfer(a, b) -> float:
    a, b = _points(a), _points(b)
    return float(nearest_sq(a, b)[1].mean() + nearest_sq(b, a)[1].mean())


def hausdorff(a, b) -> float:
    a, b = _points(a), _points(b)
    return float(np.sqrt(max(nearest_sq(a, b)[1].max(), nearest_sq(b, a)[1].max())))


def rmsd(a, b) -> float:
    """Root mean of squared distances from each point of ``a`` to ``b``."""
    a, b = _points(a), _points(b)
    return float(np.sqrt(nearest_sq(a, b)[1].mean()))


def _cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(a, b, "sqeuclidean")


def auction_assignment(cost: np.ndarray, rel_eps: float = 1e-6, max_rounds: int = 100000) -> np.ndarray:
    """Near-optimal assignment minimizing ``cost`` by an eps-scaling auction.

    The final assignment costs at most ``n * eps_final`` above the optimum,
    with ``eps_final = rel_eps * max(cost)``.
    """
    n = cost.shape[0]
    benefit = -cost
    scale = float(np.max(np.abs(cost))) or 1.0
    prices = np.zeros(n)
    eps = scale / 4
    eps_final = rel_eps * scale
    rows = np.arange(n)
    while True:
        owner = np.full(n, -1)
        assign = np.full(n, -1)
        rounds = 0
        while True:
            free = np.nonzero(assign < 0)[0]
            if free.size == 0:
                break
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError("auction did not converge")
            val = benefit[free] - prices
            top2 = np.argpartition(-val, 1, axis=1)[:, :2] if n > 1 else np.zeros((free.size, 2), int)
            v_a = val[np.arange(free.size), top2[:, 0]]
            v_b = val[np.arange(free.size), top2[:, 1]]
            first = np.where(v_a >= v_b, top2[:, 0], top2[:, 1])
            gap = np.abs(v_a - v_b) if n > 1 else np.zeros(free.size)
            bids = prices[first] + gap + eps
            # highest bid per object wins; ties go to the lower bidder index
            order = np.lexsort((free, -bids, first))
            obj = first[order]
            keep = np.ones(obj.size, bool)
            keep[1:] = obj[1:] != obj[:-1]
            win_obj = obj[keep]
            win_bidder = free[order][keep]
            prev = owner[win_obj]
            assign[prev[prev >= 0]] = -1
            owner[win_obj] = win_bidder
            assign[win_bidder] = win_obj
            prices[win_obj] = bids[order][keep]
        if eps <= eps_final:
            break
        eps = max(eps / 8, eps_final)
    assert np.array_equal(np.sort(assign), rows)
    return assign


def emd_matching(a, b, exact: bool | None = None) -> tuple[np.ndarray, bool]:
    """Permutation ``perm`` pairing ``a[i]`` with ``b[perm[i]]`` and whether it is optimal.

    ``exact=None`` uses the Hungarian method up to ``EXACT_EMD_LIMIT`` points
    and the auction approximation above.
    """
    a, b = _points(a), _points(b)
    if len(a) != len(b):
        raise SizeMismatchError(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    if exact is None:
        exact = len(a) <= EXACT_EMD_LIMIT
    cost = _cost(a, b)
    if exact:
        _, perm = linear_sum_assignment(cost)
    else:
        perm = auction_assignment(cost)
    return perm, bool(exact)


def emd(a, b, exact: bool | None = None) -> float:
    a, b = _points(a), _points(b)
    perm, _ = emd_matching(a, b, exact)
    return float(((a - b[perm]) ** 2).sum(1).mean())


@dataclass
class MetricReport:
    cd: float | None
    emd: float | None
    hd: float | None
    rmsd: float | None
    n_ref: int
    n_test: int
    emd_exact: bool | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def evaluate(ref, test, metrics=METRICS) -> MetricReport:
    """Distances of ``test`` against ``ref``; metrics not requested are ``None``."""
    ref, test = _points(ref), _points(test)
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    out = dict.fromkeys(METRICS)
    exact = None
    if "emd" in metrics:
        perm, exact = emd_matching(test, ref)
        out["emd"] = float(((test - ref[perm]) ** 2).sum(1).mean())
    if "cd" in metrics:
        out["cd"] = chamfer(test, ref)
    if "hd" in metrics:
        out["hd"] = hausdorff(test, ref)
    if "rmsd" in metrics:
        out["rmsd"] = rmsd(test, ref)
    return MetricReport(n_ref=len(ref), n_test=len(test), emd_exact=exact, **out)


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------

def _offsets(sizes, n: int) -> list[tuple[int, int]]:
    sizes = [n] if sizes is None else list(sizes)
    if sum(sizes) != n:
        raise ValueError(f"segment sizes sum to {sum(sizes)}, expected {n}")
    offs = np.cumsum([0] + sizes)
    return list(zip(offs[:-1], offs[1:]))


def _segment_weights(segs) -> np.ndarray:
    """Weights that average within each segment, then across segments."""
    w = np.concatenate([np.full(e - s, 1.0 / (e - s)) for s, e in segs])
    return w / len(segs)


def chamfer_loss(x: Tensor, y, sizes=None) -> Tensor:
    y = _points(y)
    segs = _offsets(sizes, x.shape[0])
    if y.shape[0] != x.shape[0]:
        raise SizeMismatchError("batched chamfer expects matching segment layouts")
    nn_xy = np.empty(len(y), dtype=np.int64)
    nn_yx = np.empty(len(y), dtype=np.int64)
    for s, e in segs:
        nn_xy[s:e] = nearest_sq(x.data[s:e], y[s:e])[0] + s
        nn_yx[s:e] = nearest_sq(y[s:e], x.data[s:e])[0] + s
    w = _segment_weights(segs)
    fwd = ad.square(x - y[nn_xy]).sum(axis=1)
    bwd = ad.square(ad.gather_rows(x, nn_yx) - y).sum(axis=1)
    return (fwd * w).sum() + (bwd * w).sum()


def emd_loss(x: Tensor, y, sizes=None, exact: bool | None = True) -> Tensor:
    y = _points(y)
    segs = _offsets(sizes, x.shape[0])
    if y.shape[0] != x.shape[0]:
        raise SizeMismatchError(f"EMD needs equal sizes, got {x.shape[0]} and {y.shape[0]}")
    perm = np.empty(len(y), dtype=np.int64)
    for s, e in segs:
        perm[s:e] = emd_matching(x.data[s:e], y[s:e], exact)[0] + s
    return (ad.square(x - y[perm]).sum(axis=1) * _segment_weights(segs)).sum()


def supervised_loss(denoised: Tensor, clean, sizes=None) -> Tensor:
    """Chamfer plus EMD; the matching is the optimal one for the forward values."""
    denoised = denoised if isinstance(denoised, Tensor) else Tensor(_points(denoised))
    return chamfer_loss(denoised, clean, sizes) + emd_loss(denoised, clean, sizes)


def unsupervised_loss(denoised: Tensor, noisy, sigma: float, lam: float = 0.01, k: int = 8, m: int = 8,
                      sizes=None) -> Tensor:
    """Reconstruction toward nearby noisy points plus ``lam`` times the neighbour kernel term.

    Reconstruction: each output point's squared distance to its ``m`` nearest
    noisy points, weighted by a softmax of ``-d^2 / (2 sigma^2)``.  Kernel
    term: ``sum_j exp(-d_ij^2) d_ij^2`` over the ``k`` nearest output points.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = denoised if isinstance(denoised, Tensor) else Tensor(_points(denoised))
    v = _points(noisy)
    n = x.shape[0]
    segs = _offsets(sizes, n)
    if v.shape[0] != n:
        raise SizeMismatchError("noisy input must have the same segment layout as the output")
    w = _segment_weights(segs)

    sel = np.empty((n, min(m, min(e - s for s, e in segs))), dtype=np.int64)
    for s, e in segs:
        _, idx = cKDTree(v[s:e]).query(x.data[s:e], sel.shape[1])
        sel[s:e] = np.asarray(idx).reshape(e - s, -1) + s
    d2 = ad.square(ad.reshape(x, (n, 1, 3)) - v[sel]).sum(axis=2)
    logits = d2 * (-1.0 / (2.0 * sigma**2))
    shift = logits.data.max(axis=1, keepdims=True)
    e_ = ad.exp(logits - shift)
    prob = e_ / e_.sum(axis=1, keepdims=True)
    recons = ((prob * d2).sum(axis=1) * w).sum()

    kk = min(k, min(e - s for s, e in segs) - 1)
    if kk < 1:
        return recons
    nb = knn(x, kk, [e - s for s, e in segs])
    dd = ad.square(ad.reshape(x, (n, 1, 3)) - ad.gather_rows(x, nb)).sum(axis=2)
    repul = ((ad.exp(-dd) * dd).sum(axis=1) * w).sum()
    return recons + lam * repul

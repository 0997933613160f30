import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from gdflow import autodiff as ad
from gdflow import metrics as M
from gdflow.autodiff import Tensor

A1 = np.array([[0.0, 0.0, 0.0]])
B1 = np.array([[1.0, 0.0, 0.0]])


def brute_cd(a, b):
    ab = np.mean([min(((p - q) ** 2).sum() for q in b) for p in a])
    ba = np.mean([min(((p - q) ** 2).sum() for q in a) for p in b])
    return ab + ba


def brute_hd(a, b):
    ab = max(min(np.sqrt(((p - q) ** 2).sum()) for q in b) for p in a)
    ba = max(min(np.sqrt(((p - q) ** 2).sum()) for q in a) for p in b)
    return max(ab, ba)


def brute_rmsd(a, b):
    return np.sqrt(np.mean([min(((p - q) ** 2).sum() for q in b) for p in a]))


def brute_emd(a, b):
    return min(np.mean(((a - b[list(perm)]) ** 2).sum(1)) for perm in itertools.permutations(range(len(a))))


def test_hand_cases():
    assert M.chamfer(A1, B1) == 2.0
    assert M.hausdorff(A1, B1) == 1.0
    assert M.rmsd(A1, B1) == 1.0
    assert M.emd(A1, B1) == 1.0
    assert M.hausdorff(np.array([[0.0, 0, 0], [5, 0, 0]]), A1) == 5.0


@pytest.mark.parametrize("f", [M.chamfer, M.hausdorff, M.rmsd, M.emd])
def test_identical_is_zero(f):
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert f(x, x) == 0.0


def test_emd_two_point_case():
    a = np.array([[0.0, 0, 0], [1, 0, 0]])
    b = np.array([[0.0, 1, 0], [1, 1, 0]])
    assert M.emd(a, b) == 1.0
    assert brute_emd(a, b[::-1]) == 1.0


def test_bruteforce_oracles():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=(2, 64, 3))
        assert abs(M.chamfer(a, b) - brute_cd(a, b)) <= 1e-12
        assert abs(M.hausdorff(a, b) - brute_hd(a, b)) <= 1e-12
        assert abs(M.rmsd(a, b) - brute_rmsd(a, b)) <= 1e-12


def test_emd_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.normal(size=(2, 8, 3))
        assert M.emd(a, b) == pytest.approx(brute_emd(a, b), abs=1e-14)


def test_emd_size_mismatch():
    with pytest.raises(M.SizeMismatchError):
        M.emd(np.zeros((3, 3)), np.zeros((4, 3)))


def test_auction_matches_hungarian():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 600, 3))
    perm, exact = M.emd_matching(a, b)
    assert not exact
    cost = M._cost(a, b)
    _, opt = linear_sum_assignment(cost)
    got, best = cost[np.arange(600), perm].sum(), cost[np.arange(600), opt].sum()
    assert got <= best + 600 * 1e-6 * cost.max()


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10**6))
def test_auction_is_near_optimal(n, seed):
    cost = np.random.default_rng(seed).uniform(0, 1, (n, n))
    perm = M.auction_assignment(cost)
    assert sorted(perm) == list(range(n))
    _, opt = linear_sum_assignment(cost)
    assert cost[np.arange(n), perm].sum() <= cost[np.arange(n), opt].sum() + n * 1e-6 * cost.max() + 1e-12


def test_report_json_and_selection():
    rep = M.evaluate(A1, B1, ("cd", "hd"))
    assert rep.cd == 2.0 and rep.hd == 1.0 and rep.emd is None and rep.rmsd is None
    assert '"cd": 2.0' in rep.to_json()


def test_supervised_loss_values():
    assert M.supervised_loss(Tensor(A1), A1).item() == 0.0
    assert M.supervised_loss(Tensor(A1), B1).item() == pytest.approx(3.0)


def test_supervised_loss_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    y = rng.normal(size=(16, 3))
    assert ad.grad_check(lambda t: M.supervised_loss(t, y), x).passed


def test_supervised_loss_segments_average():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 20, 3))
    both = M.supervised_loss(Tensor(x), y, [8, 12]).item()
    sep = [M.supervised_loss(Tensor(x[s:e]), y[s:e]).item() for s, e in [(0, 8), (8, 20)]]
    assert both == pytest.approx(np.mean(sep), rel=1e-12)


def test_unsupervised_exact_hit():
    v = np.array([[0.0, 0, 0], [10, 0, 0], [0, 10, 0]])
    x = Tensor(v.copy())
    # each output sits on a noisy point whose softmax weight is ~1 at this bandwidth
    loss = M.unsupervised_loss(x, v, sigma=0.1, lam=0.0, m=3, k=1)
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


def test_unsupervised_far_points_no_repulsion():
    v = np.array([[0.0, 0, 0], [100, 0, 0]])
    full = M.unsupervised_loss(Tensor(v), v, sigma=1.0, lam=1.0, m=1, k=1).item()
    assert full == pytest.approx(0.0, abs=1e-300)


def test_unsupervised_hand_three_points():
    x = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    v = np.array([[0.1, 0, 0], [1, 0.5, 0], [0, 2, 0.3]])
    sigma, lam = 0.5, 0.2
    rec, rep = 0.0, 0.0
    for i in range(3):
        d2 = np.array([((x[i] - v[j]) ** 2).sum() for j in range(3)])
        w = np.exp(-d2 / (2 * sigma**2))
        rec += (w / w.sum() * d2).sum() / 3
        dd = sorted(((x[i] - x[j]) ** 2).sum() for j in range(3) if j != i)
        rep += sum(np.exp(-e) * e for e in dd[:2]) / 3
    got = M.unsupervised_loss(Tensor(x), v, sigma, lam, k=2, m=3).item()
    assert got == pytest.approx(rec + lam * rep, abs=1e-12)


def test_unsupervised_gradient():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(16, 3)), requires_grad=True)
    v = x.data + 0.1 * rng.normal(size=(16, 3))
    assert ad.grad_check(lambda t: M.unsupervised_loss(t, v, 0.2, 0.05, k=4, m=4), x).passed


def test_unsupervised_rejects_bad_sigma():
    with pytest.raises(ValueError):
        M.unsupervised_loss(Tensor(A1), A1, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10**6))
def test_metric_symmetry_and_bounds(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert M.chamfer(a, b) == pytest.approx(M.chamfer(b, a))
    assert M.hausdorff(a, b) == pytest.approx(M.hausdorff(b, a))
    # the largest nearest distance bounds the root-mean one
    assert M.rmsd(a, b) <= M.hausdorff(a, b) + 1e-12


@pytest.mark.parametrize("f", [M.chamfer, M.hausdorff, M.rmsd, M.emd])
def test_permuted_copy_is_zero(f):
    x = np.random.default_rng(7).normal(size=(30, 3))
    assert f(x, x[np.random.default_rng(8).permutation(30)]) == 0.0
    assert f(x, x + np.array([1e-3, 0, 0])) > 0


def test_hungarian_beats_random_bijections():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 40, 3))
    best = M.emd(a, b)
    assert best >= 0
    for _ in range(1000):
        assert best <= np.mean(((a - b[rng.permutation(40)]) ** 2).sum(1))


def test_scaling_is_exact_for_powers_of_two():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(2, 50, 3))
    s = 4.0
    assert M.chamfer(s * a, s * b) == s**2 * M.chamfer(a, b)
    assert M.emd(s * a, s * b) == s**2 * M.emd(a, b)
    assert M.rmsd(s * a, s * b) ** 2 == pytest.approx(s**2 * M.rmsd(a, b) ** 2, rel=1e-15)
    assert M.hausdorff(s * a, s * b) == s * M.hausdorff(a, b)

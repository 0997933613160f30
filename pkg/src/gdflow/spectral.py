"""Bernstein spectral filters, channel mixing and closed-form filter responses."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from . import autodiff as ad
from .autodiff import Tensor


def bernstein_basis(k: int, K: int, lam):
    """``C(K,k) (1-lam)^(K-k) lam^k``; ``lam`` may be an array."""
    if not 0 <= k <= K:
        raise ValueError(f"basis index k={k} outside [0, {K}]")
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("lambda must lie in [0, 1]")
    return comb(K, k, exact=True) * (1.0 - lam) ** (K - k) * lam**k


def basis_peak(K: int) -> np.ndarray:
    """Maximum of each basis polynomial over [0, 1], attained at k/K."""
    if K == 0:
        return np.ones(1)
    return np.array([bernstein_basis(k, K, k / K) for k in range(K + 1)])


def central_peak(K: int) -> float:
    """``2^-K C(K, floor(K/2))``: the central basis function's value at 1/2."""
    return comb(K, K // 2, exact=True) / 2.0**K


def rescale_coefficients(theta, rule: str = "peak"):
    """Scale positive coefficients so that the filter response stays below 1.

    ``rule="peak"`` divides by ``sum_k theta_k max b_k``, which bounds the
    response by 1 for every positive coefficient vector.  ``rule="central"``
    divides by ``2^-K C(K, floor(K/2)) sum_k theta_k``; it only bounds
    responses whose mass sits near the middle of the basis and is kept for
    comparison.
    """
    t = theta if isinstance(theta, Tensor) else Tensor(theta)
    K = t.shape[0] - 1
    if rule == "peak":
        scale = (t * basis_peak(K)).sum()
    elif rule == "central":
        scale = central_peak(K) * t.sum()
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return t / scale


def normalize_coefficients(theta_raw, rule: str = "peak") -> Tensor:
    """softplus to positive coefficients, then :func:`rescale_coefficients`."""
    return rescale_coefficients(ad.softplus(theta_raw), rule)


def bernstein_response(theta, lam) -> np.ndarray:
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    K = len(theta) - 1
    lam = np.asarray(lam, dtype=np.float64)
    return sum(theta[k] * bernstein_basis(k, K, lam) for k in range(K + 1))


@dataclass
class FilterSpec:
    theta_raw: Tensor
    rule: str = "peak"

    @property
    def K(self) -> int:
        return self.theta_raw.shape[0] - 1

    @property
    def theta(self) -> Tensor:
        return normalize_coefficients(self.theta_raw, self.rule)

    @classmethod
    def init(cls, K: int, rng=None, scale: float = 0.1):
        raw = np.zeros(K + 1) if rng is None else scale * rng.standard_normal(K + 1)
        return cls(Tensor(raw))


class DenseOperator:
    """Adapter so dense matrices can stand in for a :class:`NeighborGraph`."""

    def __init__(self, a):
        self.a = a if isinstance(a, Tensor) else Tensor(a)

    def apply(self, z):
        return self.a @ z

    def complement(self):
        return DenseOperator(np.eye(self.a.shape[0]) - self.a)


def _as_operator(op):
    return op if hasattr(op, "apply") else DenseOperator(op)


def apply_filter(theta, op, z) -> Tensor:
    """``sum_k theta_k C(K,k) (I - A)^(K-k) A^k Z``.

    Evaluated as a Horner recursion in ``(I - A)``, which needs 2K operator
    applications instead of K(K+1)/2 + K.
    """
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    op = _as_operator(op)
    K = theta.shape[0] - 1
    coef = theta * np.array([comb(K, k, exact=True) for k in range(K + 1)], dtype=np.float64)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim != 2:
        raise ad.ShapeError("filter input must be N x channels")
    if hasattr(op, "pattern"):
        return ad.sparse_horner(op.diag, op.offvals, coef, z, op.pattern)
    comp = op.complement()
    acc = coef[0] * z
    power = z
    for m in range(1, K + 1):
        power = op.apply(power)
        acc = comp.apply(acc) + coef[m] * power
    return acc


@dataclass
class ChannelMixer:
    m1_raw: Tensor
    m2_raw: Tensor

    @property
    def w1(self) -> Tensor:
        return 0.5 * (self.m1_raw + ad.transpose(self.m1_raw))

    @property
    def w2(self) -> Tensor:
        return 0.5 * (self.m2_raw + ad.transpose(self.m2_raw))

    @classmethod
    def identity(cls, d_h: int):
        return cls(Tensor(np.eye(d_h)), Tensor(np.zeros((d_h, d_h))))

    @classmethod
    def init(cls, d_h: int, rng, scale: float = 0.1, decay: float = 0.0):
        m1 = np.eye(d_h) + scale * rng.standard_normal((d_h, d_h))
        m2 = decay * np.eye(d_h) + scale * rng.standard_normal((d_h, d_h))
        return cls(Tensor(m1), Tensor(m2))


def mixing_rhs(theta, op, z, mixer: ChannelMixer | None = None, w1=None, w2=None) -> Tensor:
    """``B_K(A) Z W1 - Z W2``."""
    if mixer is not None:
        w1, w2 = mixer.w1, mixer.w2
    filt = apply_filter(theta, op, z)
    out = filt @ w1 if w1 is not None else filt
    if w2 is not None:
        out = out - z @ w2
    return out


def kronecker_spectrum(phi, mu, varphi) -> np.ndarray:
    """Sorted multiset ``{mu_a * phi_b - varphi_a}``.

    This is the spectrum of ``W1^T (x) B - W2^T (x) I`` when W1 and W2 share
    eigenvectors (``mu_a``, ``varphi_a`` paired by eigenvector); use
    :func:`mixed_operator_spectrum` for arbitrary symmetric mixers.
    """
    phi, mu, varphi = (np.asarray(v, dtype=np.float64) for v in (phi, mu, varphi))
    if mu.shape != varphi.shape:
        raise ValueError("mu and varphi must pair one-to-one")
    return np.sort((mu[:, None] * phi[None, :] - varphi[:, None]).ravel())


def mixed_operator_spectrum(phi, w1, w2) -> np.ndarray:
    """Exact spectrum for symmetric mixers: union over graph eigenvalues of eig(phi_b W1 - W2)."""
    w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
    return np.sort(np.concatenate([np.linalg.eigvalsh(p * w1 - w2) for p in np.asarray(phi)]))


def vectorized_operator(b: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Dense ``W1^T (x) B - W2^T (x) I`` acting on column-major ``vec(Z)``."""
    return np.kron(w1.T, b) - np.kron(w2.T, np.eye(b.shape[0]))


# ---------------------------------------------------------------------------
# closed-form responses of hand-designed and learned filter families
# ---------------------------------------------------------------------------

class RangeError(ValueError):
    pass


def _need(cond: bool, msg: str):
    if not cond:
        raise RangeError(msg)


def closed_form_response(kind: str, params, lam) -> np.ndarray:
    """Frequency response ``g(lam)`` of a filter family.

    ``ppr``: theta in (0, 1].  ``gnn-lf``: (theta1 in [1/2, 1), theta2 in
    (0, 2/3)).  ``gnn-hf``: (theta1 > 0, theta2 in (0, 1]).  ``chebyshev``,
    ``vanilla``, ``bernstein``: coefficient vectors (vanilla starts at
    lam^1, bernstein needs positive entries).
    """
    lam = np.asarray(lam, dtype=np.float64)
    p = np.atleast_1d(np.asarray(params, dtype=np.float64))
    if kind == "ppr":
        _need(p.size == 1, "ppr takes one parameter")
        t = p[0]
        _need(0 < t <= 1, f"ppr theta must lie in (0, 1], got {t}")
        return t / (1.0 - (1.0 - t) * lam)
    if kind == "gnn-lf":
        _need(p.size == 2, "gnn-lf takes two parameters")
        t1, t2 = p
        _need(0.5 <= t1 < 1, f"gnn-lf theta1 must lie in [1/2, 1), got {t1}")
        _need(0 < t2 < 2 / 3, f"gnn-lf theta2 must lie in (0, 2/3), got {t2}")
        return (t1 + (1 - t1) * lam) / ((t1 + 1 / t2 - 1) + (2 - t1 - 1 / t2) * lam)
    if kind == "gnn-hf":
        _need(p.size == 2, "gnn-hf takes two parameters")
        t1, t2 = p
        _need(t1 > 0, f"gnn-hf theta1 must be positive, got {t1}")
        _need(0 < t2 <= 1, f"gnn-hf theta2 must lie in (0, 1], got {t2}")
        return (1 + t1 * (1 - lam)) / ((t1 + 1 / t2) + (1 - t1 - 1 / t2) * lam)
    if kind == "chebyshev":
        _need(p.size >= 1, "chebyshev needs at least one coefficient")
        t_prev, t_cur = np.ones_like(lam), lam
        out = p[0] * t_prev
        for c in p[1:]:
            out = out + c * t_cur
            t_prev, t_cur = t_cur, 2 * lam * t_cur - t_prev
        return out
    if kind == "vanilla":
        _need(p.size >= 1, "vanilla needs at least one coefficient")
        return sum(c * lam ** (i + 1) for i, c in enumerate(p))
    if kind == "bernstein":
        _need(bool(np.all(p > 0)), "bernstein coefficients must be positive")
        _need(bool(np.all((lam >= 0) & (lam <= 1))), "bernstein response is defined on [0, 1]")
        return bernstein_response(p, lam)
    raise ValueError(f"unknown filter {kind!r}")


def write_response_csv(path_or_file, lam, response) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "response"])
        for a, b in zip(np.ravel(lam), np.ravel(response)):
            w.writerow([f"{a:.9g}", f"{b:.9g}"])
    finally:
        if own:
            fh.close()

"""Numerical self-checks run by ``gdflow selftest``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import autodiff as ad
from .autodiff import Tensor
from .ode import IntegratorConfig, OdeState, integrate
from .spectral import bernstein_response, kronecker_spectrum, normalize_coefficients, vectorized_operator


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""


def _op_cases(rng):
    """One small differentiable expression per registered op."""
    a = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    m = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    s = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    idx = np.array([2, 0, 2, 1])
    rows, cols = np.array([0, 1, 2, 2]), np.array([1, 2, 0, 1])
    pat = ad.SparsePattern(rows, cols, 3)
    dg = Tensor(rng.uniform(0.2, 0.8, 3), requires_grad=True)
    vals = Tensor(rng.uniform(0.1, 0.4, 4), requires_grad=True)
    coef = Tensor(rng.uniform(0.5, 1.0, 3), requires_grad=True)
    z = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return {
        "add": ([a, b], lambda: ((a + b) * w).sum()),
        "sub": ([a, b], lambda: ((a - b) * w).sum()),
        "mul": ([a, b], lambda: ((a * b) * w).sum()),
        "div": ([a, b], lambda: ((a / b) * w).sum()),
        "maximum": ([a, b], lambda: (ad.maximum(a, b + 0.05) * w).sum()),
        "where": ([a, b], lambda: (ad.where(w > 0, a, b) * w).sum()),
        "negate": ([s], lambda: (-s * w).sum()),
        "exp": ([s], lambda: (ad.exp(s) * w).sum()),
        "log": ([a], lambda: (ad.log(a) * w).sum()),
        "sqrt": ([a], lambda: (ad.sqrt(a) * w).sum()),
        "square": ([s], lambda: (ad.square(s) * w).sum()),
        "leaky_relu": ([s], lambda: (ad.leaky_relu(s) * w).sum()),
        "softplus": ([s], lambda: (ad.softplus(s) * w).sum()),
        "matmul": ([s, m], lambda: ((s @ m) * w[:, :2]).sum()),
        "reduce": ([s], lambda: (s.max(axis=1) * w[:, 0]).sum() + (s.mean(axis=0) * w[0]).sum()),
        "reshape": ([s], lambda: (ad.reshape(s, (4, 3)) * w.reshape(4, 3)).sum()),
        "transpose": ([s], lambda: (ad.transpose(s) * w.T).sum()),
        "getitem": ([s], lambda: (s[1:, ::2] * w[1:, ::2]).sum()),
        "concat": ([a, s], lambda: (ad.concat([a, s], axis=0) * np.vstack([w, w])).sum()),
        "gather_rows": ([s], lambda: (ad.gather_rows(s, idx) * rng_fixed(idx)).sum()),
        "scatter_add": ([s], lambda: (ad.scatter_add(ad.transpose(s), idx, 3) * w[:, :3]).sum()),
        "sparse_apply": ([dg, vals, z], lambda: (ad.sparse_apply(dg, vals, z, pat) * w[:, :2]).sum()),
        "sparse_horner": ([dg, vals, coef, z], lambda: (ad.sparse_horner(dg, vals, coef, z, pat) * w[:, :2]).sum()),
    }


def rng_fixed(idx):
    return np.arange(1, len(idx) * 4 + 1, dtype=np.float64).reshape(len(idx), 4) / 7.0


def gradient_suite(tol: float = 1e-4) -> SuiteResult:
    rng = np.random.default_rng(0)
    worst, failed = 0.0, []
    for name, (inputs, f) in _op_cases(rng).items():
        rep = ad.grad_check(f, inputs, tol=tol)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failed.append(f"{name} rel_error={rep.max_rel_error:.2e}")
    return SuiteResult("gradient-check", not failed, worst, "; ".join(failed) or "all ops")


def bernstein_suite(trials: int = 50) -> SuiteResult:
    rng = np.random.default_rng(1)
    lam = np.linspace(0.0, 1.0, 1001)
    worst, lowest = 0.0, np.inf
    for K in range(1, 13):
        for _ in range(trials):
            theta = normalize_coefficients(3.0 * rng.standard_normal(K + 1)).data
            r = bernstein_response(theta, lam)
            worst = max(worst, r.max())
            lowest = min(lowest, r[1:].min())
    ok = worst <= 1 + 1e-9 and lowest > 0
    return SuiteResult("bernstein-bound", ok, max(0.0, worst - 1.0), f"max response {worst:.12f}")


def rk4_suite() -> SuiteResult:
    rng = np.random.default_rng(2)
    n = 6
    b = rng.standard_normal((n, n))
    a = (b + b.T) / 2
    z0 = rng.standard_normal((n, 1))
    exact = sla.expm(a) @ z0
    errs = []
    for dt in (0.1, 0.05, 0.025):
        out = integrate(OdeState(0.0, Tensor(z0)), lambda t, z: Tensor(a) @ z, IntegratorConfig(dt=dt))
        errs.append(np.abs(out.z.data - exact).max())
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    ok = all(12 <= r <= 20 for r in ratios)
    return SuiteResult("rk4-order", ok, errs[-1], f"ratios {ratios[0]:.2f}, {ratios[1]:.2f}")


def kronecker_suite(trials: int = 20) -> SuiteResult:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(trials):
        n, dh = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        g = rng.standard_normal((n, n))
        bmat = (g + g.T) / 2
        q, _ = np.linalg.qr(rng.standard_normal((dh, dh)))
        mu, vp = rng.standard_normal(dh), rng.standard_normal(dh)
        w1, w2 = q @ np.diag(mu) @ q.T, q @ np.diag(vp) @ q.T
        dense = np.sort(np.linalg.eigvalsh(vectorized_operator(bmat, w1, w2)))
        pred = kronecker_spectrum(np.linalg.eigvalsh(bmat), mu, vp)
        worst = max(worst, np.abs(dense - pred).max())
    return SuiteResult("kronecker-spectrum", worst <= 1e-8, worst)


SUITES = (gradient_suite, bernstein_suite, rk4_suite, kronecker_suite)


def run_all() -> list[SuiteResult]:
    return [suite() for suite in SUITES]

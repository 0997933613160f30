"""Fixed-step RK4 integration of graph feature dynamics.

The integrators work on any ``f(t, z) -> dz/dt`` built from Tensor ops, so
gradients flow through the fully unrolled trajectory.  :class:`GraphDynamics`
is the filtered-diffusion right-hand side used by the model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectral import apply_filter

REFRESH_POLICIES = ("per-step", "per-stage")


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, detail: str = "non-finite stage value"):
        self.step = step
        super().__init__(f"integration diverged at step {step}: {detail}")


class GridError(ValueError):
    pass


@dataclass
class OdeState:
    t: float
    z: Tensor
    p: Tensor | None = None


@dataclass
class IntegratorConfig:
    dt: float = 0.1
    T: float = 1.0
    graph_refresh: str = "per-step"
    nonlinearity: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < 0:
            raise ValueError(f"T must be non-negative, got {self.T}")
        if self.graph_refresh not in REFRESH_POLICIES:
            raise ValueError(f"graph_refresh must be one of {REFRESH_POLICIES}")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))


def _check(z: Tensor, step: int, stage: int):
    if not np.all(np.isfinite(z.data)):
        raise DivergenceError(step, f"non-finite value in stage {stage}")


def rk4_step(f: Callable, state: OdeState, dt: float, step: int = 0) -> OdeState:
    t, z = state.t, state.z
    k1 = f(t, z)
    _check(k1, step, 1)
    k2 = f(t + dt / 2, z + (dt / 2) * k1)
    _check(k2, step, 2)
    k3 = f(t + dt / 2, z + (dt / 2) * k2)
    _check(k3, step, 3)
    k4 = f(t + dt, z + dt * k3)
    _check(k4, step, 4)
    z_new = z + (dt / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check(z_new, step, 4)
    return OdeState(t + dt, z_new, state.p)


def _trajectory(state0: OdeState, f: Callable, cfg: IntegratorConfig, keep: set[int]):
    state = state0
    kept = {0: state0} if 0 in keep else {}
    on_step = getattr(f, "on_step", None)
    for i in range(cfg.steps):
        if on_step is not None:
            on_step(state)
        state = rk4_step(f, state, cfg.dt, step=i)
        if i + 1 in keep:
            kept[i + 1] = state
    return state, kept


def integrate(state0: OdeState, f: Callable, cfg: IntegratorConfig) -> OdeState:
    """``cfg.steps`` RK4 steps.  ``f.on_step(state)`` is called before each step if defined."""
    return _trajectory(state0, f, cfg, set())[0]


def snapshot_steps(fractions, cfg: IntegratorConfig) -> list[int]:
    out = []
    steps = cfg.steps
    for fr in fractions:
        if not 0 <= fr <= 1:
            raise GridError(f"snapshot fraction {fr} outside [0, 1]")
        pos = fr * steps
        if abs(pos - round(pos)) > 1e-9 * max(1.0, steps):
            raise GridError(f"snapshot fraction {fr} is not on the step grid (dt/T = {cfg.dt / cfg.T:g})")
        out.append(int(round(pos)))
    return out


def integrate_with_snapshots(state0: OdeState, f: Callable, cfg: IntegratorConfig, fractions) -> list[OdeState]:
    idx = snapshot_steps(fractions, cfg)
    last = max(idx, default=0)
    short = IntegratorConfig(cfg.dt, last * cfg.dt, cfg.graph_refresh, cfg.nonlinearity) if last < cfg.steps else cfg
    _, kept = _trajectory(state0, f, short, set(idx))
    return [kept[i] for i in idx]


# ---------------------------------------------------------------------------
# graph dynamics
# ---------------------------------------------------------------------------

class GraphDynamics:
    """``dZ/dt = act(F(A) Z W1 - Z W2)`` with ``A`` rebuilt from the current Z.

    ``graph_fn(z)`` returns an operator (anything with ``apply``/``complement``).
    ``theta=None`` uses ``A`` itself instead of the Bernstein filter; ``w1=None``
    and ``w2=None`` drop the respective mixing term.
    """

    def __init__(self, graph_fn: Callable, theta=None, w1=None, w2=None,
                 refresh: str = "per-step", nonlinearity: bool = True, slope: float = ad.DEFAULT_SLOPE):
        if refresh not in REFRESH_POLICIES:
            raise ValueError(f"graph_refresh must be one of {REFRESH_POLICIES}")
        self.graph_fn = graph_fn
        self.theta = theta
        self.w1, self.w2 = w1, w2
        self.refresh = refresh
        self.nonlinearity = nonlinearity
        self.slope = slope
        self.graph = None
        self.builds = 0

    def _build(self, z):
        self.builds += 1
        return self.graph_fn(z)

    def on_step(self, state: OdeState):
        if self.refresh == "per-step":
            self.graph = self._build(state.z)

    def linear_part(self, op, z: Tensor) -> Tensor:
        filt = op.apply(z) if self.theta is None else apply_filter(self.theta, op, z)
        out = filt @ self.w1 if self.w1 is not None else filt
        if self.w2 is not None:
            out = out - z @ self.w2
        return out

    def __call__(self, t: float, z: Tensor) -> Tensor:
        if self.refresh == "per-stage" or self.graph is None:
            op = self._build(z)
            if self.refresh == "per-step":
                self.graph = op
        else:
            op = self.graph
        out = self.linear_part(op, z)
        return ad.leaky_relu(out, self.slope) if self.nonlinearity else out


def rhs(state: OdeState, dynamics: GraphDynamics) -> Tensor:
    """Right-hand side at ``state``, building the graph from ``state.z``."""
    dynamics.graph = dynamics._build(state.z)
    out = dynamics.linear_part(dynamics.graph, state.z)
    return ad.leaky_relu(out, dynamics.slope) if dynamics.nonlinearity else out


def standardize(z: Tensor, sizes=None, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance channels, separately inside each segment."""
    if sizes is None:
        mu = z.mean(axis=0, keepdims=True)
        var = ad.square(z - mu).mean(axis=0, keepdims=True)
        return (z - mu) / ad.sqrt(var + eps)
    seg = np.repeat(np.arange(len(sizes)), sizes)
    inv = Tensor((1.0 / np.asarray(sizes, dtype=np.float64))[:, None])
    mu = ad.scatter_add(z, seg, len(sizes)) * inv
    c = z - ad.gather_rows(mu, seg)
    var = ad.scatter_add(ad.square(c), seg, len(sizes)) * inv
    return c / ad.gather_rows(ad.sqrt(var + eps), seg)


def integer_step_baseline(z0: Tensor, graph_fn: Callable, thetas, layers: int = 3, sizes=None,
                          normalize: bool = True, slope: float = ad.DEFAULT_SLOPE) -> Tensor:
    """``Z <- act(norm(A Z Theta_l))`` for ``layers`` layers, A rebuilt from Z each layer."""
    if len(thetas) < layers:
        raise ValueError(f"need {layers} layer weights, got {len(thetas)}")
    z = z0
    for l in range(layers):
        op = graph_fn(z)
        h = op.apply(z) @ thetas[l]
        if normalize:
            h = standardize(h, sizes)
        z = ad.leaky_relu(h, slope)
    return z

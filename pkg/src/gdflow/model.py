"""Point-cloud denoising network: edge-feature lift, graph ODE core, residual head."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .autodiff import Tensor
from .ode import GraphDynamics, IntegratorConfig, OdeState, integer_step_baseline, integrate, integrate_with_snapshots
from .pointcloud import PointCloud
from .spectral import normalize_coefficients

VARIANTS = ("full", "no-geo-graph", "no-spectral-filtering", "no-channel-mixing", "dtl-gcn")
DTL_LAYERS = 3


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 16
    d_h: int = 64
    K: int = 8
    k: int = 16
    heads: int = 4
    key_dim: int = 0  # 0 means "same as d"
    lift_hidden: int = 0  # 0 means a single-layer edge MLP
    alpha: float = 1.0
    metric_scale: float = 0.1
    head_scale: float = 1e-3
    metric_form: str = "symmetric"  # or "center": use G_i alone for edge (i, j)
    variant: str = "full"
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        if isinstance(self.integrator, dict):
            self.integrator = IntegratorConfig(**self.integrator)
        for name in ("d", "d_h", "k", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.K < 0 or self.key_dim < 0 or self.lift_hidden < 0:
            raise ValueError("K, key_dim and lift_hidden must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.metric_form not in ("symmetric", "center"):
            raise ValueError(f"metric_form must be 'symmetric' or 'center', got {self.metric_form!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown model keys: {sorted(extra)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, dh, h = cfg.d, cfg.d_h, cfg.heads
    kd = cfg.key_dim or d
    shapes: dict[str, tuple] = {}
    for name, width in (("lift_p", d), ("lift_z", dh)):
        first = cfg.lift_hidden or width
        shapes[f"{name}.center"] = (3, first)
        shapes[f"{name}.edge"] = (3, first)
        shapes[f"{name}.bias"] = (first,)
        if cfg.lift_hidden:
            shapes[f"{name}.w2"] = (cfg.lift_hidden, width)
            shapes[f"{name}.b2"] = (width,)
    shapes["metric.w_q"] = (d + dh, h * kd)
    shapes["metric.w_k"] = (d + dh, h * kd)
    shapes["metric.w_out"] = (h * cfg.k * cfg.k, d * d)
    shapes["metric.alpha_raw"] = ()
    shapes["filter.theta_raw"] = (cfg.K + 1,)
    shapes["mixer.m1"] = (dh, dh)
    shapes["mixer.m2"] = (dh, dh)
    for l in range(DTL_LAYERS):
        shapes[f"dtl.theta{l}"] = (dh, dh)
    shapes["head.w"] = (dh, 3)
    shapes["head.b"] = (3,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    p: dict[str, np.ndarray] = {}
    for name in ("lift_p", "lift_z"):
        fan = shapes[f"{name}.center"][1]
        p[f"{name}.center"] = rng.standard_normal((3, fan)) * np.sqrt(2.0 / 6)
        p[f"{name}.edge"] = rng.standard_normal((3, fan)) * np.sqrt(2.0 / 6)
        p[f"{name}.bias"] = np.zeros(fan)
        if cfg.lift_hidden:
            w = shapes[f"{name}.w2"]
            p[f"{name}.w2"] = rng.standard_normal(w) * np.sqrt(2.0 / w[0])
            p[f"{name}.b2"] = np.zeros(w[1])
    metric = gr.MetricParams.init(cfg.d, cfg.d_h, cfg.k, cfg.heads, cfg.key_dim or None, rng,
                                  alpha=cfg.alpha, scale=cfg.metric_scale)
    p["metric.w_q"], p["metric.w_k"], p["metric.w_out"] = metric.w_q.data, metric.w_k.data, metric.w_out.data
    p["metric.alpha_raw"] = metric.alpha_raw.data
    p["filter.theta_raw"] = 0.1 * rng.standard_normal(cfg.K + 1)
    dh = cfg.d_h
    p["mixer.m1"] = np.eye(dh) + 0.1 * rng.standard_normal((dh, dh)) / np.sqrt(dh)
    p["mixer.m2"] = 0.1 * rng.standard_normal((dh, dh)) / np.sqrt(dh)
    for l in range(DTL_LAYERS):
        p[f"dtl.theta{l}"] = np.eye(dh) + 0.1 * rng.standard_normal((dh, dh)) / np.sqrt(dh)
    p["head.w"] = cfg.head_scale * rng.standard_normal((dh, 3))
    p["head.b"] = np.zeros(3)
    out = {name: Tensor(p[name], requires_grad=True, name=name) for name in shapes}
    check_shapes(out, cfg)
    return out


def check_shapes(params: dict, cfg: ModelConfig):
    shapes = param_shapes(cfg)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)}")
    extra = set(params) - set(shapes)
    if extra:
        raise CheckpointError(f"unexpected parameters: {sorted(extra)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"parameter {name} has shape {tuple(params[name].shape)}, config expects {shape}")


def metric_params(params: dict, cfg: ModelConfig) -> gr.MetricParams:
    return gr.MetricParams(params["metric.w_q"], params["metric.w_k"], params["metric.w_out"],
                           params["metric.alpha_raw"], cfg.heads, cfg.d)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` and a little-endian float64 blob ``params.bin``."""
    os.makedirs(path, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in param_shapes(cfg):
        arr = np.array(params[name].data, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "gdflow-checkpoint", "version": 1, "dtype": "<f8",
                "config": cfg.to_dict(), "params": entries}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[dict, ModelConfig]:
    """Load params; with ``cfg`` given, shapes are validated against it instead of the stored config."""
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        with open(os.path.join(path, "params.bin"), "rb") as fh:
            blob = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if manifest.get("format") != "gdflow-checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint")
    stored = ModelConfig.from_dict(manifest["config"])
    cfg = cfg or stored
    params = {}
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = e["offset"] + 8 * count
        if end > len(blob):
            raise CheckpointError(f"parameter {e['name']} runs past the end of params.bin")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(shape)
        params[e["name"]] = Tensor(arr.astype(np.float64), requires_grad=True, name=e["name"])
    check_shapes(params, cfg)
    return params, cfg


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def edge_feature_lift(x: Tensor, idx: np.ndarray, params: dict, prefix: str, slope: float = ad.DEFAULT_SLOPE) -> Tensor:
    """``h_i = max_j mlp([x_i, x_j - x_i])`` over the neighbour lists in ``idx``.

    The first layer splits as ``x_i (C - E) + x_j E`` so it is evaluated per
    point and gathered per edge.
    """
    c, e, b = params[f"{prefix}.center"], params[f"{prefix}.edge"], params[f"{prefix}.bias"]
    n, k = idx.shape
    own = x @ (c - e) + b
    nb = x @ e
    h = ad.leaky_relu(ad.reshape(own, (n, 1, own.shape[1])) + ad.gather_rows(nb, idx), slope)
    if f"{prefix}.w2" in params:
        h = ad.leaky_relu(h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"], slope)
    return h.max(axis=1)


def _frames(points: np.ndarray, sizes) -> tuple[np.ndarray, np.ndarray]:
    """Per-point centroid and radius of its segment, for scale-free inputs."""
    center = np.empty_like(points)
    scale = np.empty((len(points), 1))
    s = 0
    for m in sizes:
        seg = points[s:s + m]
        c = seg.mean(0)
        r = np.sqrt(((seg - c) ** 2).sum(1).max())
        center[s:s + m] = c
        scale[s:s + m] = r if r > 0 else 1.0
        s += m
    return center, scale


class Model:
    """Binds a config and parameter dict; one instance per variant evaluation."""

    def __init__(self, cfg: ModelConfig, params: dict, variant: str | None = None):
        self.cfg = cfg
        self.params = params
        self.variant = variant or cfg.variant
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    def _encode(self, points: np.ndarray, sizes):
        cfg = self.cfg
        center, scale = _frames(points, sizes)
        x = Tensor((points - center) / scale)
        idx = gr.knn(x, cfg.k, sizes)
        p = edge_feature_lift(x, idx, self.params, "lift_p")
        z = edge_feature_lift(x, idx, self.params, "lift_z")
        return x, idx, p, z, scale

    def dynamics(self, x: Tensor, idx: np.ndarray, p: Tensor, sizes) -> GraphDynamics:
        cfg, prm, v = self.cfg, self.params, self.variant
        metric = metric_params(prm, cfg)
        if v == "no-geo-graph":
            fixed = gr.euclidean_adjacency(x, cfg.k, sizes, idx=idx)
            graph_fn = lambda z: fixed  # noqa: E731
        else:
            sym = cfg.metric_form == "symmetric"
            graph_fn = lambda z: gr.geometric_adjacency(p, z, metric, cfg.k, sizes, symmetric=sym)  # noqa: E731
        theta = None if v == "no-spectral-filtering" else normalize_coefficients(prm["filter.theta_raw"])
        if v == "no-channel-mixing":
            w1 = w2 = None
        else:
            w1 = 0.5 * (prm["mixer.m1"] + ad.transpose(prm["mixer.m1"]))
            w2 = 0.5 * (prm["mixer.m2"] + ad.transpose(prm["mixer.m2"]))
        ic = cfg.integrator
        return GraphDynamics(graph_fn, theta, w1, w2, ic.graph_refresh, ic.nonlinearity)

    def _decode(self, z: Tensor, scale: np.ndarray) -> Tensor:
        return (z @ self.params["head.w"] + self.params["head.b"]) * scale

    def forward_points(self, points: np.ndarray, sizes=None, fractions=None):
        """Displaced points (Tensor, N x 3); with ``fractions``, a list of them."""
        points = np.asarray(points, dtype=np.float64)
        sizes = [len(points)] if sizes is None else list(sizes)
        x, idx, p, z0, scale = self._encode(points, sizes)
        if self.variant == "dtl-gcn":
            if fractions is not None and list(fractions) != [1.0]:
                raise ValueError("the integer-step baseline has no intermediate states")
            metric = metric_params(self.params, self.cfg)
            thetas = [self.params[f"dtl.theta{l}"] for l in range(DTL_LAYERS)]
            sym = self.cfg.metric_form == "symmetric"
            zs = [integer_step_baseline(z0, lambda z: gr.geometric_adjacency(p, z, metric, self.cfg.k, sizes, sym),
                                        thetas, DTL_LAYERS, sizes)]
        else:
            dyn = self.dynamics(x, idx, p, sizes)
            state0 = OdeState(0.0, z0, p)
            if fractions is None:
                zs = [integrate(state0, dyn, self.cfg.integrator).z]
            else:
                zs = [s.z for s in integrate_with_snapshots(state0, dyn, self.cfg.integrator, fractions)]
        base = Tensor(points)
        outs = [base + self._decode(z, scale) for z in zs]
        return outs if fractions is not None else outs[0]


def forward(noisy: PointCloud, params: dict, cfg: ModelConfig, variant: str | None = None) -> PointCloud:
    out = Model(cfg, params, variant).forward_points(noisy.points)
    return PointCloud(out.data, noisy.name)


def forward_variant(variant: str, noisy: PointCloud, params: dict, cfg: ModelConfig) -> PointCloud:
    return forward(noisy, params, cfg, variant)


def forward_batch(clouds: list, params: dict, cfg: ModelConfig, variant: str | None = None) -> list[PointCloud]:
    """Evaluate several clouds as one disjoint graph."""
    sizes = [len(c) for c in clouds]
    pts = np.concatenate([c.points for c in clouds])
    out = Model(cfg, params, variant).forward_points(pts, sizes).data
    offs = np.cumsum([0] + sizes)
    return [PointCloud(out[a:b], c.name) for a, b, c in zip(offs[:-1], offs[1:], clouds)]


def denoise(noisy: PointCloud, params: dict, cfg: ModelConfig, variant: str | None = None,
            fractions=None) -> list[PointCloud]:
    """Denoise a cloud; returns one cloud per requested fraction (default ``[1.0]``)."""
    fractions = [1.0] if fractions is None else list(fractions)
    outs = Model(cfg, params, variant).forward_points(noisy.points, fractions=fractions)
    return [PointCloud(o.data, noisy.name) for o in outs]

"""Training loop: Adam, plateau learning-rate schedule, validation, checkpoints."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .metrics import chamfer, supervised_loss, unsupervised_loss
from .model import Model, ModelConfig, init_params, save_checkpoint
from .pointcloud import NoiseSpec, PointCloud, add_noise, extract_patches

log = logging.getLogger(__name__)

LOSS_MODES = ("supervised", "unsupervised")
LOG_HEADER = ("iter", "loss", "lr", "val_cd")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 200
    lr_init: float = 1e-3
    lr_min: float = 1e-6
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    batch_size: int = 4
    patch_size: int = 1024
    sigma_range: tuple = (0.01, 0.03)
    loss_mode: str = "supervised"
    seed: int = 0
    val_every: int = 10
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    unsup_lambda: float = 0.01
    unsup_k: int = 8
    unsup_m: int = 8
    unsup_sigma: float = 0.0  # prior bandwidth relative to the diagonal; 0 uses the noise level

    def __post_init__(self):
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        if len(self.sigma_range) != 2 or not 0 <= self.sigma_range[0] <= self.sigma_range[1]:
            raise ValueError(f"sigma_range must be [lo, hi] with 0 <= lo <= hi, got {self.sigma_range}")
        if not self.lr_min <= self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.iterations < 0 or self.batch_size < 1 or self.patch_size < 1 or self.val_every < 1:
            raise ValueError("iterations >= 0, batch_size, patch_size and val_every >= 1 required")
        if self.unsup_sigma < 0:
            raise ValueError("unsup_sigma must be >= 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_range"] = list(self.sigma_range)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        extra = set(data) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown train keys: {sorted(extra)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``params[name].data``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[name].data = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` evaluations without relative improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5, lr_min: float = 1e-6, rel_tol: float = 1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.lr_min = lr_min
        self.rel_tol = rel_tol
        self.best = np.inf
        self.bad = 0

    def step(self, value: float) -> float:
        if value < self.best * (1 - self.rel_tol) or not np.isfinite(self.best):
            self.best = value
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.bad = 0
        return self.lr


def plateau_scheduler(history, cfg: TrainConfig, lr: float | None = None) -> float:
    """Rate after replaying a validation history from ``lr`` (default ``cfg.lr_init``)."""
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    sched = PlateauScheduler(cfg.lr_init if lr is None else lr, cfg.plateau_patience, cfg.plateau_factor, cfg.lr_min)
    for h in history:
        sched.step(float(h))
    return sched.lr


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GDFLOW_THREADS", "1")))
    except ValueError:
        return 1


def make_pairs(clouds: list, sigma: float, seed: int) -> list[tuple[PointCloud, PointCloud]]:
    """Fixed (noisy, clean) pairs, one noise stream per cloud."""
    ss = np.random.SeedSequence(seed)
    out = []
    for c, child in zip(clouds, ss.spawn(len(clouds))):
        noise_seed = int(child.generate_state(1)[0])
        out.append((add_noise(c, NoiseSpec(sigma, noise_seed)), c))
    return out


def _sample_batch(clouds: list, cfg: TrainConfig, rng: np.random.Generator):
    sigma = float(rng.uniform(*cfg.sigma_range))
    clean, noisy, diags = [], [], []
    for _ in range(cfg.batch_size):
        src = clouds[int(rng.integers(len(clouds)))]
        diags.append(src.diagonal)
        size = min(cfg.patch_size, len(src))
        patch = extract_patches(src, size, 1, seed=int(rng.integers(2**31)))[0]
        clean.append(patch)
        noisy.append(add_noise(patch, NoiseSpec(sigma, int(rng.integers(2**31))), diagonal=src.diagonal))
    # absolute bandwidth of the reconstruction prior
    band = cfg.unsup_sigma if cfg.unsup_sigma > 0 else sigma
    return band * float(np.mean(diags)), clean, noisy


def validation_cd(params: dict, mcfg: ModelConfig, pairs: list, variant: str | None = None) -> float:
    model = Model(mcfg, params, variant)

    def one(pair):
        noisy, clean = pair
        return chamfer(model.forward_points(noisy.points).data, clean.points)

    workers = min(worker_count(), len(pairs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            vals = list(ex.map(one, pairs))
    else:
        vals = [one(p) for p in pairs]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_val: float
    initial_val: float
    rows: list


def _snapshot(params: dict) -> dict:
    return {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(mcfg: ModelConfig, train_clouds: list, val_pairs: list, tcfg: TrainConfig,
          out_dir: str | None = None, params: dict | None = None, variant: str | None = None) -> TrainResult:
    """Train and return final/best parameters.

    ``val_pairs`` holds (noisy, clean) clouds.  With ``out_dir``, writes
    ``log.csv``, ``best/`` and ``final/`` checkpoints there.
    """
    if not train_clouds:
        raise ValueError("no training clouds")
    if not val_pairs:
        raise ValueError("no validation pairs")
    params = init_params(mcfg, tcfg.seed) if params is None else params
    names = list(params)
    rng = np.random.default_rng(tcfg.seed)
    adam = AdamState()
    sched = PlateauScheduler(tcfg.lr_init, tcfg.plateau_patience, tcfg.plateau_factor, tcfg.lr_min)
    model_variant = variant or mcfg.variant

    initial_val = validation_cd(params, mcfg, val_pairs, model_variant)
    best_val, best = initial_val, _snapshot(params)
    rows = []
    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "log.csv"), "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    try:
        for it in range(1, tcfg.iterations + 1):
            band, clean, noisy = _sample_batch(train_clouds, tcfg, rng)
            sizes = [len(c) for c in clean]
            pts = np.concatenate([c.points for c in noisy])
            with ad.Tape() as tape:
                out = Model(mcfg, params, model_variant).forward_points(pts, sizes)
                if tcfg.loss_mode == "supervised":
                    loss = supervised_loss(out, np.concatenate([c.points for c in clean]), sizes)
                else:
                    loss = unsupervised_loss(out, pts, band, tcfg.unsup_lambda,
                                             tcfg.unsup_k, tcfg.unsup_m, sizes)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at iteration {it}")
            grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
            clip_by_global_norm(grads, tcfg.clip_norm)
            lr = sched.lr
            adam_step(params, grads, adam, lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)

            val = None
            if it % tcfg.val_every == 0 or it == tcfg.iterations:
                val = validation_cd(params, mcfg, val_pairs, model_variant)
                sched.step(val)
                if val <= best_val:
                    best_val, best = val, _snapshot(params)
            row = (it, float(loss.data), lr, val)
            rows.append(row)
            if writer:
                writer.writerow([str(it), _fmt(row[1]), _fmt(lr), _fmt(val)])
            log.debug("iter %d loss %.6g lr %.3g val %s", it, float(loss.data), lr, val)
    finally:
        if fh:
            fh.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "best"), best, mcfg, {"val_cd": best_val})
        save_checkpoint(os.path.join(out_dir, "final"), params, mcfg)
    return TrainResult(params, best, best_val, initial_val, rows)

"""Point-cloud denoising with learned-metric graphs and continuous-time spectral filtering."""
from .autodiff import Tape, Tensor, grad_check
from .metrics import chamfer, emd, evaluate, hausdorff, rmsd
from .model import ModelConfig, denoise, forward, init_params, load_checkpoint, save_checkpoint
from .ode import IntegratorConfig
from .pointcloud import NoiseSpec, PointCloud, add_noise, load, save, synth
from .trainer import TrainConfig, train

__all__ = [
    "Tape", "Tensor", "grad_check",
    "chamfer", "emd", "evaluate", "hausdorff", "rmsd",
    "ModelConfig", "IntegratorConfig", "TrainConfig",
    "denoise", "forward", "init_params", "load_checkpoint", "save_checkpoint", "train",
    "NoiseSpec", "PointCloud", "add_noise", "load", "save", "synth",
]

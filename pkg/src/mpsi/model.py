"""End-to-end network: shallow conv, SAMG stack, global residual, pixel-shuffle head."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import checkpoint
from . import functional as F
from .blocks import SAMG
from .config import Ablation, ModelConfig, SsmConfig, load_config, write_config
from .nn import Conv2d, Module, to_map, to_seq
from .tensor import ShapeError, Tensor, as_tensor

__all__ = ["MPSI", "ModelConfig", "SsmConfig", "Ablation", "build_model", "save_model", "load_model"]


class MPSI(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        object.__setattr__(self, "cfg", cfg)
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.shallow = Conv2d(3, c, 3, rng)
        self.samgs = [self.add_module(f"samg{i}", SAMG(cfg, rng)) for i in range(cfg.num_samgs)]
        self.recon = Conv2d(c, 3 * cfg.scale**2, 3, rng)
        self.assign_names()

    def shallow_features(self, lr: Tensor) -> Tensor:
        lr = as_tensor(lr)
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ShapeError(f"MPSI expects a (B, 3, H, W) image batch, got {lr.shape}")
        return self.shallow(lr)

    def deep_features(self, f_s: Tensor) -> Tensor:
        hw = f_s.shape[2:]
        s = to_seq(f_s)
        for samg in self.samgs:
            s = samg(s, hw)
        return to_map(s, hw)

    def reconstruct(self, feat: Tensor) -> Tensor:
        return F.pixel_shuffle(self.recon(feat), self.cfg.scale)

    def forward(self, lr: Tensor) -> Tensor:
        f_s = self.shallow_features(lr)
        return self.reconstruct(self.deep_features(f_s) + f_s)


def build_model(cfg: ModelConfig, seed: int = 0) -> MPSI:
    return MPSI(cfg, seed)


def config_path_for(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".cfg")


def save_model(path, model: MPSI) -> None:
    """Write parameters plus a ``<path>.cfg`` model-config sidecar."""
    checkpoint.save(path, model.state_dict())
    write_config(config_path_for(path), model.cfg)


def load_model(path, cfg: ModelConfig | None = None) -> MPSI:
    """Rebuild from a checkpoint; ``cfg`` defaults to the sidecar next to it."""
    if cfg is None:
        cfg = load_config(config_path_for(path))
    state = checkpoint.load(path)
    model = MPSI(cfg, seed=0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"{path}: {exc.args[0]}") from exc
    return model


def super_resolve(model: MPSI, lr) -> np.ndarray:
    """Inference on one (3, H, W) or (B, 3, H, W) image; output clamped to [0, 1]."""
    from .tensor import no_grad

    arr = np.asarray(getattr(lr, "data", lr), dtype=np.float64)
    single = arr.ndim == 3
    with no_grad():
        out = model(Tensor(arr[None] if single else arr)).data
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out

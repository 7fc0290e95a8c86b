"""Degrade -> super-resolve -> score over a set of HR images."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import bicubic_resize, degrade, load_image, mod_crop
from .metrics import EvalProtocol, psnr, ssim, write_difference_map

Predictor = Callable[[np.ndarray], np.ndarray]


def bicubic_predictor(scale: int) -> Predictor:
    return lambda lr: np.clip(bicubic_resize(lr, scale), 0.0, 1.0)


def model_predictor(model) -> Predictor:
    from .model import super_resolve

    return lambda lr: super_resolve(model, lr)


def evaluate_images(
    hr_paths: Sequence,
    scale: int,
    predictor: Predictor | None,
    proto: EvalProtocol,
    diff_dir=None,
) -> list[tuple[str, float, float]]:
    """Score each image; ``predictor=None`` compares the HR image with itself."""
    if not hr_paths:
        raise ValueError("no HR images to evaluate")
    rows = []
    for path in hr_paths:
        path = Path(path)
        hr = mod_crop(load_image(path), scale)
        sr = hr if predictor is None else predictor(degrade(hr, scale))
        rows.append((path.name, psnr(sr, hr, proto), ssim(sr, hr, proto)))
        if diff_dir is not None:
            Path(diff_dir).mkdir(parents=True, exist_ok=True)
            write_difference_map(Path(diff_dir) / f"{path.stem}.diff.png", sr, hr)
    return rows

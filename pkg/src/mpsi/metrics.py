"""PSNR, SSIM and difference maps under an explicit evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5


@dataclass(frozen=True)
class EvalProtocol:
    convert_to_luma: bool = True
    border_crop: int = 0
    peak: float = 1.0

    @classmethod
    def for_scale(cls, scale: int, convert_to_luma: bool = True) -> EvalProtocol:
        return cls(convert_to_luma=convert_to_luma, border_crop=scale)

    def label(self) -> str:
        return f"{'Y-channel' if self.convert_to_luma else 'RGB'}, crop={self.border_crop}"


def _chw(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {arr.shape}")
    return arr


def to_luma(img) -> np.ndarray:
    """BT.601 full-range Y of a (3, H, W) image in [0, 1], shape (1, H, W)."""
    arr = _chw(img)
    if arr.shape[0] != 3:
        raise ValueError(f"luma conversion needs 3 channels, got {arr.shape[0]}")
    return np.tensordot(LUMA, arr, axes=(0, 0))[None]


def prepare(a, b, proto: EvalProtocol) -> tuple[np.ndarray, np.ndarray]:
    a, b = _chw(a), _chw(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    c = proto.border_crop
    h, w = a.shape[1:]
    if c < 0 or 2 * c >= min(h, w):
        raise ValueError(f"border_crop {c} must be >= 0 and less than half of {h}x{w}")
    if proto.convert_to_luma:
        a, b = to_luma(a), to_luma(b)
    if c:
        a, b = a[:, c:-c, c:-c], b[:, c:-c, c:-c]
    return a, b


def psnr(a, b, proto: EvalProtocol = EvalProtocol()) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a, b = prepare(a, b, proto)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(proto.peak**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation over the last two axes, valid region only."""
    k = g.size
    h, w = x.shape[-2:]
    rows = sum(g[i] * x[..., i : h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., j : w - k + 1 + j] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    g = gaussian_window()
    if min(a.shape[-2:]) < g.size:
        raise ValueError(f"ssim needs extents >= {g.size} after cropping, got {a.shape[-2]}x{a.shape[-1]}")
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, proto: EvalProtocol = EvalProtocol()) -> float:
    """Mean local SSIM (11x11 Gaussian, sigma 1.5), averaged over channels when luma is off."""
    a, b = prepare(a, b, proto)
    return float(np.mean(ssim_map(a, b, proto.peak)))


# ------------------------------------------------------------ difference map

_RAMP_T = np.array([0.0, 0.5, 1.0])
_RAMP_RGB = np.array([[0.0, 0.0, 0.55], [0.5, 0.5, 0.5], [0.55, 0.0, 0.0]])


def error_ramp(t) -> np.ndarray:
    """Map normalized error in [0, 1] to RGB: deep blue, through gray, to deep red."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(t, _RAMP_T, _RAMP_RGB[:, c]) for c in range(3)], axis=-1)


def difference_map(sr, hr) -> np.ndarray:
    """Per-pixel |luma error| on the blue-to-red ramp, normalized by the 99th percentile; (H, W, 3) uint8 RGB."""
    sr, hr = _chw(sr), _chw(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    err = np.abs(to_luma(sr) - to_luma(hr))[0]
    ref = float(np.percentile(err, 99))
    if ref <= 0.0:
        ref = float(err.max())
    t = err / ref if ref > 0.0 else np.zeros_like(err)
    return np.floor(error_ramp(t) * 255.0 + 0.5).astype(np.uint8)


def write_difference_map(path, sr, hr) -> None:
    rgb = difference_map(sr, hr)
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[:, :, ::-1])):
        raise IOError(f"{path}: failed to write difference map")


# ------------------------------------------------------------------- report


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def write_report(path, rows: Sequence[tuple[str, float, float]], proto: EvalProtocol | None = None) -> list[str]:
    """Tab-separated ``image psnr ssim`` rows plus a ``mean`` summary row."""
    lines = []
    if proto is not None:
        lines.append(f"# protocol: {proto.label()}")
    lines.append("image\tpsnr\tssim")
    for name, p, s in rows:
        lines.append(f"{name}\t{_fmt(p)}\t{s:.6f}")
    mp, ms = summarize(rows)
    lines.append(f"mean\t{_fmt(mp)}\t{ms:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
    return lines


def summarize(rows: Iterable[tuple[str, float, float]]) -> tuple[float, float]:
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to summarize")
    return float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))


def read_report(path) -> list[tuple[str, float, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("image\t"):
            continue
        name, p, s = line.split("\t")
        out.append((name, float(p), float(s)))
    return out

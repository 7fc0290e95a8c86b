"""Image I/O, bicubic degradation, aligned patch sampling and dihedral augmentation.

Images are float64 arrays laid out ``(3, H, W)`` with values in [0, 1] and
channels in red, green, blue order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
CUBIC_A = -0.5

# ---------------------------------------------------------------------- I/O


def _read_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:2] != b"P6":
        raise IOError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IOError(f"{path}: truncated PPM header")
        fields.append(blob[start:pos])
    pos += 1  # exactly one whitespace byte before the raster
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise IOError(f"{path}: malformed PPM header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise IOError(f"{path}: invalid PPM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    raster = blob[pos : pos + need]
    if len(raster) < need:
        raise IOError(f"{path}: truncated PPM raster ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def _read_png(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != PNG_SIGNATURE:
            raise IOError(f"{path}: not a PNG file")
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IOError(f"{path}: unreadable or truncated PNG")
    peak = 65535.0 if arr.dtype == np.uint16 else 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    arr = arr[:, :, ::-1]  # BGR -> RGB
    return arr.transpose(2, 0, 1).astype(np.float64) / peak


def load_image(path) -> np.ndarray:
    """Read an 8/16-bit PNG or binary PPM into a ``(3, H, W)`` array in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise IOError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _read_png(path)
    if suffix in (".ppm", ".pnm"):
        return _read_ppm(path)
    raise IOError(f"{path}: unsupported image format {suffix!r} (expected .png or .ppm)")


def quantize(img) -> np.ndarray:
    """Clip to [0, 1] and round half away from zero onto 8-bit codes, ``(H, W, 3)`` uint8."""
    arr = _as_chw(img)
    scaled = np.clip(arr, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(img, path) -> None:
    path = Path(path)
    codes = quantize(img)
    suffix = path.suffix.lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if suffix == ".png":
        if not cv2.imwrite(str(path), np.ascontiguousarray(codes[:, :, ::-1])):
            raise IOError(f"{path}: failed to write PNG")
    elif suffix in (".ppm", ".pnm"):
        h, w, _ = codes.shape
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + codes.tobytes())
    else:
        raise IOError(f"{path}: unsupported image format {suffix!r} (expected .png or .ppm)")


def _as_chw(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    return arr


# ------------------------------------------------------------------ bicubic


def cubic_kernel(x, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; W(0) = 1 and W(n) = 0 at other integers."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_weights(n_in: int, n_out: int, scale: Fraction, antialias: bool = True) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix with edge replication; rows sum to 1."""
    s = float(scale)
    widen = min(s, 1.0) if antialias else 1.0
    support = 2.0 / widen
    centers = (np.arange(n_out) + 0.5) / s - 0.5
    left = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * widen) * widen
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).reshape(-1)), w.reshape(-1))
    return mat


def bicubic_resize(img, scale_num: int, scale_den: int = 1, antialias: bool = True) -> np.ndarray:
    """Separable cubic-convolution resampling of the last two axes by ``scale_num / scale_den``.

    Output extents are ``ceil(n * scale)``.  Downscaling widens the kernel by
    ``1 / scale`` (area antialiasing) unless ``antialias`` is off.
    """
    if scale_num <= 0 or scale_den <= 0:
        raise ValueError(f"scale must be positive, got {scale_num}/{scale_den}")
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    scale = Fraction(scale_num, scale_den)
    h, w = arr.shape[-2:]
    oh, ow = math.ceil(h * scale), math.ceil(w * scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"bicubic_resize: output extent {oh}x{ow} from {h}x{w} at scale {scale}")
    rows = resize_weights(h, oh, scale, antialias)
    cols = resize_weights(w, ow, scale, antialias)
    return np.einsum("ih,...hw,jw->...ij", rows, arr, cols, optimize=True)


def mod_crop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % scale, : w - w % scale]


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic LR synthesis from an already mod-cropped HR image."""
    return bicubic_resize(hr, 1, scale)


# ------------------------------------------------------------- augmentation

AUG_CODES = tuple(f"rot{90 * k}{suffix}" for suffix in ("", "+flip") for k in range(4))


def _parse_code(code: str) -> tuple[int, bool]:
    if code not in AUG_CODES:
        raise ValueError(f"unknown augmentation code {code!r}; expected one of {AUG_CODES}")
    rot, _, flip = code.partition("+")
    return int(rot[3:]) // 90, bool(flip)


def augment_array(x: np.ndarray, code: str) -> np.ndarray:
    """Rotate counter-clockwise by k*90 degrees over the last two axes, then optionally flip horizontally."""
    k, flip = _parse_code(code)
    if k and x.shape[-1] != x.shape[-2]:
        raise ValueError(f"rotation {code!r} needs a square patch, got {x.shape[-2]}x{x.shape[-1]}")
    out = np.rot90(x, k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def invert_augment_array(x: np.ndarray, code: str) -> np.ndarray:
    k, flip = _parse_code(code)
    if flip:
        x = x[..., ::-1]
    return np.ascontiguousarray(np.rot90(x, -k, axes=(-2, -1)))


# ------------------------------------------------------------------ patches


@dataclass
class PatchPair:
    lr: np.ndarray  # (3, p, p)
    hr: np.ndarray  # (3, r*p, r*p)
    source: str
    lr_offset: tuple[int, int]
    hr_offset: tuple[int, int]
    code: str = "rot0"

    def provenance(self) -> str:
        return f"{self.source}@lr{self.lr_offset}/hr{self.hr_offset}:{self.code}"


def augment(pair: PatchPair, code: str) -> PatchPair:
    return PatchPair(
        augment_array(pair.lr, code), augment_array(pair.hr, code),
        pair.source, pair.lr_offset, pair.hr_offset, code,
    )


def invert_augment(pair: PatchPair) -> PatchPair:
    return PatchPair(
        invert_augment_array(pair.lr, pair.code), invert_augment_array(pair.hr, pair.code),
        pair.source, pair.lr_offset, pair.hr_offset, "rot0",
    )


@dataclass
class DatasetManifest:
    paths: list[str]
    scale: int
    patch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1 or self.patch_size < 1:
            raise ValueError(f"scale and patch_size must be >= 1, got {self.scale}, {self.patch_size}")


def read_manifest(path, scale: int, patch_size: int = 64, seed: int = 0) -> DatasetManifest:
    """One image path per line; ``#`` starts a comment; relative paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise IOError(f"{path}: manifest not found")
    paths = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            paths.append(str(p if p.is_absolute() else path.parent / p))
    if not paths:
        raise ValueError(f"{path}: manifest lists no images")
    return DatasetManifest(paths, scale, patch_size, seed)


def write_manifest(path, images: Sequence) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in images))


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IOError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pnm"))


@dataclass
class _Entry:
    source: str
    hr: np.ndarray
    lr: np.ndarray


@dataclass
class PatchSampler:
    """Degrade each HR image once, then draw scale-aligned LR/HR crops."""

    manifest: DatasetManifest
    augment: bool = True
    entries: list = field(init=False, repr=False)

    def __post_init__(self):
        r, p = self.manifest.scale, self.manifest.patch_size
        self.entries = []
        for src in self.manifest.paths:
            hr = mod_crop(load_image(src), r)
            if min(hr.shape[1:]) < p * r:
                warnings.warn(f"{src}: {hr.shape[1]}x{hr.shape[2]} is smaller than patch {p * r}, skipped")
                continue
            self.entries.append(_Entry(src, hr, degrade(hr, r)))
        if not self.entries:
            raise ValueError(f"no image in the manifest is at least {p * r} pixels per side")

    def sample(self, rng: np.random.Generator) -> PatchPair:
        r, p = self.manifest.scale, self.manifest.patch_size
        e = self.entries[int(rng.integers(len(self.entries)))]
        lh, lw = e.lr.shape[1:]
        i, j = int(rng.integers(lh - p + 1)), int(rng.integers(lw - p + 1))
        pair = PatchPair(
            e.lr[:, i : i + p, j : j + p].copy(),
            e.hr[:, r * i : r * (i + p), r * j : r * (j + p)].copy(),
            e.source, (i, j), (r * i, r * j),
        )
        assert pair.hr_offset == (r * pair.lr_offset[0], r * pair.lr_offset[1])
        if self.augment:
            pair = augment(pair, AUG_CODES[int(rng.integers(len(AUG_CODES)))])
        return pair

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, list[PatchPair]]:
        pairs = [self.sample(rng) for _ in range(size)]
        return np.stack([q.lr for q in pairs]), np.stack([q.hr for q in pairs]), pairs


def sample_patch(sampler: PatchSampler, rng: np.random.Generator) -> PatchPair:
    return sampler.sample(rng)


# ---------------------------------------------------------------- synthetic


def synthetic_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Deterministic test texture: smooth color gradients, oriented gratings and hard-edged shapes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.empty((3, height, width))
    for c in range(3):
        g = rng.uniform(0.2, 0.6) + rng.uniform(-0.25, 0.25) * xx + rng.uniform(-0.25, 0.25) * yy
        for _ in range(2):
            theta, freq = rng.uniform(0, np.pi), rng.uniform(2.0, 9.0)
            phase = rng.uniform(0, 2 * np.pi)
            g += rng.uniform(0.04, 0.12) * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img[c] = g
    for _ in range(int(rng.integers(3, 7))):
        cy, cx, rad = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.3)
        color = rng.uniform(0, 1, size=3)
        if rng.uniform() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        else:
            mask = (np.abs(yy - cy) < rad) & (np.abs(xx - cx) < rad * rng.uniform(0.3, 1.0))
        img[:, mask] = 0.5 * img[:, mask] + 0.5 * color[:, None]
    return np.clip(img, 0.0, 1.0)


def write_synthetic_set(directory, count: int, height: int, width: int, seed: int = 0) -> list[Path]:
    """Write ``count`` synthetic PNGs (quantized to 8 bits) and return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        p = directory / f"img{i:03d}.png"
        save_image(synthetic_image(rng, height, width), p)
        out.append(p)
    return out

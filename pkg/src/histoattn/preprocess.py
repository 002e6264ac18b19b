"""Image preprocessing: zero padding, median filtering, CLAHE, resizing,
seeded augmentation and [0, 1] normalisation.

Images are uint8 numpy arrays shaped (H, W) or (H, W, C) with C in {1, 3};
each function returns the same rank it was given.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .tensor import Tensor

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601
NBINS = 256


def _as_hwc(img) -> tuple[np.ndarray, bool]:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise DataError("pixel values must lie in 0..255")
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        return arr[:, :, None], True
    if arr.ndim == 3 and arr.shape[2] in (1, 3):
        return arr, False
    raise DataError(f"image must be (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")


def _restore(arr: np.ndarray, squeeze: bool) -> np.ndarray:
    return arr[:, :, 0] if squeeze else arr


def _round_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# individual stages
# ---------------------------------------------------------------------------

def zero_pad(img, pad: int) -> np.ndarray:
    if pad < 0:
        raise ConfigError("pad must be non-negative")
    arr, sq = _as_hwc(img)
    return _restore(np.pad(arr, ((pad, pad), (pad, pad), (0, 0))), sq)


def median_filter(img, k: int) -> np.ndarray:
    """k x k median per channel, borders handled by edge replication."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"median kernel must be a positive odd integer, got {k}")
    arr, sq = _as_hwc(img)
    r = k // 2
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
    win = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    flat = win.reshape(*win.shape[:3], k * k)
    mid = k * k // 2
    out = np.partition(flat, mid, axis=-1)[..., mid]
    return _restore(out.astype(np.uint8), sq)


def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip bins at ``limit`` and spread the excess evenly over all bins,
    repeating until less than one count overflows."""
    h = np.asarray(hist, dtype=np.float64).copy()
    while True:
        excess = np.maximum(h - limit, 0.0).sum()
        if excess < 1.0:
            return h
        h = np.minimum(h, limit) + excess / h.size


def tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def _interp_axis(n: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For each pixel index: lower/upper tile index and the upper weight."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, w


def _clahe_plane(ch: np.ndarray, tiles: tuple[int, int], clip_limit: float) -> np.ndarray:
    H, W = ch.shape
    rows, cols = tiles
    ys, xs = tile_edges(H, rows), tile_edges(W, cols)
    lo, hi = float(ch.min()), float(ch.max())
    luts = np.empty((rows, cols, NBINS))
    for i in range(rows):
        for j in range(cols):
            tile = ch[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            n = tile.size
            hist = clip_histogram(np.bincount(tile.ravel(), minlength=NBINS), clip_limit * n / NBINS)
            # map into the image's own grey range, so a flat image is a fixed point
            luts[i, j] = lo + np.cumsum(hist) * ((hi - lo) / n)
    r0, r1, wy = _interp_axis(H, ys)
    c0, c1, wx = _interp_axis(W, xs)
    v = ch.astype(np.intp)
    R0, R1 = r0[:, None], r1[:, None]
    C0, C1 = c0[None, :], c1[None, :]
    wy, wx = wy[:, None], wx[None, :]
    top = (1.0 - wx) * luts[R0, C0, v] + wx * luts[R0, C1, v]
    bot = (1.0 - wx) * luts[R1, C0, v] + wx * luts[R1, C1, v]
    return _round_u8((1.0 - wy) * top + wy * bot)


def clahe(img, tiles: tuple[int, int] = (8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation.

    Colour images are equalised on BT.601 luma only: the luma change is added
    back to every channel, which is the exact YCbCr round trip with the chroma
    planes held fixed.
    """
    if clip_limit <= 1.0:
        raise ConfigError(f"clip limit must exceed 1, got {clip_limit}")
    arr, sq = _as_hwc(img)
    H, W, C = arr.shape
    rows, cols = tiles
    if rows < 1 or cols < 1 or rows > H or cols > W:
        raise ConfigError(f"CLAHE grid {rows}x{cols} does not fit a {H}x{W} image")
    if C == 1:
        return _restore(_clahe_plane(arr[:, :, 0], (rows, cols), clip_limit)[:, :, None], sq)
    luma = _round_u8(arr.astype(np.float64) @ LUMA_WEIGHTS)
    delta = _clahe_plane(luma, (rows, cols), clip_limit).astype(np.int16) - luma
    return np.clip(arr.astype(np.int16) + delta[:, :, None], 0, 255).astype(np.uint8)


def _bilinear(arr: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) at clamped real coordinates (edge replication)."""
    H, W = arr.shape[:2]
    sy = np.clip(src_y, 0, H - 1)
    sx = np.clip(src_x, 0, W - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (sy - y0)[:, None, None]
    wx = (sx - x0)[None, :, None]
    a = arr.astype(np.float64)
    top = (1.0 - wx) * a[y0][:, x0] + wx * a[y0][:, x1]
    bot = (1.0 - wx) * a[y1][:, x0] + wx * a[y1][:, x1]
    return (1.0 - wy) * top + wy * bot


def resize(img, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres."""
    arr, sq = _as_hwc(img)
    H, W = arr.shape[:2]
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ConfigError(f"target size must be positive, got {size}")
    if (oh, ow) == (H, W):
        return _restore(arr.copy(), sq)
    src_y = (np.arange(oh) + 0.5) * (H / oh) - 0.5
    src_x = (np.arange(ow) + 0.5) * (W / ow) - 0.5
    return _restore(_round_u8(_bilinear(arr, src_y, src_x)), sq)


def normalize(img) -> Tensor:
    """uint8 image -> (C, H, W) tensor of pixel / 255."""
    arr, _ = _as_hwc(img)
    return Tensor(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

ALLOWED_ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: tuple[int, ...] = (0,)
    horizontal_flip: bool = False
    vertical_flip: bool = False
    zoom_range: tuple[float, float] = (1.0, 1.0)
    brightness_delta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation_degrees", tuple(int(r) for r in self.rotation_degrees))
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        self.validate()

    def validate(self) -> None:
        if not self.rotation_degrees or any(r not in ALLOWED_ROTATIONS for r in self.rotation_degrees):
            raise ConfigError(f"rotations must be drawn from {ALLOWED_ROTATIONS}")
        lo, hi = self.zoom_range
        if not 0.8 <= lo <= hi <= 1.2:
            raise ConfigError(f"zoom range must satisfy 0.8 <= lo <= hi <= 1.2, got {self.zoom_range}")
        if not 0.0 <= self.brightness_delta <= 0.2:
            raise ConfigError("brightness delta must lie in [0, 0.2]")

    @classmethod
    def standard(cls) -> "AugmentSpec":
        return cls(rotation_degrees=ALLOWED_ROTATIONS, horizontal_flip=True, vertical_flip=True,
                   zoom_range=(0.9, 1.1), brightness_delta=0.1)

    def is_identity(self) -> bool:
        return (self.rotation_degrees == (0,) and not self.horizontal_flip and not self.vertical_flip
                and self.zoom_range == (1.0, 1.0) and self.brightness_delta == 0.0)


def _zoom(arr: np.ndarray, z: float) -> np.ndarray:
    # z > 1 is a centre crop of extent H/z resized back to H; z < 1 zooms out
    # with edge replication.
    H, W = arr.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    src_y = cy + (np.arange(H) - cy) / z
    src_x = cx + (np.arange(W) - cx) / z
    return _round_u8(_bilinear(arr, src_y, src_x))


def augment(img, spec: AugmentSpec, seed: int) -> np.ndarray:
    """rotate -> flip -> zoom -> brightness, parameters drawn from ``seed``.

    All five random draws happen regardless of the spec so the stream of
    parameters for a given seed does not depend on which transforms are on.
    """
    arr, sq = _as_hwc(img)
    rng = np.random.default_rng(seed)
    rot = spec.rotation_degrees[int(rng.integers(len(spec.rotation_degrees)))]
    hflip = rng.random() < 0.5 and spec.horizontal_flip
    vflip = rng.random() < 0.5 and spec.vertical_flip
    zoom = rng.uniform(*spec.zoom_range)
    delta = rng.uniform(-spec.brightness_delta, spec.brightness_delta)

    H, W = arr.shape[:2]
    out = arr
    if rot:
        out = np.rot90(out, k=rot // 90, axes=(0, 1))
        if out.shape[:2] != (H, W):
            out = resize(out, (H, W))
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    if zoom != 1.0:
        out = _zoom(out, zoom)
    if delta != 0.0:
        out = _round_u8(out.astype(np.float64) + delta * 255.0)
    return _restore(np.ascontiguousarray(out), sq)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    pad: int = 2
    median_kernel: int = 3
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip_limit: float = 2.0
    target_size: tuple[int, int] = (96, 96)
    augment: AugmentSpec = field(default_factory=AugmentSpec.standard)
    seed: int = 0

    def __post_init__(self):
        self.clahe_tiles = tuple(self.clahe_tiles)
        self.target_size = tuple(self.target_size)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)
        self.validate()

    def validate(self) -> None:
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError("median_kernel must be a positive odd integer")
        if len(self.clahe_tiles) != 2 or min(self.clahe_tiles) < 1:
            raise ConfigError("clahe_tiles must be two positive integers")
        if self.clahe_clip_limit <= 1.0:
            raise ConfigError("clahe_clip_limit must exceed 1")
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ConfigError("target_size must be two positive integers")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clahe_tiles"] = list(self.clahe_tiles)
        d["target_size"] = list(self.target_size)
        d["augment"]["rotation_degrees"] = list(self.augment.rotation_degrees)
        d["augment"]["zoom_range"] = list(self.augment.zoom_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentSpec(**d["augment"])
        return cls(**d)


def prepare(img, cfg: PreprocessConfig) -> np.ndarray:
    """Deterministic stages: zero pad -> median -> CLAHE -> resize."""
    out = zero_pad(img, cfg.pad)
    out = median_filter(out, cfg.median_kernel)
    out = clahe(out, cfg.clahe_tiles, cfg.clahe_clip_limit)
    return resize(out, cfg.target_size)


def run_pipeline(img, cfg: PreprocessConfig, training: bool = False,
                 seed: Optional[int] = None) -> Tensor:
    out = prepare(img, cfg)
    if training:
        out = augment(out, cfg.augment, cfg.seed if seed is None else seed)
    return normalize(out)

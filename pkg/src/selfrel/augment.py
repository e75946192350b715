"""Multi-crop view generation with exact crop-geometry records.

Every view remembers which rectangle of the original image it shows (in
normalised ``[0, 1]`` coordinates) and whether it was mirrored, so that points
can be mapped between a view and the original image exactly.

Random streams are derived with :func:`derive_rng`: the root seed and each key
(epoch, image index, view index, ...) are folded together with the SplitMix64
finaliser, ``h = mix(h ^ key)``, and the result seeds a PCG64 generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import AugConfig
from .errors import RejectedInputError

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(root: int, *keys: int) -> int:
    h = _mix64(int(root) & _MASK64)
    for k in keys:
        h = _mix64(h ^ (int(k) & _MASK64))
    return h


def derive_rng(root: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *keys)))


@dataclass(frozen=True)
class CropGeometry:
    """Source rectangle ``(x0, y0, x1, y1)`` of a view, in normalised original-image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float
    hflip: bool
    out_size: int
    kind: str

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise RejectedInputError(f"invalid crop rectangle {self.rect}")

    @property
    def rect(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def to_view(self, x, y):
        """Original-image normalised point(s) to view normalised coordinates."""
        u = (np.asarray(x, dtype=np.float64) - self.x0) / (self.x1 - self.x0)
        v = (np.asarray(y, dtype=np.float64) - self.y0) / (self.y1 - self.y0)
        if self.hflip:
            u = 1.0 - u
        return u, v

    def to_original(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        if self.hflip:
            u = 1.0 - u
        return (self.x0 + u * (self.x1 - self.x0),
                self.y0 + np.asarray(v, dtype=np.float64) * (self.y1 - self.y0))


@dataclass
class ViewBatch:
    """All views of one image: two global views first, then the local ones."""

    views: list[np.ndarray]
    geometries: list[CropGeometry]

    @property
    def n_global(self) -> int:
        return sum(g.kind == "global" for g in self.geometries)

    @property
    def n_local(self) -> int:
        return sum(g.kind == "local" for g in self.geometries)


def _scale_range(cfg: AugConfig, kind: str) -> tuple[float, float]:
    if kind == "global":
        return cfg.global_scale_min, cfg.global_scale_max
    if kind == "local":
        return cfg.local_scale_min, cfg.local_scale_max
    raise RejectedInputError(f"unknown crop kind {kind!r}")


def sample_rect(height: int, width: int, kind: str, rng: np.random.Generator,
                cfg: AugConfig) -> tuple[float, float, float, float]:
    """Random rectangle with area ratio ~ U(range) and aspect ratio ~ U[min, max].

    Up to ten attempts; afterwards a centred square-ish crop of the largest
    admissible area is returned.
    """
    lo, hi = _scale_range(cfg, kind)
    for _ in range(10):
        ratio = rng.uniform(lo, hi)
        aspect = rng.uniform(cfg.min_aspect, cfg.max_aspect)
        w = math.sqrt(ratio * height * width * aspect) / width
        h = math.sqrt(ratio * height * width / aspect) / height
        if w <= 1.0 and h <= 1.0:
            x0 = rng.uniform(0.0, 1.0 - w)
            y0 = rng.uniform(0.0, 1.0 - h)
            return (x0, y0, x0 + w, y0 + h)
    ratio = min(hi, 1.0)
    side = math.sqrt(ratio)
    return (0.5 - side / 2, 0.5 - side / 2, 0.5 + side / 2, 0.5 + side / 2)


def _resample_matrix(n_out: int, n_in: int, lo: float, hi: float) -> np.ndarray:
    """1-D bilinear weights sampling output pixel centres of [lo, hi] from n_in pixels."""
    src = (lo + (np.arange(n_out) + 0.5) / n_out * (hi - lo)) * n_in - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def render_crop(image: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """Bilinear resize of the geometry's rectangle to ``out_size``, mirrored if flagged."""
    _, h, w = image.shape
    ry = _resample_matrix(geom.out_size, h, geom.y0, geom.y1)
    rx = _resample_matrix(geom.out_size, w, geom.x0, geom.x1)
    view = ry @ image.astype(np.float64) @ rx.T
    if geom.hflip:
        view = view[:, :, ::-1]
    return np.ascontiguousarray(view, dtype=image.dtype)


def _grayscale(img: np.ndarray) -> np.ndarray:
    return np.tensordot(np.array([0.299, 0.587, 0.114]), img, axes=1)


def photometric(view: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    """Colour jitter (p=0.8), grayscale (p=0.2) and Gaussian blur (p=0.5), each toggleable."""
    img = view.astype(np.float64)
    if cfg.color_jitter and rng.uniform() < 0.8:
        b, c, s = rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4), rng.uniform(0.8, 1.2)
        hue = rng.uniform(-0.1, 0.1) * 2 * math.pi
        img = img * b
        img = (img - _grayscale(img).mean()) * c + _grayscale(img).mean()
        gray = _grayscale(img)
        img = (img - gray) * s + gray
        # hue rotation about the grey axis
        k = np.ones(3) / math.sqrt(3)
        cos, sin = math.cos(hue), math.sin(hue)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        rot = cos * np.eye(3) + sin * kx + (1 - cos) * np.outer(k, k)
        img = np.tensordot(rot, img, axes=1)
        img = np.clip(img, 0.0, 1.0)
    if cfg.grayscale and rng.uniform() < 0.2:
        img = np.repeat(_grayscale(img)[None], 3, axis=0)
    if cfg.blur and rng.uniform() < 0.5:
        sigma = rng.uniform(0.1, 2.0) * view.shape[-1] / 64
        img = np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in img])
    return np.clip(img, 0.0, 1.0).astype(view.dtype)


def sample_crop(image: np.ndarray, kind: str, rng: np.random.Generator, cfg: AugConfig,
                patch_size: int = 1, photo_rng: np.random.Generator | None = None):
    """One augmented view and its geometry.

    The geometry is fixed before any photometric change; photometric draws use
    ``photo_rng`` (defaults to ``rng``) so toggling them never moves the crop.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise RejectedInputError(f"expected a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    if min(h, w) < patch_size:
        raise RejectedInputError(f"image side {min(h, w)} smaller than patch size {patch_size}")
    size = cfg.global_size if kind == "global" else cfg.local_size
    rect = sample_rect(h, w, kind, rng, cfg)
    flip = bool(rng.uniform() < cfg.flip_p)
    geom = CropGeometry(*rect, hflip=flip, out_size=size, kind=kind)
    view = render_crop(image, geom)
    view = photometric(view, photo_rng if photo_rng is not None else rng, cfg)
    return view, geom


def make_views(image: np.ndarray, cfg: AugConfig, seed: int, *keys: int,
               patch_size: int = 1) -> ViewBatch:
    """Two global and ``cfg.n_local`` local views; view ``j`` draws from ``derive_rng(seed, *keys, j, ...)``."""
    views, geoms = [], []
    kinds = ["global", "global"] + ["local"] * cfg.n_local
    for j, kind in enumerate(kinds):
        v, g = sample_crop(image, kind, derive_rng(seed, *keys, j, 0), cfg, patch_size,
                           photo_rng=derive_rng(seed, *keys, j, 1))
        views.append(v)
        geoms.append(g)
    return ViewBatch(views, geoms)

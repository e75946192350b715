"""Pixel- and channel-level feature self-relations, and region-aligned overlap sampling.

Features are token-major throughout: ``(..., N, C)`` with ``N = H * W`` pixels
in row-major order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .augment import CropGeometry
from .errors import ConfigError, RejectedInputError
from .numerics import Tensor

_TOL = 1e-9


@dataclass(frozen=True)
class OverlapRect:
    """Shared region of two views plus where it sits inside each view.

    ``view_rects[k]`` is in view ``k``'s normalised coordinates, with the
    horizontal flip already resolved (so ``u0 < u1`` always).
    """

    rect: tuple[float, float, float, float]
    view_rects: tuple[tuple[float, float, float, float], tuple[float, float, float, float]]
    geometries: tuple[CropGeometry, CropGeometry]
    grid: tuple[int, int]

    def lattice(self) -> np.ndarray:
        """Cell centres of the ``H_s x W_s`` lattice in original coordinates, row-major, ``(P, 2)``."""
        hs, ws = self.grid
        x0, y0, x1, y1 = self.rect
        xs = x0 + (np.arange(ws) + 0.5) / ws * (x1 - x0)
        ys = y0 + (np.arange(hs) + 0.5) / hs * (y1 - y0)
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)

    def view_coords(self, which: int, feat_hw: tuple[int, int]) -> np.ndarray:
        """Lattice points in view ``which``'s feature-grid index units, ``(P, 2)`` as (col, row)."""
        geom = self.geometries[which]
        u0, v0, u1, v1 = self.view_rects[which]
        if min(u0, v0) < -_TOL or max(u1, v1) > 1 + _TOL:
            raise RejectedInputError(f"overlap rectangle {self.view_rects[which]} leaves the view")
        pts = self.lattice()
        u, v = geom.to_view(pts[:, 0], pts[:, 1])
        h, w = feat_hw
        return np.stack([u * w - 0.5, v * h - 0.5], axis=-1)


def overlap_rect(g1: CropGeometry, g2: CropGeometry, grid: tuple[int, int] | int,
                 min_area: float = 0.01) -> OverlapRect | None:
    """Intersection of two crops; ``None`` when it covers less than ``min_area`` of the image."""
    if isinstance(grid, int):
        grid = (grid, grid)
    x0, y0 = max(g1.x0, g2.x0), max(g1.y0, g2.y0)
    x1, y1 = min(g1.x1, g2.x1), min(g1.y1, g2.y1)
    if x1 <= x0 or y1 <= y0 or (x1 - x0) * (y1 - y0) < min_area:
        return None
    view_rects = []
    for g in (g1, g2):
        ua, va = g.to_view(x0, y0)
        ub, vb = g.to_view(x1, y1)
        view_rects.append((float(min(ua, ub)), float(va), float(max(ua, ub)), float(vb)))
    return OverlapRect((x0, y0, x1, y1), tuple(view_rects), (g1, g2), tuple(grid))


def sample_overlap(tokens: Tensor, coords: np.ndarray, feat_hw: tuple[int, int]) -> Tensor:
    """Bilinear samples of token-major features at ``coords`` (see :meth:`OverlapRect.view_coords`).

    ``tokens`` is ``(..., H*W, C)``; ``coords`` is ``(..., P, 2)``. Returns ``(..., P, C)``.
    """
    h, w = feat_hw
    if tokens.shape[-2] != h * w:
        raise RejectedInputError(f"token count {tokens.shape[-2]} does not match grid {feat_hw}")
    return nx.grid_sample(tokens, coords, h, w)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., N, C)`` to ``(..., M, N, C/M)`` using contiguous channel blocks."""
    *lead, n, c = x.shape
    if c % heads:
        raise ConfigError(f"{c} channels cannot be split into {heads} heads")
    d = c // heads
    y = nx.reshape(x, (*lead, n, heads, d))
    k = len(lead)
    return nx.transpose(y, list(range(k)) + [k + 1, k, k + 2])


def pixel_self_relation(samples: Tensor, heads: int, temperature: float = 1.0) -> Tensor:
    """Row-stochastic ``(..., M, N, N)`` pixel relations, one per channel block.

    Per head: Gram matrix of pixel vectors, divided by ``sqrt(C/M)`` and by the
    temperature, then a row softmax.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    x = split_heads(samples, heads)
    d = x.shape[-1]
    gram = nx.matmul(x, nx.swap_last(x))
    return nx.softmax_rows(nx.scale(gram, 1.0 / math.sqrt(d)), temperature)


def channel_self_relation(feat: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-stochastic ``(..., C, C)`` channel relation; Gram over channels divided by pixel count."""
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    n = feat.shape[-2]
    xt = nx.swap_last(feat)
    gram = nx.matmul(xt, feat)
    return nx.softmax_rows(nx.scale(gram, 1.0 / n), temperature)

"""A small pre-norm vision transformer on top of :mod:`selfrel.numerics`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .augment import CropGeometry
from .config import ModelConfig
from .errors import RejectedInputError, TrainingStepError
from .numerics import Tensor

ViTConfig = ModelConfig


@dataclass
class FeatureGrid:
    """Encoder output for a batch of views.

    ``patch_features`` is token-major ``(B, H_f*W_f, C)``; use :meth:`chw` for
    the channel-first ``(B, C, H_f, W_f)`` layout.
    """

    patch_features: Tensor
    image_token: Tensor
    grid: tuple[int, int]
    geometries: list[CropGeometry] | None = None
    attentions: list[np.ndarray] = field(default_factory=list)

    def chw(self) -> np.ndarray:
        b, n, c = self.patch_features.shape
        return self.patch_features.data.reshape(b, *self.grid, c).transpose(0, 3, 1, 2)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    c = cfg.embed_dim
    g = cfg.image_size // cfg.patch_size
    hidden = c * cfg.mlp_ratio
    p_in = 3 * cfg.patch_size ** 2
    arrays: dict[str, np.ndarray] = {
        "encoder.patch_embed.weight": trunc_normal(rng, (p_in, c)),
        "encoder.patch_embed.bias": np.zeros(c),
        "encoder.cls_token": trunc_normal(rng, (c,)),
    }
    if cfg.use_pos_embed:
        arrays["encoder.pos_embed"] = trunc_normal(rng, (1 + g * g, c))
    for i in range(cfg.depth):
        b = f"encoder.blocks.{i}."
        arrays.update({
            b + "norm1.weight": np.ones(c), b + "norm1.bias": np.zeros(c),
            b + "attn.qkv.weight": trunc_normal(rng, (c, 3 * c)), b + "attn.qkv.bias": np.zeros(3 * c),
            b + "attn.proj.weight": trunc_normal(rng, (c, c)), b + "attn.proj.bias": np.zeros(c),
            b + "norm2.weight": np.ones(c), b + "norm2.bias": np.zeros(c),
            b + "mlp.fc1.weight": trunc_normal(rng, (c, hidden)), b + "mlp.fc1.bias": np.zeros(hidden),
            b + "mlp.fc2.weight": trunc_normal(rng, (hidden, c)), b + "mlp.fc2.bias": np.zeros(c),
        })
    arrays["encoder.norm.weight"] = np.ones(c)
    arrays["encoder.norm.bias"] = np.zeros(c)
    return {k: Tensor(v.astype(dtype), name=k) for k, v in arrays.items()}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, 3, S, S)`` to ``(B, (S/p)^2, 3*p*p)`` with row-major patches, each flattened (c, y, x)."""
    b, ch, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, ch, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, ch * patch * patch)


def pos_interp_matrix(src: int, dst: int) -> np.ndarray:
    """Bilinear (half-pixel aligned) resampling of a ``src x src`` grid to ``dst x dst``, as ``(dst^2, src^2)``."""
    c = (np.arange(dst) + 0.5) * src / dst - 0.5
    gx, gy = np.meshgrid(c, c)
    return nx.bilinear_matrix(np.stack([gx.ravel(), gy.ravel()], -1), src, src)


def patch_embed(images: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Token sequence ``(B, 1 + G*G, C)``: image-level token followed by patch tokens."""
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != images.shape[3]:
        raise RejectedInputError(f"expected (B, 3, S, S) images, got {images.shape}")
    s = images.shape[-1]
    if s % cfg.patch_size:
        raise RejectedInputError(f"image side {s} not divisible by patch size {cfg.patch_size}")
    w = params["encoder.patch_embed.weight"]
    b = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch_size).astype(w.dtype, copy=False))
    x = nx.add(nx.matmul(patches, w), params["encoder.patch_embed.bias"])
    cls = nx.tile_leading(nx.reshape(params["encoder.cls_token"], (1, -1)), b)
    x = nx.concatenate([cls, x], axis=1)
    if cfg.use_pos_embed:
        pos = params["encoder.pos_embed"]
        g_src = cfg.image_size // cfg.patch_size
        g = s // cfg.patch_size
        if g != g_src:
            m = Tensor(pos_interp_matrix(g_src, g).astype(pos.dtype))
            pos = nx.concatenate([pos[0:1], nx.matmul(m, pos[1:])], axis=0)
        x = nx.add(x, pos)
    return x


def _attention(x: Tensor, params, prefix: str, heads: int, keep: list | None) -> Tensor:
    b, n, c = x.shape
    d = c // heads
    qkv = nx.add(nx.matmul(x, params[prefix + "qkv.weight"]), params[prefix + "qkv.bias"])
    qkv = nx.transpose(nx.reshape(qkv, (b, n, 3, heads, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(d))
    attn = nx.softmax_rows(scores)
    if keep is not None:
        keep.append(attn.data)
    out = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, n, c))
    return nx.add(nx.matmul(out, params[prefix + "proj.weight"]), params[prefix + "proj.bias"])


def encode(images: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig,
           geometries: list[CropGeometry] | None = None, keep_attention: bool = False) -> FeatureGrid:
    """Run the transformer; returns final-normalised patch tokens and the image-level token."""
    x = patch_embed(images, params, cfg)
    keep = [] if keep_attention else None
    for i in range(cfg.depth):
        p = f"encoder.blocks.{i}."
        h = nx.layer_norm(x, params[p + "norm1.weight"], params[p + "norm1.bias"])
        x = nx.add(x, _attention(h, params, p + "attn.", cfg.heads, keep))
        h = nx.layer_norm(x, params[p + "norm2.weight"], params[p + "norm2.bias"])
        h = nx.gelu(nx.add(nx.matmul(h, params[p + "mlp.fc1.weight"]), params[p + "mlp.fc1.bias"]))
        x = nx.add(x, nx.add(nx.matmul(h, params[p + "mlp.fc2.weight"]), params[p + "mlp.fc2.bias"]))
    x = nx.layer_norm(x, params["encoder.norm.weight"], params["encoder.norm.bias"])
    if not np.isfinite(x.data).all():
        raise TrainingStepError("non-finite encoder activations")
    g = images.shape[-1] // cfg.patch_size
    return FeatureGrid(x[:, 1:], x[:, 0], (g, g), geometries, keep or [])

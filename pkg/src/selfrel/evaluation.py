"""Evaluation: cross-view relation differences, linear probe, heatmaps, ablations.

Every routine here reads model parameters without modifying them and never
records gradients; :func:`param_digest` is used to check that.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import numerics as nx
from .augment import derive_rng, sample_crop
from .config import TrainConfig
from .errors import ConfigError, RejectedInputError
from .numerics import Tensor
from .relation import channel_self_relation, overlap_rect, pixel_self_relation, sample_overlap
from .vit import encode

_PAIR_KEY = 0xD1FF
_PROBE_KEY = 0x960B
_MAX_RESAMPLE = 100
_CHUNK = 64


def param_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def encode_frozen(images: np.ndarray, params: dict[str, Tensor], cfg: TrainConfig):
    """Patch tokens ``(B, N, C)``, image tokens ``(B, C)`` and the grid, in chunks, untracked."""
    if images.shape[0] == 0:
        raise RejectedInputError("no images to encode")
    dtype = params["encoder.patch_embed.weight"].dtype
    toks, cls = [], []
    grid = None
    for i in range(0, images.shape[0], _CHUNK):
        fg = encode(images[i:i + _CHUNK].astype(dtype, copy=False), params, cfg.model)
        toks.append(fg.patch_features.data)
        cls.append(fg.image_token.data)
        grid = fg.grid
    return np.concatenate(toks), np.concatenate(cls), grid


# --------------------------------------------------------------------------
# cross-view relation difference
# --------------------------------------------------------------------------


@dataclass
class RelationDiffReport:
    pixel_diff: float
    channel_diff: float
    pair_count: int
    config_digest: str

    def to_text(self) -> str:
        return (f"pixel_diff = {self.pixel_diff:.9g}\nchannel_diff = {self.channel_diff:.9g}\n"
                f"pair_count = {self.pair_count}\nconfig_digest = {self.config_digest}\n")


def sample_view_pairs(images: np.ndarray, cfg: TrainConfig, n_pairs: int, seed: int):
    """Two global views for each of ``n_pairs`` images (cycled), redrawn until they overlap.

    Returns stacked views ``(2, n_pairs, 3, S, S)``, the geometries and the overlaps.
    """
    if images.shape[0] == 0:
        raise RejectedInputError("dataset is empty")
    if n_pairs <= 0:
        raise RejectedInputError("n_pairs must be positive")
    grid = cfg.relation.grid_global
    views = [[], []]
    overlaps = []
    for k in range(n_pairs):
        img = images[k % images.shape[0]]
        for attempt in range(_MAX_RESAMPLE):
            drawn = [sample_crop(img, "global", derive_rng(seed, _PAIR_KEY, k, attempt, j, 0), cfg.aug,
                                 cfg.model.patch_size,
                                 photo_rng=derive_rng(seed, _PAIR_KEY, k, attempt, j, 1))
                     for j in (0, 1)]
            ov = overlap_rect(drawn[0][1], drawn[1][1], grid, cfg.relation.min_overlap)
            if ov is not None:
                break
        else:
            raise RejectedInputError(f"no overlapping view pair found for image {k}")
        for j in (0, 1):
            views[j].append(drawn[j][0])
        overlaps.append(ov)
    return np.stack([np.stack(v) for v in views]), overlaps


def relation_difference(params: dict[str, Tensor], images: np.ndarray, cfg: TrainConfig,
                        n_pairs: int | None = None, seed: int | None = None) -> RelationDiffReport:
    """Mean absolute difference of self-relations between two global views of the same image.

    Pixel relations (``relation.heads`` heads, temperature 1) are computed on the
    region both views share, sampled on the global lattice; channel relations
    (temperature 1) use each full view. Features are the encoder's final
    patch tokens.
    """
    n_pairs = cfg.eval.n_pairs if n_pairs is None else n_pairs
    seed = cfg.eval.seed if seed is None else seed
    before = param_digest(params)
    views, overlaps = sample_view_pairs(images, cfg, n_pairs, seed)
    feats = []
    for j in (0, 1):
        tok, _, hw = encode_frozen(views[j], params, cfg)
        feats.append((tok, hw))
    pix, chan = [], []
    for k, ov in enumerate(overlaps):
        rel_p, rel_c = [], []
        for j in (0, 1):
            tok, hw = feats[j]
            s = sample_overlap(Tensor(tok[k]), ov.view_coords(j, hw), hw)
            rel_p.append(pixel_self_relation(s, cfg.relation.heads, 1.0).data)
            rel_c.append(channel_self_relation(Tensor(tok[k]), 1.0).data)
        pix.append(float(np.abs(rel_p[0] - rel_p[1]).mean()))
        chan.append(float(np.abs(rel_c[0] - rel_c[1]).mean()))
    if param_digest(params) != before:
        raise AssertionError("evaluation modified model parameters")
    return RelationDiffReport(float(np.mean(pix)), float(np.mean(chan)), n_pairs, cfg.digest())


# --------------------------------------------------------------------------
# linear probe
# --------------------------------------------------------------------------


def _check_labels(images: np.ndarray, labels: np.ndarray | None, what: str) -> np.ndarray:
    if labels is None:
        raise RejectedInputError(f"{what} split has no labels")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise RejectedInputError(f"{what}: {images.shape[0]} images but {labels.shape} labels")
    if labels.size and labels.min() < 0:
        raise RejectedInputError(f"{what}: negative label")
    return labels.astype(np.int64)


def linear_probe(params: dict[str, Tensor], cfg: TrainConfig,
                 train_images: np.ndarray, train_labels: np.ndarray,
                 val_images: np.ndarray, val_labels: np.ndarray,
                 seed: int | None = None) -> float:
    """Top-1 validation accuracy of a linear classifier on frozen image-level tokens.

    Trained with AdamW (no weight decay), cosine learning rate from
    ``eval.probe_lr`` to 0, ``eval.probe_epochs`` epochs, no augmentation.
    """
    ytr = _check_labels(train_images, train_labels, "train")
    yva = _check_labels(val_images, val_labels, "val")
    if ytr.size == 0 or yva.size == 0:
        raise RejectedInputError("linear probe needs non-empty train and val splits")
    n_cls = int(max(ytr.max(), yva.max())) + 1
    if n_cls == 1:
        return 1.0
    before = param_digest(params)
    _, ftr, _ = encode_frozen(train_images, params, cfg)
    _, fva, _ = encode_frozen(val_images, params, cfg)
    if param_digest(params) != before:
        raise AssertionError("evaluation modified model parameters")
    ftr = ftr.astype(np.float64)
    fva = fva.astype(np.float64)
    seed = cfg.eval.seed if seed is None else seed
    ec = cfg.eval
    rng = derive_rng(seed, _PROBE_KEY)
    w = Tensor(rng.normal(0.0, 0.01, (ftr.shape[1], n_cls)), requires_grad=True, name="probe.weight")
    b = Tensor(np.zeros(n_cls), requires_grad=True, name="probe.bias")
    probe = {"probe.weight": w, "probe.bias": b}
    opt = nx.AdamW(probe, no_decay=set(probe))
    bs = min(ec.probe_batch, ftr.shape[0])
    spe = max(1, ftr.shape[0] // bs)
    total = ec.probe_epochs * spe
    onehot = np.eye(n_cls)[ytr]
    step = 0
    for epoch in range(ec.probe_epochs):
        order = derive_rng(seed, _PROBE_KEY, epoch).permutation(ftr.shape[0])
        for k in range(spe):
            idx = order[k * bs:(k + 1) * bs]
            opt.zero_grad()
            with nx.Tape() as tape:
                logits = nx.add(nx.matmul(Tensor(ftr[idx]), w), b)
                loss = nx.cross_entropy_log_rows(onehot[idx], nx.log_softmax_rows(logits))
            nx.backward(loss, tape)
            lr = 0.5 * ec.probe_lr * (1.0 + math.cos(math.pi * step / total))
            opt.step(lr, 0.0)
            step += 1
    pred = np.argmax(fva @ w.data + b.data, axis=1)
    return float(np.mean(pred == yva))


# --------------------------------------------------------------------------
# heatmaps
# --------------------------------------------------------------------------

# Colour map anchors, evenly spaced over [0, 1] and linearly interpolated:
# black, dark blue, magenta, orange, pale yellow.
COLORMAP_ANCHORS = np.array([
    [0, 0, 0],
    [32, 24, 140],
    [190, 40, 140],
    [250, 140, 30],
    [252, 252, 190],
], dtype=np.float64)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in ``[0, 1]`` to uint8 RGB with the fixed anchor colour map."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(COLORMAP_ANCHORS) - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), len(COLORMAP_ANCHORS) - 2)
    f = (pos - i0)[..., None]
    rgb = COLORMAP_ANCHORS[i0] * (1 - f) + COLORMAP_ANCHORS[i0 + 1] * f
    return np.round(rgb).astype(np.uint8)


def render_heatmap(grid: np.ndarray, cell_px: int = 16) -> np.ndarray:
    """Min-max normalise ``grid`` (constant grids map to 0) and expand each cell to ``cell_px`` pixels."""
    lo, hi = float(grid.min()), float(grid.max())
    norm = np.zeros_like(grid, dtype=np.float64) if hi - lo <= 0 else (grid - lo) / (hi - lo)
    rgb = colormap(norm)
    return np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)


def relation_matrices(params: dict[str, Tensor], image: np.ndarray, cfg: TrainConfig):
    """Head-averaged pixel relation ``(N, N)``, channel relation ``(C, C)`` and grid of one image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise RejectedInputError(f"expected a 3 x H x W image, got {image.shape}")
    tok, _, hw = encode_frozen(image[None], params, cfg)
    feat = Tensor(tok[0])
    pix = pixel_self_relation(feat, cfg.relation.heads, 1.0).data.mean(axis=0)
    chan = channel_self_relation(feat, 1.0).data
    return pix, chan, hw


def export_relation_heatmap(params: dict[str, Tensor], image: np.ndarray, cfg: TrainConfig,
                            kind: str, query, path: str | Path, cell_px: int = 16) -> np.ndarray:
    """Write a PNG heatmap of one relation and return the plotted value grid.

    ``kind="pixel"``: ``query`` is a pixel index ``i``; the image shows row ``i``
    of the head-averaged pixel relation laid out on the feature grid, so cell
    ``i`` holds entry ``(i, i)``. ``kind="channel"``: ``query`` is a channel pair
    ``(a, b)`` which must be in range; the full ``C x C`` matrix is drawn.
    """
    pix, chan, (h, w) = relation_matrices(params, image, cfg)
    if kind == "pixel":
        q = int(query)
        if not 0 <= q < h * w:
            raise RejectedInputError(f"pixel query {q} outside [0, {h * w})")
        grid = pix[q].reshape(h, w)
    elif kind == "channel":
        a, b = (int(v) for v in query)
        c = chan.shape[0]
        if not (0 <= a < c and 0 <= b < c):
            raise RejectedInputError(f"channel query ({a}, {b}) outside [0, {c})")
        grid = chan
    else:
        raise RejectedInputError(f"unknown heatmap kind {kind!r}")
    path = Path(path)
    if not path.parent.is_dir():
        raise RejectedInputError(f"cannot write heatmap: directory {path.parent} does not exist")
    try:
        Image.fromarray(render_heatmap(grid, cell_px), mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise RejectedInputError(f"cannot write heatmap to {path}: {e}") from None
    return grid


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

HEAD_GRID = (1, 3, 6, 12, 16)
TEMPERATURE_GRID = ((0.5, 0.5), (0.5, 0.1), (0.5, 0.01), (1.0, 0.1), (0.1, 0.1))

_LOSS_AXES = {"image": "losses.enable_image", "pixel": "losses.enable_pixel",
              "channel": "losses.enable_channel"}
AXES = ("M", "t_p", "t_c", "temps", "asymmetric", *_LOSS_AXES)

_BOOL_WORDS = {"on": True, "true": True, "1": True, "off": False, "false": False, "0": False}


def _positive(axis: str, text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"axis {axis}: {text!r} is not a number") from None
    if not v > 0 or not math.isfinite(v):
        raise ConfigError(f"axis {axis}: temperature {text!r} must be positive")
    return v


def axis_overrides(axis: str, value: str) -> dict[str, object]:
    """Config keys set by one axis value (``M=6``, ``temps=0.5:0.1``, ``asymmetric=off``, ...)."""
    value = str(value).strip()
    if axis == "M":
        try:
            m = int(value)
        except ValueError:
            raise ConfigError(f"axis M: {value!r} is not an integer") from None
        if m not in HEAD_GRID:
            raise ConfigError(f"axis M: {m} not in {HEAD_GRID}")
        return {"relation.heads": m}
    if axis in ("t_p", "t_c"):
        return {f"relation.{axis}": _positive(axis, value)}
    if axis == "temps":
        parts = value.split(":")
        if len(parts) != 2:
            raise ConfigError(f"axis temps: expected t_p:t_c, got {value!r}")
        return {"relation.t_p": _positive(axis, parts[0]), "relation.t_c": _positive(axis, parts[1])}
    if axis == "asymmetric" or axis in _LOSS_AXES:
        if value.lower() not in _BOOL_WORDS:
            raise ConfigError(f"axis {axis}: expected on/off, got {value!r}")
        key = "heads.asymmetric" if axis == "asymmetric" else _LOSS_AXES[axis]
        return {key: _BOOL_WORDS[value.lower()]}
    raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {', '.join(AXES)}")


def default_axis_values(axis: str) -> list[str]:
    if axis == "M":
        return [str(m) for m in HEAD_GRID]
    if axis == "temps":
        return [f"{tp}:{tc}" for tp, tc in TEMPERATURE_GRID]
    if axis in ("asymmetric", *_LOSS_AXES):
        return ["on", "off"]
    raise ConfigError(f"axis {axis!r} needs explicit values")


def parse_axis(spec: str) -> tuple[str, list[str]]:
    """``"M=1,3,6"`` -> ``("M", ["1", "3", "6"])``; a bare name uses the standard grid."""
    name, sep, vals = spec.partition("=")
    name = name.strip()
    values = [v.strip() for v in vals.split(",") if v.strip()] if sep else default_axis_values(name)
    if not values:
        raise ConfigError(f"axis {name!r} has no values")
    for v in values:
        axis_overrides(name, v)
    return name, values


@dataclass
class AblationCell:
    axis: str
    value: str
    config: TrainConfig


def ablation_cells(base_cfg: TrainConfig, axes: Sequence[tuple[str, Sequence[str]]]) -> list[AblationCell]:
    """One cell per axis value, each changing only that axis from ``base_cfg``; no axes gives the default."""
    cells = []
    for axis, values in axes:
        for v in values:
            cfg = base_cfg.copy()
            for k, val in axis_overrides(axis, v).items():
                cfg.set(k, val)
            cfg.validate()
            cells.append(AblationCell(axis, str(v), cfg))
    if not cells:
        cells.append(AblationCell("default", "-", base_cfg.copy()))
    return cells


@dataclass
class CellResult:
    pixel_diff: list[float]
    channel_diff: list[float]
    probe: list[float]


TABLE_COLUMNS = ("axis", "value", "config_digest", "seeds", "pixel_diff_mean", "pixel_diff_std",
                 "channel_diff_mean", "channel_diff_std", "probe_mean", "probe_std")


def _fmt_stats(xs: list[float]) -> list[str]:
    if not xs or any(math.isnan(x) for x in xs):
        return ["nan", "nan"]
    return [f"{np.mean(xs):.6f}", f"{np.std(xs):.6f}"]


def ablation_suite(base_cfg: TrainConfig, axes: Sequence[tuple[str, Sequence[str]]],
                   seeds: Sequence[int],
                   run_cell: Callable[[TrainConfig], tuple[float, float, float]]) -> tuple[list[str], str]:
    """Run every cell for every seed and return the rows and the tab-separated table.

    ``run_cell(cfg)`` trains and evaluates one configuration (with
    ``cfg.train.seed`` already set) and returns ``(pixel_diff, channel_diff,
    probe_accuracy)``. Identical configurations are run once and shared.
    """
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    cells = ablation_cells(base_cfg, axes)
    cache: dict[str, tuple[float, float, float]] = {}
    rows = ["\t".join(TABLE_COLUMNS)]
    for cell in cells:
        res = CellResult([], [], [])
        for s in seeds:
            cfg = cell.config.copy()
            cfg.train.seed = int(s)
            key = cfg.digest()
            if key not in cache:
                cache[key] = run_cell(cfg)
            p, c, acc = cache[key]
            res.pixel_diff.append(p)
            res.channel_diff.append(c)
            res.probe.append(acc)
        digest = cell.config.digest()
        rows.append("\t".join([cell.axis, cell.value, digest, ",".join(str(s) for s in seeds),
                               *_fmt_stats(res.pixel_diff), *_fmt_stats(res.channel_diff),
                               *_fmt_stats(res.probe)]))
    return rows, "\n".join(rows) + "\n"


def cell_id(cfg: TrainConfig) -> str:
    return cfg.digest()[:16]


__all__ = [
    "AXES", "COLORMAP_ANCHORS", "HEAD_GRID", "TEMPERATURE_GRID", "RelationDiffReport",
    "ablation_cells", "ablation_suite", "axis_overrides", "colormap", "export_relation_heatmap",
    "linear_probe", "param_digest", "parse_axis", "relation_difference", "relation_matrices",
    "render_heatmap", "sample_view_pairs",
]

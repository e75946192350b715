"""Image loading, dataset manifests and the synthetic-shapes generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import container
from .augment import derive_rng
from .errors import ConfigError, DecodeError, RejectedInputError

MANIFEST_NAME = "manifest.txt"
SHAPE_KINDS = ("circle", "square", "triangle", "diamond", "ring", "cross", "star", "hexagon")


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG (or an SRLA container holding ``image``) to float32 ``3 x H x W`` in [0, 1]."""
    path = Path(path)
    try:
        head = path.read_bytes()[:4]
    except OSError as e:
        raise DecodeError(f"{path}: {e.strerror}") from None
    if head == container.ARRAY_MAGIC:
        try:
            arrays, _ = container.load(path, container.ARRAY_MAGIC)
        except Exception as e:
            raise DecodeError(f"{path}: {e}") from None
        if "image" not in arrays or arrays["image"].ndim != 3:
            raise DecodeError(f"{path}: container has no 3-d 'image' array")
        return arrays["image"]
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "1"):
                arr = np.asarray(im.convert("L"))[..., None].repeat(3, axis=-1)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeError(f"{path}: {e}") from None
    return (arr.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write a ``3 x H x W`` [0, 1] image as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False)


def save_raw(path: str | Path, image: np.ndarray) -> None:
    container.save(path, {"image": np.asarray(image)}, magic=container.ARRAY_MAGIC)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int | None, str]] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[str, int | None]]:
        return [(p, lab) for p, lab, s in self.entries if s == name]

    def write(self) -> Path:
        path = self.root / MANIFEST_NAME
        lines = []
        for p, lab, s in self.entries:
            lines.append(f"{p} {'-' if lab is None else lab} {s}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        """Parse ``root/manifest.txt``: ``relative_path [label|-] [split]`` per line."""
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise RejectedInputError(f"no dataset manifest at {path}")
        entries = []
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            if len(parts) > 3:
                raise RejectedInputError(f"{path}:{lineno}: too many fields")
            rel = parts[0]
            label = None if len(parts) < 2 or parts[1] == "-" else int(parts[1])
            split = parts[2] if len(parts) > 2 else "train"
            entries.append((rel, label, split))
        man = cls(root, entries)
        man.check()
        return man

    def check(self) -> None:
        labels = sorted({lab for _, lab, _ in self.entries if lab is not None})
        if labels and labels != list(range(len(labels))):
            raise RejectedInputError("labels must form a contiguous 0..K-1 range")
        for rel, _, _ in self.entries:
            if not (self.root / rel).is_file():
                raise RejectedInputError(f"manifest entry missing on disk: {rel}")


def load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray | None]:
    items = manifest.split(split)
    if not items:
        return np.zeros((0, 3, 1, 1), np.float32), None
    images = np.stack([load_image(manifest.root / p) for p, _ in items])
    labels = None
    if all(lab is not None for _, lab in items):
        labels = np.array([lab for _, lab in items], dtype=np.int64)
    return images, labels


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------


@dataclass
class SyntheticShapesSpec:
    image_size: int = 64
    classes: int = 8
    per_class_train: int = 256
    per_class_val: int = 64
    dominant_scale: tuple[float, float] = (0.22, 0.34)
    distractor_scale: tuple[float, float] = (0.07, 0.13)
    hue_jitter: float = 0.05
    seed: int = 0

    def class_definition(self, label: int) -> tuple[str, float, tuple[float, float]]:
        """``(shape kind, centre hue of the colour family, dominant scale range)`` of one class."""
        return (SHAPE_KINDS[label % len(SHAPE_KINDS)], (label / self.classes) % 1.0, self.dominant_scale)


def _shape_mask(kind: str, x: np.ndarray, y: np.ndarray, r: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    u = (c * x + s * y) / r
    v = (-s * x + c * y) / r
    rad = np.hypot(u, v)
    ang = np.arctan2(v, u)
    if kind == "circle":
        return rad <= 1.0
    if kind == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8
    if kind == "diamond":
        return abs(u) + abs(v) <= 1.0
    if kind == "ring":
        return (rad <= 1.0) & (rad >= 0.6)
    if kind == "cross":
        return ((abs(u) <= 0.3) & (abs(v) <= 1.0)) | ((abs(v) <= 0.3) & (abs(u) <= 1.0))
    if kind == "triangle":
        return (v >= -0.5) & (v <= 1.0 - math.sqrt(3) * abs(u))
    if kind == "star":
        k = np.cos(5 * ang)
        return rad <= 0.55 + 0.45 * (k + 1) / 2
    if kind == "hexagon":
        seg = np.mod(ang, math.pi / 3) - math.pi / 6
        return rad * np.cos(seg) <= 0.87
    raise ConfigError(f"unknown shape kind {kind}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def render_image(spec: SyntheticShapesSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """Render one image whose largest shape is the class's shape kind, drawn in its colour family."""
    n = spec.image_size
    ss = 4
    t = (np.arange(n * ss) + 0.5) / (n * ss)
    gx, gy = np.meshgrid(t, t)

    # smooth textured background: two-tone gradient plus faint stripes
    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    d = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(d) * (gx - 0.5) + math.sin(d) * (gy - 0.5)) + 0.5
    freq = rng.uniform(4, 10)
    stripes = 0.06 * np.sin(2 * math.pi * freq * (gx * math.cos(d + 1) + gy * math.sin(d + 1)))
    img = (c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp) + stripes

    kind, family_hue, scale = spec.class_definition(label)
    others = [k for k in SHAPE_KINDS if k != kind]
    shapes = []
    for _ in range(int(rng.integers(0, 3))):
        shapes.append((others[int(rng.integers(len(others)))], rng.uniform(*spec.distractor_scale),
                       rng.uniform(0, 1)))
    shapes.append((kind, rng.uniform(*scale), family_hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter)))
    for sk, r, hue in shapes:
        cx, cy = rng.uniform(r, 1 - r, 2)
        color = _hsv_to_rgb(hue % 1.0, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))
        mask = _shape_mask(sk, gx - cx, gy - cy, r, rng.uniform(0, 2 * math.pi))
        img = np.where(mask[None], color[:, None, None], img)

    img = img.reshape(3, n, ss, n, ss).mean(axis=(2, 4))
    img += rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticShapesSpec, root: str | Path) -> DatasetManifest:
    """Render the dataset as PNGs under ``root`` and write its manifest."""
    if spec.classes <= 0:
        raise ConfigError("synthetic dataset needs at least one class")
    root = Path(root)
    entries = []
    for split, per_class, tag in (("train", spec.per_class_train, 0), ("val", spec.per_class_val, 1)):
        (root / split).mkdir(parents=True, exist_ok=True)
        idx = 0
        for i in range(per_class):
            for label in range(spec.classes):
                rng = derive_rng(spec.seed, tag, label, i)
                img = render_image(spec, label, rng)
                rel = f"{split}/{idx:06d}.png"
                save_png(root / rel, img)
                entries.append((rel, label, split))
                idx += 1
    man = DatasetManifest(root, entries)
    man.write()
    return man

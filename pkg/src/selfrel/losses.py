"""Image-level, pixel-relation and channel-relation losses, and the multi-crop pairing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import LossConfig
from .errors import ConfigError
from .numerics import Tensor
from .relation import OverlapRect, channel_self_relation, pixel_self_relation, sample_overlap


@dataclass(frozen=True)
class ViewPair:
    student: int
    teacher: int
    kind: str


def pair_schedule(n_global: int = 2, n_local: int = 0) -> list[ViewPair]:
    """Both global-global directions, then every local view against every global view.

    Views are indexed globals first. Teachers are always global; local views
    are never paired with each other.
    """
    pairs = [ViewPair(s, t, "global-global")
             for t in range(n_global) for s in range(n_global) if s != t]
    pairs += [ViewPair(n_global + j, t, "local-global")
              for j in range(n_local) for t in range(n_global)]
    return pairs


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def pixel_loss(student_tokens: Tensor, teacher_tokens: Tensor, overlaps: list[OverlapRect | None],
               student_hw: tuple[int, int], teacher_hw: tuple[int, int], heads: int,
               t_p: float) -> tuple[Tensor, np.ndarray]:
    """Cross-entropy between teacher and student pixel relations on each image's overlap.

    ``student_tokens`` are the predicted (or, symmetric variant, projected)
    student features and ``teacher_tokens`` the projected teacher features,
    both ``(B, N, C)``. ``overlaps[i]`` is built from (student geometry, teacher
    geometry) of image ``i``; images without overlap are masked out and
    contribute nothing. Returns the loss (mean over present images, heads and
    rows) and the presence mask.
    """
    mask = np.array([ov is not None for ov in overlaps], dtype=bool)
    if not mask.any():
        return _zero(student_tokens.dtype), mask
    idx = np.flatnonzero(mask)
    s_coords = np.stack([overlaps[i].view_coords(0, student_hw) for i in idx])
    t_coords = np.stack([overlaps[i].view_coords(1, teacher_hw) for i in idx])
    s = student_tokens if len(idx) == len(mask) else nx.getitem(student_tokens, idx)
    t = teacher_tokens if len(idx) == len(mask) else nx.getitem(teacher_tokens, idx)
    s_rel = pixel_self_relation(sample_overlap(s, s_coords, student_hw), heads, 1.0)
    t_rel = pixel_self_relation(sample_overlap(t, t_coords, teacher_hw), heads, t_p)
    return nx.cross_entropy_rows(t_rel.data, s_rel), mask


def channel_loss(student_tokens: Tensor, teacher_tokens: Tensor, t_c: float) -> Tensor:
    """Cross-entropy between teacher (temperature ``t_c``) and student channel relations of full views."""
    target = channel_self_relation(teacher_tokens, t_c).data
    return nx.cross_entropy_rows(target, channel_self_relation(student_tokens, 1.0))


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, temp: float) -> np.ndarray:
    z = (teacher_logits - center) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def image_loss(student_logits: Tensor, teacher_logits: np.ndarray, center: np.ndarray,
               cfg: LossConfig, pairs: list[ViewPair]) -> tuple[Tensor, np.ndarray]:
    """Self-distillation loss on prototype logits with a centred, sharpened teacher.

    ``student_logits`` is ``(V, B, K)``, ``teacher_logits`` ``(G, B, K)`` for the
    global views. Returns the loss averaged over ``pairs`` and the updated
    centre ``m * center + (1 - m) * mean(teacher_logits)``.
    """
    targets = teacher_probs(teacher_logits, center, cfg.teacher_temp)
    log_q = nx.log_softmax_rows(student_logits, cfg.student_temp)
    total = None
    for pr in pairs:
        term = nx.cross_entropy_log_rows(targets[pr.teacher], log_q[pr.student])
        total = term if total is None else nx.add(total, term)
    loss = nx.scale(total, 1.0 / len(pairs))
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(axis=0)
    m = cfg.center_momentum
    new_center = (center * m + batch_mean * (1.0 - m)).astype(center.dtype)
    return loss, new_center


@dataclass
class LossReport:
    L_I: float
    L_p: float
    L_c: float
    L: float
    pixel_mask: list[np.ndarray] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"L_I": self.L_I, "L_p": self.L_p, "L_c": self.L_c, "L": self.L}


def total_loss(image: Tensor | None, pixel: Tensor | None, channel: Tensor | None,
               cfg: LossConfig, pixel_mask: list[np.ndarray] | None = None) -> tuple[Tensor, LossReport]:
    """Weighted sum ``L_I + L_p + L_c`` of the enabled components (weights default to 1)."""
    parts = [(cfg.enable_image, cfg.weight_image, image),
             (cfg.enable_pixel, cfg.weight_pixel, pixel),
             (cfg.enable_channel, cfg.weight_channel, channel)]
    if not any(on for on, _, _ in parts):
        raise ConfigError("all loss components are disabled")
    total = None
    values = []
    for on, w, term in parts:
        if not on:
            values.append(0.0)
            continue
        if term is None:
            raise ConfigError("an enabled loss component was not computed")
        values.append(float(term.data))
        t = term if w == 1.0 else nx.scale(term, w)
        total = t if total is None else nx.add(total, t)
    return total, LossReport(values[0], values[1], values[2], float(total.data), pixel_mask or [])

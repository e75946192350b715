"""Training loop: schedules, optimiser and EMA teacher updates, checkpoints, metrics log."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import container
from . import heads as H
from . import numerics as nx
from .augment import CropGeometry, derive_rng, make_views
from .config import TrainConfig, parse_config_text
from .errors import CheckpointError, ConfigError, NonFiniteError, RejectedInputError, TrainingStepError
from .losses import LossReport, channel_loss, image_loss, pair_schedule, pixel_loss, total_loss
from .numerics import AdamW, Tape, Tensor
from .relation import overlap_rect
from .vit import encode, init_encoder

_INIT_KEY = 0x1A17
_ORDER_KEY = 0x0DE2
_AUG_KEY = 0xA06


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


def lambda_schedule(step: int, total_steps: int, start: float = 0.996, end: float = 1.0) -> float:
    """Cosine ramp of the EMA coefficient from ``start`` (step 0) to ``end`` (final step)."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise RejectedInputError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return end
    return end - (end - start) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def lr_schedule(step: int, total_steps: int, peak: float, floor: float, warmup_frac: float) -> float:
    """Linear warmup from 0 to ``peak`` over the first ``warmup_frac`` of steps, then cosine to ``floor``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise RejectedInputError(f"step {step} outside [0, {total_steps}]")
    warm = int(round(warmup_frac * total_steps))
    if step < warm:
        return peak * step / warm
    if step == total_steps:
        return floor
    span = total_steps - warm
    return floor + (peak - floor) * (1.0 + math.cos(math.pi * (step - warm) / span)) / 2.0


def peak_lr(cfg: TrainConfig) -> float:
    return cfg.optim.lr * cfg.train.batch_size / 256


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class EncoderPair:
    """Student (optimised) and teacher (EMA) parameters with their batch-norm buffers."""

    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    student_buffers: dict[str, np.ndarray]
    teacher_buffers: dict[str, np.ndarray]
    momentum: float = 0.996


def dtype_of(cfg: TrainConfig):
    return np.float64 if cfg.train.precision == 64 else np.float32


def init_pair(cfg: TrainConfig, seed: int | None = None) -> EncoderPair:
    seed = cfg.train.seed if seed is None else seed
    rng = derive_rng(seed, _INIT_KEY)
    dtype = dtype_of(cfg)
    params = init_encoder(cfg.model, rng, dtype)
    head_params, buffers = H.init_heads(cfg.model.embed_dim, cfg.heads, rng, dtype)
    params.update(head_params)
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    teacher = {k: Tensor(p.data.copy(), name=k) for k, p in params.items()}
    for p in teacher.values():
        p.zero_grad()
    tbuf = {k: v.copy() for k, v in buffers.items()}
    return EncoderPair(params, teacher, buffers, tbuf, cfg.optim.momentum_start)


def momentum_update(pair: EncoderPair, lam: float) -> None:
    """``teacher = lam * teacher + (1 - lam) * student`` for every parameter; buffers copied."""
    if pair.student.keys() != pair.teacher.keys():
        raise AssertionError("student and teacher parameter sets differ")
    for k, s in pair.student.items():
        t = pair.teacher[k]
        if t.shape != s.shape:
            raise AssertionError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        t.data *= lam
        t.data += (1.0 - lam) * s.data
    for k, v in pair.student_buffers.items():
        pair.teacher_buffers[k][...] = v
    pair.momentum = lam


def no_decay_names(params: dict[str, Tensor]) -> set[str]:
    """Biases and normalisation scales (all 1-d parameters) are exempt from weight decay."""
    return {k for k, p in params.items() if p.ndim <= 1}


@dataclass
class TrainerState:
    cfg: TrainConfig
    pair: EncoderPair
    optimizer: AdamW
    center: np.ndarray
    step: int
    total_steps: int
    steps_per_epoch: int

    @classmethod
    def fresh(cls, cfg: TrainConfig, n_images: int) -> "TrainerState":
        pair = init_pair(cfg)
        opt = AdamW(pair.student, betas=(cfg.optim.beta1, cfg.optim.beta2), eps=cfg.optim.eps,
                    no_decay=no_decay_names(pair.student))
        spe = steps_per_epoch(n_images, cfg.train.batch_size)
        center = np.zeros(cfg.heads.prototypes, dtype=dtype_of(cfg))
        return cls(cfg, pair, opt, center, 0, cfg.train.epochs * spe, spe)


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    if n_images <= 0:
        raise RejectedInputError("training set is empty")
    return max(1, n_images // batch_size)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------


@dataclass
class Batch:
    """Views stacked per view slot: ``globals (G, B, 3, S, S)``, ``locals (L, B, 3, s, s)``."""

    globals: np.ndarray
    locals: np.ndarray | None
    geometries: list[list[CropGeometry]]
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def size(self) -> int:
        return self.globals.shape[1]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return derive_rng(seed, _ORDER_KEY, epoch).permutation(n)


def batch_indices(cfg: TrainConfig, n_images: int, step: int) -> tuple[int, np.ndarray]:
    spe = steps_per_epoch(n_images, cfg.train.batch_size)
    epoch, k = divmod(step, spe)
    bs = min(cfg.train.batch_size, n_images)
    order = epoch_order(cfg.train.seed, epoch, n_images)
    return epoch, order[k * bs:(k + 1) * bs]


def build_batch(images: np.ndarray, idx: np.ndarray, cfg: TrainConfig, epoch: int) -> Batch:
    vbs = [make_views(images[i], cfg.aug, cfg.train.seed, _AUG_KEY, epoch, int(i),
                      patch_size=cfg.model.patch_size) for i in idx]
    n_views = len(vbs[0].views)
    dtype = dtype_of(cfg)
    stacked = [np.stack([vb.views[j] for vb in vbs]).astype(dtype) for j in range(n_views)]
    geoms = [[vb.geometries[j] for vb in vbs] for j in range(n_views)]
    globs = np.stack(stacked[:2])
    locs = np.stack(stacked[2:]) if n_views > 2 else None
    return Batch(globs, locs, geoms, np.asarray(idx))


# --------------------------------------------------------------------------
# step
# --------------------------------------------------------------------------


def _branch_features(feat: Tensor, branch: str, pair: EncoderPair, asymmetric: bool) -> Tensor:
    h = H.project(feat, branch, pair.student, pair.student_buffers, training=True)
    if asymmetric:
        h = H.predict(h, branch, pair.student, pair.student_buffers, training=True)
    return h


def forward_losses(pair: EncoderPair, batch: Batch, center: np.ndarray,
                   cfg: TrainConfig) -> tuple[Tensor, LossReport, np.ndarray]:
    """Student and teacher forward passes and the total loss. Call inside a :class:`Tape`."""
    g, b = batch.globals.shape[:2]
    n_local = 0 if batch.locals is None else batch.locals.shape[0]
    m = cfg.model
    pairs = pair_schedule(g, n_local)
    sg = encode(batch.globals.reshape(g * b, *batch.globals.shape[2:]), pair.student, m)
    sl = None
    if n_local:
        sl = encode(batch.locals.reshape(n_local * b, *batch.locals.shape[2:]), pair.student, m)
    tg = encode(batch.globals.reshape(g * b, *batch.globals.shape[2:]), pair.teacher, m)
    lc = cfg.losses

    l_img = None
    new_center = center
    if lc.enable_image:
        tokens = sg.image_token if sl is None else nx.concatenate([sg.image_token, sl.image_token], 0)
        s_logits = H.image_head(tokens, pair.student)
        s_logits = nx.reshape(s_logits, (g + n_local, b, -1))
        t_logits = H.image_head(tg.image_token, pair.teacher).data.reshape(g, b, -1)
        l_img, new_center = image_loss(s_logits, t_logits, center, lc, pairs)

    def student_view(groups, view: int):
        grp, local = (groups[0], False) if view < g else (groups[1], True)
        j = view if not local else view - g
        return nx.getitem(grp, slice(j * b, (j + 1) * b)), (sl.grid if local else sg.grid)

    rc = cfg.relation
    branch_losses = {}
    masks = []
    for branch, on in (("pixel", lc.enable_pixel), ("channel", lc.enable_channel)):
        if not on:
            continue
        groups = [_branch_features(sg.patch_features, branch, pair, cfg.heads.asymmetric)]
        if sl is not None:
            groups.append(_branch_features(sl.patch_features, branch, pair, cfg.heads.asymmetric))
        t_feat = H.project(tg.patch_features, branch, pair.teacher, pair.teacher_buffers,
                           training=False).data
        terms = []
        for pr in pairs:
            s_tok, s_hw = student_view(groups, pr.student)
            t_tok = Tensor(t_feat[pr.teacher * b:(pr.teacher + 1) * b])
            if branch == "pixel":
                grid = rc.grid_global if pr.kind == "global-global" else rc.grid_local
                ovs = [overlap_rect(batch.geometries[pr.student][i], batch.geometries[pr.teacher][i],
                                    grid, rc.min_overlap) for i in range(b)]
                term, mask = pixel_loss(s_tok, t_tok, ovs, s_hw, tg.grid, rc.heads, rc.t_p)
                masks.append(mask)
                if mask.any():
                    terms.append(term)
            else:
                terms.append(channel_loss(s_tok, t_tok, rc.t_c))
        if terms:
            acc = terms[0]
            for t in terms[1:]:
                acc = nx.add(acc, t)
            branch_losses[branch] = nx.scale(acc, 1.0 / len(terms))
        else:
            branch_losses[branch] = Tensor(np.zeros((), dtype=dtype_of(cfg)))

    total, report = total_loss(l_img, branch_losses.get("pixel"), branch_losses.get("channel"),
                               lc, masks)
    return total, report, new_center


@dataclass
class StepResult:
    report: LossReport
    lr: float
    momentum: float
    step: int


def train_step(state: TrainerState, batch: Batch) -> StepResult:
    """Forward, backward, clip, AdamW on the student, EMA on the teacher, advance schedules."""
    cfg = state.cfg
    pair = state.pair
    state.optimizer.zero_grad()
    try:
        with Tape() as tape:
            loss, report, new_center = forward_losses(pair, batch, state.center, cfg)
    except NonFiniteError as e:
        raise TrainingStepError(f"non-finite values at step {state.step}: {e}") from None
    if not math.isfinite(report.L):
        raise TrainingStepError(f"non-finite loss at step {state.step}: {report.as_dict()}")
    nx.backward(loss, tape)
    tape.records.clear()
    nx.clip_grad_norm(pair.student, cfg.optim.clip_grad)
    lr = lr_schedule(state.step, state.total_steps, peak_lr(cfg), cfg.optim.min_lr, cfg.optim.warmup_frac)
    state.optimizer.step(lr, cfg.optim.weight_decay)
    lam = lambda_schedule(state.step, state.total_steps, cfg.optim.momentum_start, cfg.optim.momentum_end)
    momentum_update(pair, lam)
    state.center = new_center
    done = state.step
    state.step += 1
    return StepResult(report, lr, lam, done)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def state_arrays(state: TrainerState) -> dict[str, np.ndarray]:
    pair = state.pair
    out: dict[str, np.ndarray] = {}
    for k, p in pair.student.items():
        out[f"student/{k}"] = p.data
    for k, p in pair.teacher.items():
        out[f"teacher/{k}"] = p.data
    for k, v in pair.student_buffers.items():
        out[f"student_buffers/{k}"] = v
    for k, v in pair.teacher_buffers.items():
        out[f"teacher_buffers/{k}"] = v
    for k, st in state.optimizer.state.items():
        out[f"optim/m/{k}"] = st.m
        out[f"optim/v/{k}"] = st.v
    steps = {st.step for st in state.optimizer.state.values()}
    out["optim/step"] = np.array([steps.pop() if steps else 0], dtype=np.int64)
    out["state/center"] = state.center
    out["state/step"] = np.array([state.step], dtype=np.int64)
    out["state/momentum"] = np.array([pair.momentum], dtype=np.float64)
    out["state/schedule"] = np.array([state.steps_per_epoch, state.total_steps], dtype=np.int64)
    out["meta/config"] = np.frombuffer(state.cfg.to_text().encode(), dtype=np.uint8)
    return out


def checkpoint_save(path: str | Path, state: TrainerState) -> None:
    container.save(path, state_arrays(state), container.CHECKPOINT_MAGIC, state.cfg.digest())


def checkpoint_config(arrays: dict[str, np.ndarray]) -> TrainConfig:
    if "meta/config" not in arrays:
        raise CheckpointError("checkpoint has no meta/config entry")
    return parse_config_text(arrays["meta/config"].tobytes().decode())


def checkpoint_load(path: str | Path, cfg: TrainConfig | None = None,
                    n_images: int | None = None) -> TrainerState:
    """Restore a :class:`TrainerState`; ``cfg`` (default: the embedded one) must match every array shape."""
    arrays, _ = container.load(path, container.CHECKPOINT_MAGIC)
    stored = checkpoint_config(arrays)
    cfg = stored if cfg is None else cfg
    try:
        cfg.validate()
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config invalid: {e}") from None
    ref = TrainerState.fresh(cfg, n_images if n_images is not None else cfg.train.batch_size)
    expected = state_arrays(ref)
    for name, arr in expected.items():
        if name == "meta/config":
            continue
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing array {name}")
        got = arrays[name]
        if got.shape != arr.shape:
            raise CheckpointError(f"array {name} has shape {got.shape}, expected {arr.shape}")
        if got.dtype != arr.dtype:
            raise CheckpointError(f"array {name} has dtype {got.dtype}, expected {arr.dtype}")
    extra = set(arrays) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected array {sorted(extra)[0]}")
    pair = ref.pair
    for k, p in pair.student.items():
        p.data[...] = arrays[f"student/{k}"]
    for k, p in pair.teacher.items():
        p.data[...] = arrays[f"teacher/{k}"]
    for k, v in pair.student_buffers.items():
        v[...] = arrays[f"student_buffers/{k}"]
    for k, v in pair.teacher_buffers.items():
        v[...] = arrays[f"teacher_buffers/{k}"]
    opt_step = int(arrays["optim/step"][0])
    for k, st in ref.optimizer.state.items():
        st.m[...] = arrays[f"optim/m/{k}"]
        st.v[...] = arrays[f"optim/v/{k}"]
        st.step = opt_step
    ref.center = arrays["state/center"].copy()
    ref.step = int(arrays["state/step"][0])
    pair.momentum = float(arrays["state/momentum"][0])
    ref.steps_per_epoch, ref.total_steps = (int(v) for v in arrays["state/schedule"])
    return ref


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


def metrics_line(res: StepResult) -> str:
    rec = {"step": res.step, "lr": res.lr, "lambda": res.momentum, **res.report.as_dict()}
    return json.dumps(rec)


def train(cfg: TrainConfig, images: np.ndarray, out_dir: str | Path | None = None,
          state: TrainerState | None = None, max_steps: int | None = None,
          echo: TextIO | None | str = "stdout",
          on_step: Callable[[StepResult], None] | None = None) -> TrainerState:
    """Run (or resume) training on ``images`` ``(N, 3, H, W)``.

    With ``out_dir`` set, appends one JSON line per step to ``metrics.jsonl``,
    writes ``ckpt_eXXXX.srlt`` every ``train.checkpoint_every`` epochs and
    ``final.srlt`` at the end of the schedule. A run cut short by ``max_steps``
    leaves ``last.srlt`` to resume from.
    """
    cfg.validate()
    if echo == "stdout":
        echo = sys.stdout
    n = images.shape[0]
    if state is None:
        state = TrainerState.fresh(cfg, n)
    elif state.steps_per_epoch != steps_per_epoch(n, cfg.train.batch_size):
        state.steps_per_epoch = steps_per_epoch(n, cfg.train.batch_size)
        state.total_steps = cfg.train.epochs * state.steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    log = open(out / "metrics.jsonl", "a", encoding="utf-8") if out is not None else None
    stop = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)
    epoch_losses: list[float] = []
    try:
        while state.step < stop:
            epoch, idx = batch_indices(cfg, n, state.step)
            batch = build_batch(images, idx, cfg, epoch)
            res = train_step(state, batch)
            epoch_losses.append(res.report.L)
            if log is not None:
                log.write(metrics_line(res) + "\n")
                log.flush()
            if on_step is not None:
                on_step(res)
            if state.step % state.steps_per_epoch == 0:
                done_epoch = state.step // state.steps_per_epoch
                if echo is not None:
                    print(f"epoch {done_epoch}/{cfg.train.epochs} mean L {np.mean(epoch_losses):.6f}",
                          file=echo, flush=True)
                epoch_losses = []
                if out is not None and cfg.train.checkpoint_every > 0 \
                        and done_epoch % cfg.train.checkpoint_every == 0:
                    checkpoint_save(out / f"ckpt_e{done_epoch:04d}.srlt", state)
        if out is not None:
            name = "final.srlt" if state.step == state.total_steps else "last.srlt"
            checkpoint_save(out / name, state)
    finally:
        if log is not None:
            log.close()
    return state

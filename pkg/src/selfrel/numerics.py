"""Dense-array engine with tape-based reverse-mode differentiation.

Arrays are thin wrappers around ``numpy.ndarray``. Operations executed while a
:class:`Tape` is active, and that touch at least one tracked array, append a
record to the tape; :func:`backward` replays those records in reverse.

Broadcasting is intentionally narrow: binary elementwise ops accept equal
shapes or a trailing-suffix operand (a bias), and :func:`matmul` accepts a
shared 2-D right operand or equal leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, RejectedInputError, TrainingStepError

LOG_EPS = 1e-12

_active_tape: "Tape | None" = None


class Tensor:
    """An n-d array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed primitive operations.

    Use as a context manager; nesting is not supported.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self.records)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], bw) -> Tensor:
    tracked = _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        _active_tape.records.append(_Record(out, inputs, bw))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tracked array that ``loss`` depends on.

    Leaf gradients accumulate into existing buffers. Each record is visited once,
    newest first.
    """
    if loss.data.size != 1:
        raise RejectedInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True).reshape(inp.shape)
            else:
                inp.grad += gi
        if rec.out is not loss:
            rec.out.grad = None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise RejectedInputError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b, like=a)
    _check_binary(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _record(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape),))


# --------------------------------------------------------------------------
# shape
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in idx)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record(x.data[index], (x,), bw)


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record(np.concatenate([t.data for t in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def tile_leading(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _record(out, (x,), lambda g: (g.sum(axis=0),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has the same
    leading axes as ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise RejectedInputError(f"matmul shape mismatch {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise RejectedInputError(f"matmul batch mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


# --------------------------------------------------------------------------
# normalisations and distributions
# --------------------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite input to {what}")


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``."""
    if not temperature > 0:
        raise RejectedInputError(f"temperature must be positive, got {temperature}")
    _check_finite(x.data, "softmax_rows")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    inv_t = 1.0 / temperature

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) * inv_t,)

    return _record(y, (x,), bw)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise RejectedInputError(f"temperature must be positive, got {temperature}")
    _check_finite(x.data, "log_softmax_rows")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    inv_t = 1.0 / temperature

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) * inv_t,)

    return _record(out, (x,), bw)


def _target(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def cross_entropy_rows(p, q: Tensor) -> Tensor:
    """Mean over rows of ``-sum_j p_ij log q_ij``.

    ``p`` is a constant target (no gradient ever flows into it); ``q`` is
    clamped at ``LOG_EPS`` inside the logarithm.
    """
    pd = _target(p).astype(q.dtype, copy=False)
    if pd.shape != q.shape:
        raise RejectedInputError(f"cross_entropy_rows shape mismatch {pd.shape} vs {q.shape}")
    rows = q.data.size // q.shape[-1]
    qc = np.maximum(q.data, LOG_EPS)
    val = -(pd * np.log(qc)).sum() / rows

    def bw(g):
        gq = np.where(q.data > LOG_EPS, -pd / qc, 0.0) * (g / rows)
        return (gq,)

    return _record(np.asarray(val, dtype=q.dtype), (q,), bw)


def cross_entropy_log_rows(p, log_q: Tensor) -> Tensor:
    """Like :func:`cross_entropy_rows` but ``log_q`` is already a log-distribution."""
    pd = _target(p).astype(log_q.dtype, copy=False)
    if pd.shape != log_q.shape:
        raise RejectedInputError(f"shape mismatch {pd.shape} vs {log_q.shape}")
    rows = log_q.data.size // log_q.shape[-1]
    val = -(pd * log_q.data).sum() / rows
    return _record(np.asarray(val, dtype=log_q.dtype), (log_q,), lambda g: (-pd * (g / rows),))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data

    def bw(g):
        gw = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        gh = g * wd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _record(xhat * wd + bias.data, (x, weight, bias), bw)


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Normalise each channel (last axis) over every leading position.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional).
    """
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    wd = weight.data
    if training:
        mu = flat.mean(axis=0)
        xc = flat - mu
        var = (xc * xc).mean(axis=0)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            g2 = g.reshape(-1, c)
            gw = (g2 * xhat).sum(axis=0)
            gb = g2.sum(axis=0)
            gh = g2 * wd
            gx = rstd * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
            return gx.reshape(x.shape), gw, gb
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (flat - running_mean.astype(x.dtype)) * rstd

        def bw(g):
            g2 = g.reshape(-1, c)
            return (g2 * (wd * rstd)).reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    out = (xhat * wd + bias.data).astype(x.dtype).reshape(x.shape)
    return _record(out, (x, weight, bias), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis vector to unit L2 norm (vectors shorter than eps are divided by eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = norm <= eps
    n = np.maximum(norm, eps)
    y = x.data / n

    def bw(g):
        proj = np.where(clamped, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / n,)

    return _record(y, (x,), bw)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def bilinear_matrix(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    """Interpolation weights for sampling an ``height x width`` grid.

    ``coords[..., 0]`` is the column (x) and ``coords[..., 1]`` the row (y), in
    grid-index units (cell ``(r, c)`` sits at ``(c, r)``). Coordinates are
    clamped to the grid (border padding). Returns ``(..., P, height*width)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    x = np.clip(coords[..., 0], 0.0, width - 1)
    y = np.clip(coords[..., 1], 0.0, height - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    out = np.zeros(coords.shape[:-1] + (height * width,))
    lead = np.indices(coords.shape[:-1])
    for yy, xx, w in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                      (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
        np.add.at(out, tuple(lead) + (yy * width + xx,), w)
    return out


def grid_sample(feat: Tensor, coords: np.ndarray, height: int, width: int) -> Tensor:
    """Bilinearly sample token-major features ``(..., height*width, C)``.

    ``coords`` are constants of shape ``(..., P, 2)`` sharing ``feat``'s
    leading axes (or without leading axes). Differentiable in ``feat``.
    """
    w = bilinear_matrix(coords, height, width).astype(feat.dtype)
    if w.ndim == 2 and feat.ndim > 2:
        w = np.broadcast_to(w, feat.shape[:-2] + w.shape).copy()
    return matmul(Tensor(w), feat)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One in-place AdamW update (decoupled decay, bias-corrected moments)."""
    if not np.isfinite(grad).all():
        raise TrainingStepError("non-finite gradient")
    b1, b2 = betas
    state.step += 1
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class AdamW:
    """AdamW over a dict of named parameters.

    ``no_decay`` names parameters exempt from weight decay.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8,
                 no_decay: set[str] | None = None):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.no_decay = set(no_decay or ())
        self.state = {k: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for k, p in params.items()}

    def step(self, lr: float, weight_decay: float) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            wd = 0.0 if k in self.no_decay else weight_decay
            adamw_step(p.data, g, self.state[k], lr, self.betas, self.eps, wd)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingStepError("non-finite gradient norm")
    if norm > max_norm:
        c = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.dtype.type(c)
    return norm


# --------------------------------------------------------------------------
# verification helpers
# --------------------------------------------------------------------------


def numeric_grad(fn: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. the array ``x`` (mutated and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = fn()
        x[i] = orig - step
        fm = fn()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def gradcheck(build: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``build`` recomputes the scalar loss from ``params`` (which must be tracked).
    Relative error is ``|a - n| / max(|a|, |n|)`` on flattened vectors.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(lambda: build().item(), p.data, step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst

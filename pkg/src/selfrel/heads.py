"""Projection, prediction and image-level heads.

The relation projection heads are batch-norm followed by ReLU (no linear
layer); the prediction heads add a pointwise linear map in front. Pixel and
channel branches own disjoint parameters.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import HeadConfig
from .numerics import Tensor
from .vit import trunc_normal

BRANCHES = ("pixel", "channel")


def init_heads(embed_dim: int, cfg: HeadConfig, rng: np.random.Generator,
               dtype=np.float32) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Head parameters and batch-norm running statistics."""
    c = embed_dim
    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for br in BRANCHES:
        arrays[f"heads.{br}.proj.bn.weight"] = np.ones(c)
        arrays[f"heads.{br}.proj.bn.bias"] = np.zeros(c)
        arrays[f"heads.{br}.pred.weight"] = trunc_normal(rng, (c, c))
        arrays[f"heads.{br}.pred.bn.weight"] = np.ones(c)
        arrays[f"heads.{br}.pred.bn.bias"] = np.zeros(c)
        for part in ("proj", "pred"):
            buffers[f"heads.{br}.{part}.bn.running_mean"] = np.zeros(c, dtype)
            buffers[f"heads.{br}.{part}.bn.running_var"] = np.ones(c, dtype)
    dims = [c, cfg.image_hidden, cfg.image_hidden, cfg.image_bottleneck]
    for i in range(3):
        arrays[f"heads.image.fc{i + 1}.weight"] = trunc_normal(rng, (dims[i], dims[i + 1]))
        arrays[f"heads.image.fc{i + 1}.bias"] = np.zeros(dims[i + 1])
    # one prototype per row; rows are unit-normalised in the forward pass
    arrays["heads.image.prototypes.weight"] = trunc_normal(rng, (cfg.prototypes, cfg.image_bottleneck))
    params = {k: Tensor(v.astype(dtype), name=k) for k, v in arrays.items()}
    return params, buffers


def _bn(x: Tensor, params, buffers, prefix: str, training: bool) -> Tensor:
    return nx.batch_norm(x, params[prefix + ".weight"], params[prefix + ".bias"],
                         buffers[prefix + ".running_mean"], buffers[prefix + ".running_var"],
                         training)


def project(feat: Tensor, which: str, params, buffers, training: bool) -> Tensor:
    """Batch-norm over all tokens of the batch, then ReLU. Shape-preserving ``(..., N, C)``."""
    return nx.relu(_bn(feat, params, buffers, f"heads.{which}.proj.bn", training))


def predict(feat: Tensor, which: str, params, buffers, training: bool) -> Tensor:
    """Pointwise channel mixing, batch-norm, ReLU. Only used on the student path."""
    h = nx.matmul(feat, params[f"heads.{which}.pred.weight"])
    return nx.relu(_bn(h, params, buffers, f"heads.{which}.pred.bn", training))


def image_bottleneck(token: Tensor, params) -> Tensor:
    h = token
    for i in (1, 2, 3):
        h = nx.add(nx.matmul(h, params[f"heads.image.fc{i}.weight"]), params[f"heads.image.fc{i}.bias"])
        if i < 3:
            h = nx.gelu(h)
    return nx.l2_normalize(h)


def image_head(token: Tensor, params) -> Tensor:
    """``(B, C)`` image tokens to ``(B, K)`` prototype logits.

    Prototypes are weight-normalised, so each logit is a cosine similarity in [-1, 1].
    """
    protos = nx.l2_normalize(params["heads.image.prototypes.weight"])
    return nx.matmul(image_bottleneck(token, params), nx.transpose(protos, [1, 0]))

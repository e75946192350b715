import numpy as np
import pytest

from selfrel import heads as H
from selfrel import numerics as nx
from selfrel.config import HeadConfig
from selfrel.numerics import Tensor


def make(c=6, seed=0, **kw):
    cfg = HeadConfig(image_hidden=10, image_bottleneck=5, prototypes=7, **kw)
    return H.init_heads(c, cfg, np.random.default_rng(seed), np.float64)


def test_branches_disjoint():
    params, buffers = make()
    pix = {k for k in params if k.startswith("heads.pixel.")}
    chan = {k for k in params if k.startswith("heads.channel.")}
    assert pix and chan
    assert {k.replace("pixel", "channel") for k in pix} == chan
    for k in pix:
        assert params[k] is not params[k.replace("pixel", "channel")]
    assert len(buffers) == 8


def test_projection_has_no_linear_layer():
    params, _ = make()
    assert not any(k.startswith("heads.pixel.proj") and k.endswith("pred.weight") for k in params)
    assert {k for k in params if ".proj." in k} == {
        "heads.pixel.proj.bn.weight", "heads.pixel.proj.bn.bias",
        "heads.channel.proj.bn.weight", "heads.channel.proj.bn.bias"}


def test_project_eval_identity_is_relu(rng):
    params, buffers = make()
    x = rng.normal(size=(2, 5, 6))
    out = H.project(Tensor(x), "pixel", params, buffers, training=False).data
    np.testing.assert_allclose(out, np.maximum(x, 0) / np.sqrt(1 + 1e-5), atol=1e-12)


def test_project_all_negative_is_zero():
    params, buffers = make()
    params["heads.channel.proj.bn.bias"].data[:] = -10.0
    out = H.project(Tensor(np.random.default_rng(0).normal(size=(3, 4, 6))), "channel", params, buffers, True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_project_train_batch_statistics(rng):
    params, buffers = make()
    x = rng.normal(3.0, 2.0, size=(4, 9, 6))
    pre = nx.batch_norm(Tensor(x), params["heads.pixel.proj.bn.weight"], params["heads.pixel.proj.bn.bias"],
                        np.zeros(6), np.ones(6), True).data.reshape(-1, 6)
    np.testing.assert_allclose(pre.mean(0), 0.0, atol=1e-4)
    np.testing.assert_allclose(pre.var(0), 1.0, atol=1e-4)
    out = H.project(Tensor(x), "pixel", params, buffers, True).data
    np.testing.assert_array_equal(out.reshape(-1, 6), np.maximum(pre, 0))


def test_predict_identity_is_relu(rng):
    params, buffers = make()
    params["heads.pixel.pred.weight"].data[:] = np.eye(6)
    x = rng.normal(size=(2, 5, 6))
    out = H.predict(Tensor(x), "pixel", params, buffers, training=False).data
    np.testing.assert_allclose(out, np.maximum(x, 0) / np.sqrt(1 + 1e-5), atol=1e-12)


def test_predict_zero_weights():
    params, buffers = make()
    params["heads.channel.pred.weight"].data[:] = 0
    out = H.predict(Tensor(np.ones((2, 3, 6))), "channel", params, buffers, training=False)
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_predict_gradient(seed):
    rng = np.random.default_rng(seed)
    params, buffers = make(seed=seed)
    for p in params.values():
        p.requires_grad = True
    params["heads.pixel.pred.weight"].data[:] = rng.normal(size=(6, 6))
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4, 6)))
    names = ["heads.pixel.pred.weight", "heads.pixel.pred.bn.weight", "heads.pixel.pred.bn.bias"]
    err = nx.gradcheck(lambda: nx.sum_all(nx.mul(H.predict(x, "pixel", params, buffers, True), w)),
                       [x] + [params[n] for n in names])
    assert err <= 1e-4


def test_bottleneck_unit_norm(rng):
    params, _ = make()
    z = H.image_bottleneck(Tensor(rng.normal(size=(4, 6))), params).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=-1), 1.0, atol=1e-6)


def test_image_head_zero_input():
    params, _ = make()
    out = H.image_head(Tensor(np.zeros((3, 6))), params).data
    assert out.shape == (3, 7)
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_image_head_gradient(seed):
    rng = np.random.default_rng(seed)
    params, _ = make(seed=seed)
    for p in params.values():
        p.data += rng.normal(0, 0.2, p.shape)
        p.requires_grad = True
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 7)))
    names = ["heads.image.fc1.weight", "heads.image.fc2.bias", "heads.image.fc3.weight",
             "heads.image.prototypes.weight"]
    err = nx.gradcheck(lambda: nx.sum_all(nx.mul(H.image_head(x, params), w)), [x] + [params[n] for n in names])
    assert err <= 1e-4


def test_prototype_logits_are_cosines(rng):
    params, _ = make()
    x = Tensor(rng.normal(size=(5, 6)) * 10)
    out = H.image_head(x, params).data
    assert np.abs(out).max() <= 1.0 + 1e-12
    params["heads.image.prototypes.weight"].data *= 3.5
    np.testing.assert_allclose(H.image_head(x, params).data, out, atol=1e-12)

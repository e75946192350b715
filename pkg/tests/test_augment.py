import numpy as np
import pytest
from scipy.stats import chisquare

from selfrel.augment import (CropGeometry, derive_rng, derive_seed, make_views, render_crop,
                             sample_crop, sample_rect)
from selfrel.config import AugConfig
from selfrel.errors import RejectedInputError


def plain_cfg(**kw) -> AugConfig:
    cfg = AugConfig(color_jitter=False, grayscale=False, blur=False)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def test_derive_seed_known_values():
    # SplitMix64 finaliser of 0 + golden gamma; fixed so streams never drift
    assert derive_seed(0) == 0xE220A8397B1DCDAF
    assert derive_seed(0, 1) != derive_seed(1, 0)
    assert derive_seed(5, 2, 3) == derive_seed(5, 2, 3)


def test_identity_crop(rng):
    img = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    cfg = plain_cfg(global_scale_min=1.0, global_scale_max=1.0, min_aspect=1.0, max_aspect=1.0,
                    flip_p=0.0, global_size=16)
    view, g = sample_crop(img, "global", rng, cfg)
    assert g.rect == (0.0, 0.0, 1.0, 1.0)
    assert not g.hflip
    np.testing.assert_allclose(view, img, atol=1e-6)


def test_resize_identity_rect_other_size(rng):
    img = rng.uniform(size=(3, 8, 8))
    g = CropGeometry(0, 0, 1, 1, False, 16, "global")
    view = render_crop(img, g)
    assert view.shape == (3, 16, 16)
    # nearest output pixels to an input centre interpolate between neighbours
    np.testing.assert_allclose(view[:, 1, 1], 0.5625 * img[:, 0, 0] + 0.1875 * (img[:, 0, 1] + img[:, 1, 0])
                               + 0.0625 * img[:, 1, 1], atol=1e-12)


def test_flip_maps_columns(rng):
    img = rng.uniform(size=(3, 12, 12))
    a = render_crop(img, CropGeometry(0, 0, 1, 1, False, 12, "global"))
    b = render_crop(img, CropGeometry(0, 0, 1, 1, True, 12, "global"))
    for c in range(12):
        np.testing.assert_array_equal(b[:, :, c], a[:, :, 11 - c])


def test_global_areas_uniform_chi_square():
    rng = np.random.default_rng(11)
    cfg = AugConfig()
    areas = []
    for _ in range(10_000):
        x0, y0, x1, y1 = sample_rect(64, 64, "global", rng, cfg)
        areas.append((x1 - x0) * (y1 - y0))
    areas = np.array(areas)
    assert areas.min() >= 0.35 - 1e-12 and areas.max() <= 1.0 + 1e-12
    # retries reject tall/wide draws near area 1, so test uniformity on the
    # range where every aspect ratio fits: area <= 3/4
    sub = areas[areas <= 0.75]
    counts, _ = np.histogram(sub, bins=10, range=(0.35, 0.75))
    assert chisquare(counts).pvalue > 0.01


def test_local_areas_uniform_chi_square():
    rng = np.random.default_rng(12)
    cfg = AugConfig()
    areas = np.array([(lambda r: (r[2] - r[0]) * (r[3] - r[1]))(sample_rect(64, 64, "local", rng, cfg))
                      for _ in range(10_000)])
    assert areas.min() >= 0.05 - 1e-12 and areas.max() <= 0.35 + 1e-12
    counts, _ = np.histogram(areas, bins=10, range=(0.05, 0.35))
    assert chisquare(counts).pvalue > 0.01


def test_aspect_ratio_range():
    rng = np.random.default_rng(3)
    cfg = AugConfig()
    for _ in range(2000):
        x0, y0, x1, y1 = sample_rect(64, 64, "local", rng, cfg)
        assert 3 / 4 - 1e-9 <= (x1 - x0) / (y1 - y0) <= 4 / 3 + 1e-9


def test_fallback_centre_crop():
    cfg = AugConfig(global_scale_min=1.0, global_scale_max=1.0, min_aspect=2.0, max_aspect=2.0)
    rect = sample_rect(64, 64, "global", np.random.default_rng(0), cfg)
    assert rect == (0.0, 0.0, 1.0, 1.0)


def test_degenerate_image_rejected(rng):
    with pytest.raises(RejectedInputError):
        sample_crop(np.zeros((3, 4, 4)), "global", rng, AugConfig(), patch_size=8)
    with pytest.raises(RejectedInputError):
        sample_crop(np.zeros((4, 4)), "global", rng, AugConfig())


def test_invalid_geometry_rejected():
    with pytest.raises(RejectedInputError):
        CropGeometry(0.5, 0, 0.4, 1, False, 8, "global")


@pytest.mark.parametrize("flip", [False, True])
def test_geometry_round_trip(flip):
    rng = np.random.default_rng(4)
    g = CropGeometry(0.1, 0.3, 0.8, 0.9, flip, 32, "local")
    x, y = rng.uniform(0.1, 0.8, 100), rng.uniform(0.3, 0.9, 100)
    u, v = g.to_view(x, y)
    bx, by = g.to_original(u, v)
    np.testing.assert_allclose(bx, x, atol=1e-12)
    np.testing.assert_allclose(by, y, atol=1e-12)


def test_view_counts(rng):
    img = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    vb = make_views(img, AugConfig(n_local=0), 1, 0)
    assert len(vb.views) == 2 and vb.n_global == 2
    vb = make_views(img, AugConfig(), 1, 0)
    assert len(vb.views) == 6 and vb.n_local == 4 and vb.n_global == 2
    assert vb.views[0].shape == (3, 64, 64) and vb.views[2].shape == (3, 32, 32)


def test_make_views_deterministic(rng):
    img = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    a = make_views(img, AugConfig(), 9, 3, 4)
    b = make_views(img, AugConfig(), 9, 3, 4)
    assert a.geometries == b.geometries
    for x, y in zip(a.views, b.views):
        assert x.tobytes() == y.tobytes()
    c = make_views(img, AugConfig(), 9, 3, 5)
    assert c.geometries != a.geometries


def test_photometric_never_moves_geometry(rng):
    img = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    a = make_views(img, AugConfig(), 2, 7)
    b = make_views(img, plain_cfg(), 2, 7)
    assert a.geometries == b.geometries
    assert any(not np.array_equal(x, y) for x, y in zip(a.views, b.views))


def test_photometric_views_differ(rng):
    img = rng.uniform(size=(3, 32, 32)).astype(np.float32)
    cfg = AugConfig(global_scale_min=1.0, global_scale_max=1.0, min_aspect=1.0, max_aspect=1.0,
                    flip_p=0.0, n_local=0, global_size=32)
    vb = make_views(img, cfg, 0, 0)
    assert vb.geometries[0] == vb.geometries[1]
    assert not np.array_equal(vb.views[0], vb.views[1])
    assert all(0.0 <= v.min() and v.max() <= 1.0 for v in vb.views)


def test_derive_rng_streams_independent():
    a = derive_rng(1, 2).uniform(size=4)
    b = derive_rng(1, 3).uniform(size=4)
    assert not np.allclose(a, b)

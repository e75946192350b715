import pytest

from selfrel.config import TrainConfig, load_config, full_scale, parse_config_text
from selfrel.errors import ConfigError


def test_defaults_are_toy_scale():
    cfg = TrainConfig()
    assert (cfg.model.image_size, cfg.model.patch_size, cfg.model.embed_dim) == (64, 8, 96)
    assert (cfg.model.depth, cfg.model.heads, cfg.model.mlp_ratio) == (4, 4, 4)
    assert (cfg.relation.t_p, cfg.relation.t_c, cfg.relation.heads) == (0.5, 0.1, 6)
    assert (cfg.relation.grid_global, cfg.relation.grid_local) == (7, 4)
    assert (cfg.train.epochs, cfg.train.batch_size) == (20, 32)
    cfg.validate()


def test_full_scale_values():
    cfg = full_scale()
    assert (cfg.model.image_size, cfg.model.patch_size, cfg.model.embed_dim) == (224, 16, 384)
    assert (cfg.relation.grid_global, cfg.relation.grid_local) == (13, 6)
    assert (cfg.aug.global_size, cfg.aug.local_size) == (224, 96)
    cfg.validate()


def test_parse_comments_and_blank_lines():
    text = """
    # a comment
    relation.t_p = 0.25   # trailing comment
    train.seed=7
    losses.enable_pixel = off
    """
    cfg = parse_config_text(text)
    assert cfg.relation.t_p == 0.25
    assert cfg.train.seed == 7
    assert cfg.losses.enable_pixel is False


def test_text_round_trip():
    cfg = TrainConfig()
    cfg.set("relation.t_c", "0.01")
    cfg.set("data.root", "/some/where")
    again = parse_config_text(cfg.to_text())
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_unknown_key_names_nearest():
    with pytest.raises(ConfigError, match="relation.t_p"):
        parse_config_text("relation.tp = 0.5")
    with pytest.raises(ConfigError, match="train.seed"):
        load_config(None, ["train.sed=3"])


@pytest.mark.parametrize("key, value", [("train.seed", "abc"), ("relation.t_p", "hot"),
                                        ("heads.asymmetric", "maybe")])
def test_coercion_errors(key, value):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(None, [f"{key}={value}"])


def test_missing_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("train.seed = 1\nnonsense\n")
    with pytest.raises(ConfigError):
        load_config(None, ["train.seed"])


def test_digest_tracks_overrides():
    base = load_config(None)
    assert base.digest() == TrainConfig().digest()
    changed = load_config(None, ["relation.heads=3"])
    assert changed.digest() != base.digest()
    assert load_config(None, ["relation.heads=6"]).digest() == base.digest()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.seed = 4\nrelation.t_c = 0.5\n")
    cfg = load_config(path, ["relation.t_c=0.2"])
    assert cfg.train.seed == 4 and cfg.relation.t_c == 0.2


def test_int_accepted_for_float_field():
    cfg = TrainConfig()
    cfg.set("relation.t_p", 1)
    assert isinstance(cfg.relation.t_p, float)


def test_copy_is_deep():
    a = TrainConfig()
    b = a.copy()
    b.relation.heads = 3
    assert a.relation.heads == 6


@pytest.mark.parametrize("override", ["relation.heads=5", "model.patch_size=7", "relation.t_p=0",
                                      "train.precision=16", "aug.n_local=-1"])
def test_validation_rejects(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_all_losses_disabled_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["losses.enable_image=false", "losses.enable_pixel=false",
                           "losses.enable_channel=false"])

import pytest

from svcodec.config import TrainConfig, apply_key, format_config, parse_config
from svcodec.errors import ConfigError


def test_defaults_valid():
    TrainConfig().validate()


def test_round_trip():
    cfg = TrainConfig(subdomain_size=1024, l1_net=(3, 48), l0_net=(3, 96),
                      voxel_net=(3, 96), tile_net=None, activation="sine",
                      frequency=3.0, ffm_scale=5.0, ffm_size=192,
                      lr=0.001, refine_lr=0.0002, decay=0.975, interval=100,
                      max_epochs=2500, sample_interval=1, batch_size=65536,
                      significance_threshold=0.0, strict_topology=True, seed=42)
    assert parse_config(format_config(cfg)) == cfg


def test_parse_table_style_values():
    text = """
    # hyperparameters
    subdomain_size = 1024
    l1_net = 3x48
    tile_net = none
    l0_net = 3x96
    voxel_net = 3x96
    activation = sine/3.0
    ffm = 5.0/192
    learning_rate = 0.001/0.0002
    lr_decay = 0.975/100
    max_epochs = 2500
    sample_interval = 1
    batch_size = 65536
    """
    cfg = parse_config(text)
    assert cfg.l1_net == (3, 48)
    assert cfg.tile_net is None
    assert cfg.activation == "sine" and cfg.frequency == 3.0
    assert cfg.ffm_scale == 5.0 and cfg.ffm_size == 192
    assert cfg.lr == 0.001 and cfg.refine_lr == 0.0002
    assert cfg.decay == 0.975 and cfg.interval == 100
    assert cfg.batch_size == 2**16


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("frobnicate = 3\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("just some text\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("l0_net = 3by96\n")
    with pytest.raises(ConfigError):
        parse_config("max_epochs = 0\n")
    with pytest.raises(ConfigError):
        parse_config("subdomain_size = 300\n")
    with pytest.raises(ConfigError):
        parse_config("lr_decay = 1.5/100\n")


def test_apply_key_overrides():
    cfg = TrainConfig()
    cfg = apply_key(cfg, "seed", "9")
    cfg = apply_key(cfg, "activation", "relu")
    assert cfg.seed == 9
    assert cfg.activation == "relu"


def test_sin_alias():
    cfg = apply_key(TrainConfig(), "activation", "sin/1.5")
    assert cfg.activation == "sine"
    assert cfg.frequency == 1.5


def test_significance_auto():
    cfg = apply_key(TrainConfig(), "significance_threshold", "auto")
    assert cfg.significance_threshold is None
    cfg = apply_key(TrainConfig(), "significance_threshold", "0.25")
    assert cfg.significance_threshold == 0.25

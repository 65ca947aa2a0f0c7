import pytest

from src.modules.errors import ConfigError
from src.modules.config import RunConfig, format_config, load_config, parse_config_text


def test_keys_and_comments():
    config = parse_config_text(
        "# training\n"
        "batch_size = 8   # small\n"
        "\n"
        "block_depths = 1, 3\n"
        "stratify = yes\n"
        "regime = PositionIndependent\n"
    )
    assert config.batch_size == 8
    assert config.block_depths == (1, 3)
    assert config.stratify is True
    assert config.regime == "PositionIndependent"
    assert config.learning_rate == RunConfig().learning_rate


def test_format_parses_back():
    config = RunConfig(block_depths=(1,), stem_channels=4, head_grid=1, manifest="data/manifest.json", train_final=False)
    assert parse_config_text(format_config(config)) == config
    assert parse_config_text(format_config(RunConfig())) == RunConfig()


@pytest.mark.parametrize(
    "text,message",
    [
        ("folds = 4\nsegment_size = 3\n", "run.txt: line 2: unknown key 'segment_size'"),
        ("seed = 1\nseed = 2\n", "line 2: duplicate key 'seed'"),
        ("\nbatch_size = many\n", "line 2: bad value for batch_size"),
        ("stratify = maybe\n", "line 1: bad value for stratify"),
        ("learning_rate\n", "line 1: expected 'key = value'"),
        ("folds = 1\n", "folds = 1 must be at least 2"),
        ("regime = Pooled\n", "regime = 'Pooled' must be one of"),
        ("segment_length = 1000\n", "not a perfect square"),
    ],
)
def test_config_errors(text, message):
    with pytest.raises(ConfigError) as error:
        parse_config_text(text, "run.txt")
    assert message in str(error.value)


def test_override_skips_none_and_validates():
    config = RunConfig().override(batch_size=4, seed=None)
    assert config.batch_size == 4
    assert config.seed == 0
    with pytest.raises(ConfigError, match="unknown configuration keys"):
        RunConfig().override(epochs=3)
    with pytest.raises(ConfigError, match="holdout_fraction"):
        RunConfig().override(holdout_fraction=1.0)


def test_derived_settings():
    config = RunConfig(segments_per_sample=3, segment_length=16, stem_channels=2, block_depths=(1,), growth_rate=2, head_grid=1)
    net = config.net_config
    assert (net.segments_per_sample, net.segment_length, net.encoder.block_depths) == (3, 16, (1,))
    assert config.train_config(show_progress=True).show_progress


def test_load_config(tmp_path, tiny_config_file):
    assert load_config(None) == RunConfig()
    loaded = load_config(tiny_config_file)
    assert (loaded.folds, loaded.max_epochs, loaded.segment_length) == (2, 2, 16)
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.txt")

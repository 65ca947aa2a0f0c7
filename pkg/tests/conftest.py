from pathlib import Path

import numpy as np
import pytest

from src.modules.cardionet import EncoderConfig, NetConfig
from src.modules.labels import LabelSet, Location
from src.modules.pcg_data import Sample
from src.modules.pipeline import write_synthetic_dataset
from src.modules.synthetic import SynthSpec

TINY_CONFIG_TEXT = """\
# tiny network for fast tests
segments_per_sample = 3
segment_length = 16
stem_channels = 2
block_depths = 1
growth_rate = 2
head_grid = 1
learning_rate = 0.001
batch_size = 8
max_epochs = 2
folds = 2
holdout_fraction = 0.2
"""


@pytest.fixture
def tiny_config() -> NetConfig:
    """Two segments of 16 points: 4x4 images, one dense layer, 2x2 feature maps."""
    return NetConfig(
        segments_per_sample=2,
        segment_length=16,
        encoder=EncoderConfig(stem_channels=2, block_depths=(1,), growth_rate=2),
        head_grid=1,
    )


@pytest.fixture
def check_config() -> NetConfig:
    """Two 8x8 segments, the gradient-check network."""
    return NetConfig(
        segments_per_sample=2,
        segment_length=64,
        encoder=EncoderConfig(stem_channels=2, block_depths=(1,), growth_rate=2),
        head_grid=2,
    )


def make_samples(count: int, config: NetConfig, seed: int = 0, murmur_every: int = 2) -> list:
    """Random samples; every `murmur_every`-th one carries murmur labels."""
    rng = np.random.default_rng(seed)
    samples = []
    for index in range(count):
        labels = LabelSet(1 + index % 4, 1 + index % 3, 1 + index % 3, 1 + index % 4, 1 + index % 3)
        if index % murmur_every:
            labels = LabelSet()
        location = list(Location)[index % 4]
        samples.append(
            Sample(
                rng.normal(size=(config.segments_per_sample, config.segment_length)),
                labels,
                f"{index // 4:05d}",
                location,
                0,
                f"{index // 4:05d}_{location.value}_{index}",
            )
        )
    return samples


@pytest.fixture
def synthetic_manifest(tmp_path: Path) -> Path:
    spec = SynthSpec(n_patients=6, murmur_prevalence=0.5, segments_per_recording=5, locations=("AV", "MV"))
    return write_synthetic_dataset(tmp_path / "data", spec, seed=3)


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.txt"
    path.write_text(TINY_CONFIG_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def sample_factory():
    return make_samples

import numpy as np
import pytest

from rprnet.geometry import normalize_cloud
from rprnet.network import RprNet, RprNetConfig
from rprnet.synthetic import SynthConfig, synth_generate, write_synth_dataset


@pytest.fixture
def rng():
    """Seeded generator so every test draw is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud(rng):
    """Normalized Gaussian cloud of 128 points."""
    return normalize_cloud(rng.normal(size=(128, 3)))


@pytest.fixture
def tiny_config():
    """Network small enough for exhaustive gradient and invariance checks."""
    return RprNetConfig(n_seeds=32, k=8, channels=4, final_channels=16, descriptor_dim=16,
                        kernel_hidden=8, attention_reduction=4)


@pytest.fixture
def tiny_model(tiny_config):
    return RprNet(tiny_config, seed=7)


@pytest.fixture
def desk_config():
    return RprNetConfig.desk()


@pytest.fixture
def small_synth_config():
    """Four places, three variants each: one train, one database, one query."""
    return SynthConfig(n_places=4, variants_per_place=3, test_variants=2, points_per_cloud=96, structure_seed=3)


@pytest.fixture
def synth_dataset(small_synth_config):
    return synth_generate(small_synth_config)


@pytest.fixture
def synth_dir(tmp_path, synth_dataset):
    """Synthetic dataset written to disk; returns (directory, manifest paths)."""
    out_dir = tmp_path / "synth"
    manifests = write_synth_dataset(str(out_dir), synth_dataset)
    return out_dir, manifests


@pytest.fixture
def tiny_config_file(tmp_path):
    """Config file describing a tiny network and a short training run."""
    path = tmp_path / "tiny.cfg"
    path.write_text("""# tiny network for CLI tests
network.n_seeds = 32
network.k = 8
network.channels = 4
network.final_channels = 16
network.descriptor_dim = 16
network.kernel_hidden = 8
network.attention_reduction = 4

batch.initial_size = 4
batch.max_size = 8
train.epochs = 2

synth.n_places = 4
synth.variants_per_place = 4
synth.test_variants = 2
synth.points_per_cloud = 64
""")
    return str(path)

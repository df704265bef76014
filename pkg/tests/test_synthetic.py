import numpy as np
import pytest
from scipy.spatial.distance import pdist

from rprnet.api import ConfigError
from rprnet.dataset import read_bin_cloud, read_manifest
from rprnet.synthetic import Primitive, SynthConfig, generate_place, place_position, synth_generate


class TestSynthConfig:
    @pytest.mark.parametrize("values", [
        {'n_places': 1},
        {'test_variants': 9},
        {'test_variants': -1},
        {'points_per_cloud': 0},
        {'place_spacing': 50.0},
        {'structure_seed': -1},
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            SynthConfig(**values)


class TestPrimitives:
    def test_place_layout_is_seeded(self):
        first, second = generate_place(0, 3), generate_place(0, 3)
        assert 5 <= len(first) <= 15
        assert [p.kind for p in first] == [p.kind for p in second]
        assert not np.array_equal(first[0].center, generate_place(0, 4)[0].center)

    def test_box_surface_points(self, rng):
        """Test that box samples lie on one of the six faces."""
        box = Primitive('box', np.zeros(3), np.array([2.0, 4.0, 6.0]), 0.0)
        points = box.sample_surface(500, rng)
        on_face = (np.isclose(np.abs(points[:, 0]), 1.0) | np.isclose(np.abs(points[:, 1]), 2.0)
                   | np.isclose(points[:, 2], 0.0) | np.isclose(points[:, 2], 6.0))
        assert on_face.all()

    def test_cylinder_surface_points(self, rng):
        cylinder = Primitive('cylinder', np.array([1.0, 1.0, 0.0]), np.array([0.5, 0.5, 3.0]), 0.3)
        points = cylinder.sample_surface(300, rng) - [1.0, 1.0, 0.0]
        radial = np.linalg.norm(points[:, :2], axis=1)
        assert np.all((np.isclose(radial, 0.5)) | np.isclose(points[:, 2], 3.0))
        assert np.all(radial <= 0.5 + 1e-9)

    def test_zero_samples(self, rng):
        assert Primitive('plane', np.zeros(3), np.array([4.0, 0.0, 2.0]), 0.0).sample_surface(0, rng).shape == (0, 3)


class TestSynthGenerate:
    def test_deterministic(self, small_synth_config):
        first, second = synth_generate(small_synth_config), synth_generate(small_synth_config)
        for a, b in zip(first.train + first.database + first.queries, second.train + second.database + second.queries):
            np.testing.assert_array_equal(a.cloud, b.cloud)

    def test_two_places_single_variant(self):
        dataset = synth_generate(SynthConfig(n_places=2, variants_per_place=1, test_variants=0, points_per_cloud=64))
        assert len(dataset.train) == 2 and not dataset.database and not dataset.queries
        a, b = dataset.train
        assert np.linalg.norm(a.position - b.position) >= 100.0

    def test_split_counts(self, synth_dataset):
        assert (len(synth_dataset.train), len(synth_dataset.database), len(synth_dataset.queries)) == (4, 4, 4)
        assert all(c.variant == 0 for c in synth_dataset.train)
        assert all(c.variant == 1 for c in synth_dataset.database)

    def test_clouds_are_normalized(self, synth_dataset):
        for item in synth_dataset.train:
            assert item.cloud.shape == (96, 3)
            assert np.abs(item.cloud).max() == pytest.approx(1.0)

    def test_places_are_far_apart(self):
        positions = np.array([place_position(p, 9, 100.0) for p in range(9)])
        assert pdist(positions).min() == pytest.approx(100.0)

    def test_variants_differ_but_share_position(self, synth_dataset):
        database, query = synth_dataset.database[0], synth_dataset.queries[0]
        assert database.place == query.place
        np.testing.assert_array_equal(database.position, query.position)
        assert not np.array_equal(database.cloud, query.cloud)

    def test_training_samples_carry_place(self, synth_dataset):
        samples = synth_dataset.training_samples()
        assert [s.place_id for s in samples] == [0, 1, 2, 3]


class TestWriteSynthDataset:
    def test_files_and_manifests(self, synth_dir, synth_dataset):
        out_dir, manifests = synth_dir
        assert set(manifests) == {'train', 'database', 'queries'}
        assert len(list((out_dir / "clouds").iterdir())) == 12
        manifest = read_manifest(manifests['queries'], split='test')
        assert len(manifest) == 4
        np.testing.assert_array_equal(read_bin_cloud(manifest.entries[0].path), synth_dataset.queries[0].cloud)
        np.testing.assert_array_equal(manifest.positions[0], synth_dataset.queries[0].position)

import numpy as np
import pytest

from rprnet.api import FormatError, InvalidArgument
from rprnet.dataset import (DatasetManifest, ManifestEntry, load_clouds, read_bin_cloud, read_manifest,
                            write_bin_cloud, write_manifest)


class TestBinCloud:
    def test_full_size_cloud(self, tmp_path, rng):
        path = tmp_path / "cloud.bin"
        cloud = rng.normal(size=(4096, 3))
        write_bin_cloud(path, cloud)
        assert path.stat().st_size == 98304
        loaded = read_bin_cloud(path)
        assert loaded.shape == (4096, 3)
        np.testing.assert_array_equal(loaded, cloud)

    def test_single_origin_point(self, tmp_path):
        path = tmp_path / "origin.bin"
        path.write_bytes(bytes(24))
        np.testing.assert_array_equal(read_bin_cloud(path), np.zeros((1, 3)))

    def test_partial_point(self, tmp_path):
        """Test that a length that is not a multiple of 24 bytes is rejected."""
        path = tmp_path / "short.bin"
        path.write_bytes(bytes(25))
        with pytest.raises(FormatError) as e:
            read_bin_cloud(path)
        assert e.value.offset == 24

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b'')
        with pytest.raises(FormatError):
            read_bin_cloud(path)

    def test_non_finite_coordinate(self, tmp_path):
        path = tmp_path / "nan.bin"
        values = np.zeros((2, 3))
        values[1, 1] = np.nan
        path.write_bytes(values.astype('<f8').tobytes())
        with pytest.raises(FormatError) as e:
            read_bin_cloud(path)
        assert e.value.offset == 32


class TestManifest:
    def test_header_and_relative_paths(self, tmp_path):
        (tmp_path / "clouds").mkdir()
        path = tmp_path / "train.csv"
        path.write_text("path,northing,easting\nclouds/a.bin,10.5,-3\nclouds/b.bin,0,0\n")
        manifest = read_manifest(path)
        assert len(manifest) == 2
        assert manifest.entries[0].path == str(tmp_path / "clouds" / "a.bin")
        np.testing.assert_array_equal(manifest.positions, [[10.5, -3.0], [0.0, 0.0]])

    def test_without_header(self, tmp_path):
        path = tmp_path / "test.csv"
        path.write_text("/data/a.bin,1,2\n")
        manifest = read_manifest(path, split='test')
        assert manifest.entries[0].path == "/data/a.bin" and manifest.split == 'test'

    def test_wrong_column_count_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("path,northing,easting\na.bin,1,2\nb.bin,3\n")
        with pytest.raises(FormatError) as e:
            read_manifest(path)
        assert e.value.offset == 3

    def test_unparsable_coordinate(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a.bin,1,2\nb.bin,north,2\n")
        with pytest.raises(FormatError) as e:
            read_manifest(path)
        assert e.value.offset == 2

    def test_unknown_split(self):
        with pytest.raises(InvalidArgument):
            DatasetManifest(split='validation')

    def test_write_then_read(self, tmp_path, rng):
        cloud_path = tmp_path / "c.bin"
        write_bin_cloud(cloud_path, rng.normal(size=(5, 3)))
        path = tmp_path / "m.csv"
        write_manifest(path, DatasetManifest([ManifestEntry(str(cloud_path), 1.25, 7.0)]))
        assert path.read_text().splitlines()[1].startswith("c.bin,")
        manifest = read_manifest(path)
        assert manifest.entries == [ManifestEntry(str(cloud_path), 1.25, 7.0)]
        assert load_clouds(manifest)[0].shape == (5, 3)

    def test_missing_cloud_file(self, tmp_path):
        manifest = DatasetManifest([ManifestEntry(str(tmp_path / "missing.bin"), 0.0, 0.0)])
        with pytest.raises(InvalidArgument):
            load_clouds(manifest)

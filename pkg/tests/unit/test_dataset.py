"""Tests for the dataset index and synthetic scene generation."""

import numpy as np
import pytest

from svtnet.config import ConfigError, SynthConfig
from svtnet.dataset import DatasetError, DatasetIndex, gen_synth, load_index, sample_scene


@pytest.fixture
def generated(tmp_path, small_synth):
    return gen_synth(small_synth, tmp_path / "data")


class TestGenSynth:
    def test_row_count_and_layout(self, generated, tmp_path):
        assert len(generated) == 12
        assert generated.rows[0].path == "clouds/scene0000_copy0.bin"
        assert (tmp_path / "data" / "index.csv").exists()
        assert sum(r.split == "test" for r in generated.rows) == 4

    def test_clouds_have_requested_size(self, generated):
        for i in range(len(generated)):
            points = generated.load_cloud(i).points
            assert points.shape == (256, 3)
            assert np.all(np.abs(points) <= 1.0)

    def test_default_set_has_ninety_rows(self):
        synth = SynthConfig()
        assert synth.scenes * synth.copies == 90

    def test_copies_are_positives(self, generated):
        positions = generated.positions.reshape(4, 3, 2)
        for scene in positions:
            spread = np.linalg.norm(scene[:, None] - scene[None, :], axis=2)
            assert spread.max() <= 10.0

    def test_cross_scene_pairs_are_negatives(self, generated):
        rows = generated.rows
        for i, a in enumerate(rows):
            for b in rows[i + 1 :]:
                if a.path.split("_")[0] != b.path.split("_")[0]:
                    assert np.linalg.norm(a.position - b.position) >= 50.0

    def test_byte_identical_across_runs(self, small_synth, tmp_path):
        a = gen_synth(small_synth, tmp_path / "a")
        gen_synth(small_synth, tmp_path / "b")
        assert (tmp_path / "a" / "index.csv").read_bytes() == (
            tmp_path / "b" / "index.csv"
        ).read_bytes()
        for row in a.rows:
            assert (tmp_path / "a" / row.path).read_bytes() == (tmp_path / "b" / row.path).read_bytes()

    def test_copies_differ_but_share_a_scene(self, small_synth):
        a, b = sample_scene(small_synth, 0, 0), sample_scene(small_synth, 0, 1)
        assert not np.array_equal(a.points, b.points)

    def test_non_empty_directory(self, generated, small_synth, tmp_path):
        with pytest.raises(DatasetError, match="not empty"):
            gen_synth(small_synth, tmp_path / "data")

    def test_force_overwrites(self, generated, small_synth, tmp_path):
        again = gen_synth(small_synth, tmp_path / "data", force=True)
        assert len(again) == 12

    def test_invalid_scene_settings(self, tmp_path):
        with pytest.raises(ConfigError):
            gen_synth(SynthConfig(points=10), tmp_path / "data")


class TestDatasetIndex:
    def test_load_round_trip(self, generated, tmp_path):
        loaded = DatasetIndex.load(tmp_path / "data" / "index.csv")
        assert loaded.rows == generated.rows
        assert loaded.load_cloud(0).points.shape == (256, 3)

    def test_load_index_accepts_directory(self, generated, tmp_path):
        assert len(load_index(None, tmp_path / "data")) == 12

    def test_split(self, generated):
        assert len(generated.split("train")) == 8
        with pytest.raises(DatasetError, match="unknown split"):
            generated.split("val")

    def test_missing_index(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            DatasetIndex.load(tmp_path / "index.csv")

    def test_missing_column(self, tmp_path):
        path = tmp_path / "index.csv"
        path.write_text("path,northing,split,run\na.bin,0,train,r0\n")
        with pytest.raises(DatasetError, match="easting"):
            DatasetIndex.load(path, check_files=False)

    def test_non_finite_position(self, tmp_path):
        path = tmp_path / "index.csv"
        path.write_text("path,northing,easting,split,run\na.bin,nan,0,train,r0\n")
        with pytest.raises(DatasetError, match="finite"):
            DatasetIndex.load(path, check_files=False)

    def test_unknown_split_tag(self, tmp_path):
        path = tmp_path / "index.csv"
        path.write_text("path,northing,easting,split,run\na.bin,0,0,val,r0\n")
        with pytest.raises(DatasetError, match="val"):
            DatasetIndex.load(path, check_files=False)

    def test_missing_cloud_file(self, tmp_path):
        path = tmp_path / "index.csv"
        path.write_text("path,northing,easting,split,run\nmissing.bin,0,0,train,r0\n")
        with pytest.raises(DatasetError, match="missing.bin"):
            DatasetIndex.load(path)

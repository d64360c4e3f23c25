"""Tests for checkpoint save/load."""

import struct

import numpy as np
import pytest

from svtnet import checkpoint
from svtnet.checkpoint import CheckpointError
from svtnet.config import ConfigError, ModelConfig
from svtnet.model import build, embed


@pytest.fixture
def params(tiny_model_config):
    p = build(tiny_model_config, seed=11)
    # non-default running statistics must survive the round trip
    p.conv0.norm.running_mean[...] = 0.25
    p.conv0.norm.running_var[...] = 2.0
    return p


def test_round_trip_is_bit_identical(tmp_path, params, cube_cloud):
    path = checkpoint.save(params, tmp_path / "ckpt" / "model.svtn")
    loaded = checkpoint.load(path)
    assert loaded.config == params.config
    for name, array in params.state().items():
        assert np.array_equal(loaded.state()[name], array), name
    assert np.array_equal(embed(loaded, cube_cloud), embed(params, cube_cloud))


def test_file_starts_with_magic_and_version(tmp_path, params):
    data = checkpoint.save(params, tmp_path / "model.svtn").read_bytes()
    assert data[:4] == b"SVTN"
    assert struct.unpack("<H", data[4:6]) == (checkpoint.VERSION,)


def test_bad_magic(tmp_path, params):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        checkpoint.load(path)


def test_truncated(tmp_path, params):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.load(path)


def test_trailing_bytes(tmp_path, params):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing bytes"):
        checkpoint.load(path)


def test_unsupported_version(tmp_path, params):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    data = bytearray(path.read_bytes())
    data[4:6] = struct.pack("<H", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint.load(path)


def test_variant_mismatch(tmp_path, params, tiny_model_config):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    expected = ModelConfig(variant="csvt_only", quant_step=0.25)
    with pytest.raises(ConfigError, match="variant mismatch"):
        checkpoint.load(path, expected=expected)


def test_expected_config_accepted(tmp_path, params, tiny_model_config):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    assert checkpoint.load(path, expected=tiny_model_config).config.variant == "svt"


def test_descriptor_dim_mismatch(tmp_path, params, tiny_model_config):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    expected = ModelConfig.from_dict(tiny_model_config.to_dict())
    expected.descriptor_dim = 2 * tiny_model_config.descriptor_dim
    with pytest.raises(ConfigError, match="descriptor dim mismatch"):
        checkpoint.load(path, expected=expected)


def test_corrupt_tensor_name(tmp_path, params):
    path = checkpoint.save(params, tmp_path / "model.svtn")
    data = bytearray(path.read_bytes())
    (config_len,) = struct.unpack("<I", data[6:10])
    first_name = 10 + config_len + 4 + 2
    data[first_name] = 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt tensor name"):
        checkpoint.load(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "absent.svtn")

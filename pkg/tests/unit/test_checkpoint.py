"""Unit tests for the checkpoint container."""

import struct

import numpy as np
import pytest

from retcomplete.checkpoint import CHECKPOINT_MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from retcomplete.errors import CheckpointError
from retcomplete.tensor_core import set_precision

pytestmark = pytest.mark.unit


def sample(dtype: str = "float64") -> Checkpoint:
    arrays = {
        "b": np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0,
        "a": np.array([1.5, -2.0]),
        "scalar": np.array(3.25),
    }
    return Checkpoint(
        "biretnet", {"heads": 2}, arrays, meta={"step": 4}, palette_sha256="ab" * 32, dtype=dtype
    )


def test_header_layout():
    data = sample().to_bytes()
    assert data[:6] == CHECKPOINT_MAGIC
    (header_len,) = struct.unpack("<I", data[6:10])
    assert data[10 : 10 + header_len].startswith(b'{"config"')
    (count,) = struct.unpack("<I", data[10 + header_len : 14 + header_len])
    assert count == 3


def test_round_trip(tmp_path):
    original = sample()
    path = save_checkpoint(original, tmp_path / "nested" / "model.rckpt")
    loaded = load_checkpoint(path, kind="biretnet")
    assert loaded.meta == {"step": 4}
    assert loaded.config == {"heads": 2}
    assert loaded.palette_sha256 == "ab" * 32
    assert sorted(loaded.arrays) == ["a", "b", "scalar"]
    for name, value in original.arrays.items():
        np.testing.assert_array_equal(loaded.arrays[name], value)
    assert not (tmp_path / "nested" / "model.rckpt.tmp").exists()


def test_bytes_are_deterministic():
    assert sample().to_bytes() == sample().to_bytes()


def test_float32_storage():
    loaded = Checkpoint.from_bytes(sample("float32").to_bytes())
    assert loaded.dtype == "float32"
    assert loaded.arrays["b"].dtype == np.float32
    np.testing.assert_allclose(loaded.arrays["b"], sample().arrays["b"], rtol=1e-6)


def test_default_dtype_follows_precision():
    set_precision(32)
    assert Checkpoint("upsampler", {}, {}).dtype == "float32"
    set_precision(64)
    assert Checkpoint("upsampler", {}, {}).dtype == "float64"


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.rckpt")


def test_wrong_kind(tmp_path):
    path = save_checkpoint(sample(), tmp_path / "m.rckpt")
    with pytest.raises(CheckpointError, match="upsampler"):
        load_checkpoint(path, kind="upsampler")


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda d: b"BADMAG" + d[6:], "magic"),
        (lambda d: d[:-5], "truncated"),
        (lambda d: d + b"\x00", "trailing"),
    ],
)
def test_corrupt(mutate, message):
    with pytest.raises(CheckpointError, match=message):
        Checkpoint.from_bytes(mutate(sample().to_bytes()))


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        Checkpoint("biretnet", {}, {}, dtype="float16")


def test_failed_write_keeps_previous_file(tmp_path, mocker):
    path = save_checkpoint(sample(), tmp_path / "model.rckpt")
    before = path.read_bytes()
    mocker.patch("retcomplete.checkpoint.os.replace", side_effect=OSError("disk full"))
    changed = Checkpoint("biretnet", {"heads": 4}, {"a": np.zeros(2)})
    with pytest.raises(CheckpointError, match="disk full"):
        save_checkpoint(changed, path)
    assert path.read_bytes() == before

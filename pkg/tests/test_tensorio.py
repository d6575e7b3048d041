import numpy as np
import pytest

from multishot.tensorio import (
    TensorFormatError,
    read_tensor,
    tensor_bytes,
    tensor_from_bytes,
    write_tensor,
)


def test_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 16, 16, 3)).astype(np.float32)
    path = str(tmp_path / "t.fwtn")
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_layout():
    arr = np.zeros((2, 2), np.float32)
    blob = tensor_bytes(arr)
    assert blob[:4] == b"FWTN"
    # magic + version + rank + dims + payload + crc
    assert len(blob) == 4 + 4 + 4 + 8 + 16 + 4


def test_crc_detects_corruption():
    blob = bytearray(tensor_bytes(np.ones((4,), np.float32)))
    blob[-6] ^= 0xFF
    with pytest.raises(TensorFormatError, match="CRC"):
        tensor_from_bytes(bytes(blob))


def test_truncation_detected():
    blob = tensor_bytes(np.ones((4,), np.float32))
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(blob[:-3])


def test_bad_magic():
    with pytest.raises(TensorFormatError, match="magic"):
        tensor_from_bytes(b"XXXX" + b"\x00" * 20)

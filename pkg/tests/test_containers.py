import struct

import numpy as np
import pytest

from rpcnet import containers
from rpcnet.errors import CorruptContainerError, UnsupportedVersionError


def sample():
    return {"a": np.arange(6, dtype=np.int16).reshape(2, 3), "b": np.linspace(0, 1, 5), "c": np.array([1, 0], dtype=np.uint8)}


def test_round_trip_bit_identical(tmp_path):
    p = tmp_path / "x.bin"
    containers.write(p, "demo", {"k": 1}, sample())
    kind, meta, arrays = containers.read(p)
    assert kind == "demo" and meta == {"k": 1}
    for k, v in sample().items():
        assert arrays[k].dtype == v.dtype
        np.testing.assert_array_equal(arrays[k], v)


def test_layout_prefix():
    data = containers.encode("demo", {}, sample())
    magic, version, reserved, hlen = struct.unpack_from("<4sHHI", data)
    assert (magic, version, reserved) == (b"RPCN", 1, 0)
    assert data[12:12 + hlen].startswith(b"{")


def test_big_endian_input_stored_little_endian():
    be = np.arange(4, dtype=">f8")
    _, _, arrays = containers.decode(containers.encode("demo", {}, {"x": be}))
    assert arrays["x"].dtype.str == "<f8"
    np.testing.assert_array_equal(arrays["x"], be)


@pytest.mark.parametrize("cut", [3, 20, -1, -5])
def test_truncation_detected(cut):
    data = containers.encode("demo", {}, sample())
    with pytest.raises(CorruptContainerError):
        containers.decode(data[:cut])


def test_bit_flip_detected():
    data = bytearray(containers.encode("demo", {}, sample()))
    data[-10] ^= 0xFF
    with pytest.raises(CorruptContainerError):
        containers.decode(bytes(data))


def test_bad_magic():
    data = b"XXXX" + containers.encode("demo", {}, sample())[4:]
    with pytest.raises(CorruptContainerError):
        containers.decode(data)


def test_future_version_fails_loudly():
    data = bytearray(containers.encode("demo", {}, sample()))
    struct.pack_into("<H", data, 4, 2)
    with pytest.raises(UnsupportedVersionError):
        containers.decode(bytes(data))


def test_wrong_kind(tmp_path):
    p = tmp_path / "x.bin"
    containers.write(p, "demo", {}, {})
    with pytest.raises(CorruptContainerError):
        containers.read(p, expect_kind="trial")

import numpy as np
import pytest

from advpurify.container import MAGIC, VERSION, read_container, write_container
from advpurify.errors import ContainerFormatError, ContainerVersionError


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "floats": rng.random((3, 2, 4)).astype(np.float32),
        "ints": rng.integers(0, 10, size=7, dtype=np.int64),
    }


def test_round_trip_exact(tmp_path):
    path = tmp_path / "x.bin"
    arrays = _sample_arrays()
    write_container(path, "test-kind", {"note": "hi", "n": 3}, arrays)
    kind, meta, loaded = read_container(path)
    assert kind == "test-kind"
    assert meta == {"note": "hi", "n": 3}
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)


def test_magic_prefix_is_eight_bytes(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "k", {}, _sample_arrays())
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert len(MAGIC) == 8
    assert int.from_bytes(raw[8:12], "little") == VERSION


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "k", {}, _sample_arrays())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 20])
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "k", {}, _sample_arrays())
    raw = bytearray(path.read_bytes())
    raw[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_future_version_rejected(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "k", {}, _sample_arrays())
    raw = bytearray(path.read_bytes())
    raw[8:12] = (VERSION + 1).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerVersionError):
        read_container(path)


def test_payload_corruption_detected(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "k", {}, _sample_arrays())
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "alpha", {}, _sample_arrays())
    with pytest.raises(ContainerFormatError):
        read_container(path, expected_kind="beta")

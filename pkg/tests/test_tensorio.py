"""Binary container round trips and error handling."""

import numpy as np
import pytest

from masm_lwr import tensorio


def test_round_trip(tmp_path):
    path = tmp_path / "x.bin"
    tensors = {
        "a": np.arange(6, dtype=np.float64).reshape(2, 3),
        "b": np.array(3.5, dtype=np.float32),
        "c": np.arange(4, dtype=np.int64),
    }
    tensorio.write_container(path, b"TEST", {"note": "hi"}, tensors)
    meta, loaded = tensorio.read_container(path, b"TEST")
    assert meta == {"note": "hi"}
    assert list(loaded) == ["a", "b", "c"]
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    tensorio.write_container(path, b"TEST", {}, {"a": np.zeros(2)})
    with pytest.raises(tensorio.ContainerError):
        tensorio.read_container(path, b"OTHR")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(tensorio.ContainerError):
        tensorio.write_container(tmp_path / "x.bin", b"TEST", {},
                                 {"a": np.zeros(2, dtype=np.complex128)})


def test_write_is_byte_stable(tmp_path):
    tensors = {"a": np.arange(3, dtype=np.float64)}
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    tensorio.write_container(p1, b"TEST", {"k": 1, "z": 2}, tensors)
    tensorio.write_container(p2, b"TEST", {"z": 2, "k": 1}, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_fingerprint_tracks_content(tmp_path):
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    tensorio.write_container(p1, b"TEST", {}, {"a": np.zeros(2)})
    tensorio.write_container(p2, b"TEST", {}, {"a": np.ones(2)})
    f1 = tensorio.file_fingerprint(p1)
    assert f1 == tensorio.file_fingerprint(p1)
    assert f1 != tensorio.file_fingerprint(p2)

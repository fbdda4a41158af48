import struct

import numpy as np
import pytest

from hgprop import ukgf


def test_header_layout(tmp_path):
    path = tmp_path / "m.ukgf"
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    ukgf.write_matrix(path, data)
    raw = path.read_bytes()
    assert raw[:4] == b"UKGF"
    assert struct.unpack("<IQI", raw[4:20]) == (1, 2, 3)
    assert len(raw) == 20 + 6 * 4
    assert np.frombuffer(raw[20:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_roundtrip_and_memmap(tmp_path):
    path = tmp_path / "m.ukgf"
    data = np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32)
    ukgf.write_matrix(path, data)
    assert ukgf.read_header(path) == (5, 4)
    np.testing.assert_array_equal(ukgf.read_matrix(path), data)
    np.testing.assert_array_equal(ukgf.open_memmap(path), data)


def test_empty_matrix(tmp_path):
    path = tmp_path / "e.ukgf"
    ukgf.write_matrix(path, np.zeros((0, 3), dtype=np.float32))
    assert ukgf.read_matrix(path).shape == (0, 3)


def test_create_memmap(tmp_path):
    path = tmp_path / "w.ukgf"
    mm = ukgf.create_memmap(path, 3, 2)
    mm[:] = 7.0
    mm.flush()
    del mm
    np.testing.assert_array_equal(ukgf.read_matrix(path), np.full((3, 2), 7.0, dtype=np.float32))


@pytest.mark.parametrize("raw", [b"UKG", b"XXXX" + bytes(16), b"UKGF" + struct.pack("<IQI", 2, 0, 0),
                                 b"UKGF" + struct.pack("<IQI", 1, 2, 2) + bytes(4)])
def test_corrupt_files_rejected(tmp_path, raw):
    path = tmp_path / "bad.ukgf"
    path.write_bytes(raw)
    with pytest.raises(ukgf.UkgfError):
        ukgf.read_matrix(path)


def test_non_matrix_rejected(tmp_path):
    with pytest.raises(ukgf.UkgfError):
        ukgf.write_matrix(tmp_path / "v.ukgf", np.zeros(3))


def test_sha256_changes_with_content(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ukgf.write_matrix(a, np.zeros((1, 1)))
    ukgf.write_matrix(b, np.ones((1, 1)))
    assert ukgf.file_sha256(a) != ukgf.file_sha256(b)
    assert len(ukgf.file_sha256(a)) == 64

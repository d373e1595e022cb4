import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrefine.tensorfile import (
    MAGIC,
    TensorFileError,
    load_tensor,
    read_tensor,
    save_tensor,
    write_tensor,
)


def test_rank2_round_trip_bit_exact():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    back = read_tensor(write_tensor(arr))
    assert back.dtype == np.float32
    assert back.shape == (2, 3)
    assert arr.tobytes() == back.tobytes()


def test_write_read_and_read_write_identities():
    arr = np.random.default_rng(7).standard_normal((4, 5, 2)).astype(np.float32)
    blob = write_tensor(arr)
    assert write_tensor(read_tensor(blob)) == blob


def test_bad_magic_rejected():
    blob = b"XXXX" + write_tensor(np.zeros(3, dtype=np.float32))[4:]
    with pytest.raises(TensorFileError, match="bad magic"):
        read_tensor(blob)


def test_bad_version_rejected():
    blob = bytearray(write_tensor(np.zeros(3, dtype=np.float32)))
    blob[4] = 9
    with pytest.raises(TensorFileError, match="version"):
        read_tensor(bytes(blob))


def test_truncated_payload_rejected():
    arr = np.zeros((4, 4), dtype=np.float32)
    blob = write_tensor(arr)
    with pytest.raises(TensorFileError, match="truncated"):
        read_tensor(blob[:-4])  # 15 floats left for dims [4, 4]


def test_trailing_bytes_rejected():
    blob = write_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(TensorFileError):
        read_tensor(blob + b"\x00\x00\x00\x00")


def test_rank_limit():
    arr = np.zeros((1,) * 9, dtype=np.float32)
    with pytest.raises(TensorFileError, match="rank"):
        write_tensor(arr)
    header = MAGIC + bytes([1, 9, 0, 0])
    with pytest.raises(TensorFileError, match="rank"):
        read_tensor(header + b"\x01\x00\x00\x00" * 9)


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((3, 8)).astype(np.float32)
    path = tmp_path / "t.g4tn"
    save_tensor(path, arr)
    np.testing.assert_array_equal(load_tensor(path), arr)


@given(
    shape=st.lists(st.integers(1, 12), min_size=1, max_size=4),
    seed=st.integers(0, 2**32 - 1),
)
@settings(max_examples=80, deadline=None)
def test_random_round_trips(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    back = read_tensor(write_tensor(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_large_tensor_round_trip():
    # spec-sized stress: 10^6 elements, rank 4
    arr = np.random.default_rng(3).standard_normal((10, 100, 100, 10))
    arr = arr.astype(np.float32)
    back = read_tensor(write_tensor(arr))
    assert back.tobytes() == arr.tobytes()

import numpy as np
import pytest

from refedit.checkpoint import MAGIC, load_tensors, save_tensors
from refedit.engine import Tensor


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "a.w": rng.standard_normal((3, 4, 5)),
        "a.b": rng.standard_normal(7),
        "scalar": np.float64(3.14159),
        "weird/values": np.array([0.0, -0.0, 1e-300, 1e300, np.pi]),
    }
    path = tmp_path / "dump.tns"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert sorted(loaded) == sorted(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.shape(arr)
        assert loaded[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_accepts_tensor_values(tmp_path):
    save_tensors(tmp_path / "t.tns", {"x": Tensor([[1.0, 2.0]])})
    assert np.array_equal(load_tensors(tmp_path / "t.tns")["x"], [[1.0, 2.0]])


def test_same_contents_same_bytes(tmp_path, rng):
    arrs = {"b": rng.standard_normal(4), "a": rng.standard_normal((2, 2))}
    save_tensors(tmp_path / "one.tns", arrs)
    save_tensors(tmp_path / "two.tns", dict(reversed(list(arrs.items()))))
    assert (tmp_path / "one.tns").read_bytes() == (tmp_path / "two.tns").read_bytes()


def test_zero_size_tensor(tmp_path):
    save_tensors(tmp_path / "z.tns", {"empty": np.zeros((1, 0, 4))})
    assert load_tensors(tmp_path / "z.tns")["empty"].shape == (1, 0, 4)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tns"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_tensors(path)


def test_truncated_rejected(tmp_path, rng):
    path = tmp_path / "trunc.tns"
    save_tensors(path, {"x": rng.standard_normal(16)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_tensors(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "ver.tns"
    path.write_bytes(MAGIC + (99).to_bytes(8, "little"))
    with pytest.raises(ValueError, match="version"):
        load_tensors(path)

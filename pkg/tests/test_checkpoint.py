import numpy as np
import pytest

from latentaug.checkpoint import checkpoint_id, read_checkpoint, write_checkpoint
from latentaug.errors import FormatError


def test_roundtrip_with_header(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "layer0.w": rng.standard_normal((4, 3)).astype(np.float32),
        "layer0.b": rng.standard_normal(3).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
    }
    header = np.array([1, 4, 3], np.float32)
    path = tmp_path / "m.gelw"
    write_checkpoint(path, tensors, header=header)
    back, h = read_checkpoint(path)
    assert np.array_equal(h, header)
    assert set(back) == set(tensors)
    for name, arr in tensors.items():
        assert np.array_equal(back[name].view(np.uint32), np.asarray(arr).view(np.uint32))


def test_no_header(tmp_path):
    path = tmp_path / "m.gelw"
    write_checkpoint(path, {"x": np.ones(2, np.float32)})
    tensors, header = read_checkpoint(path)
    assert header is None
    assert np.array_equal(tensors["x"], [1.0, 1.0])


def test_bad_magic(tmp_path):
    path = tmp_path / "m.gelw"
    write_checkpoint(path, {"x": np.ones(2, np.float32)})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_truncation(tmp_path):
    path = tmp_path / "m.gelw"
    write_checkpoint(path, {"x": np.ones(50, np.float32)})
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_id_stable(tmp_path):
    path = tmp_path / "m.gelw"
    write_checkpoint(path, {"x": np.arange(3, dtype=np.float32)})
    a = checkpoint_id(path)
    write_checkpoint(path, {"x": np.arange(3, dtype=np.float32)})
    assert checkpoint_id(path) == a
    write_checkpoint(path, {"x": np.arange(1, 4, dtype=np.float32)})
    assert checkpoint_id(path) != a

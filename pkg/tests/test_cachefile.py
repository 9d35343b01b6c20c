import numpy as np
import pytest
import torch

from crossframe import cachefile
from crossframe.ditcore import VideoDiT
from conftest import small_config


def test_matrix_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((7, 5)).astype(np.float32)
    path = tmp_path / "stack.dtrk"
    cachefile.write_matrix(path, data, t=3, layer=2, kind="query")
    loaded, t, layer, kind = cachefile.read_matrix(path)
    assert (t, layer, kind) == (3, 2, "query")
    np.testing.assert_array_equal(loaded, data)


def test_matrix_header_layout(tmp_path):
    path = tmp_path / "m.dtrk"
    cachefile.write_matrix(path, np.zeros((2, 3), dtype=np.float32), 1, 0, "cost")
    raw = path.read_bytes()
    assert raw[:5] == b"DTRK1"
    assert int.from_bytes(raw[5:9], "little") == 1          # t
    assert int.from_bytes(raw[9:13], "little") == 0         # layer
    assert raw[13] == cachefile.KIND_CODES["cost"]
    assert int.from_bytes(raw[14:22], "little") == 2        # rows
    assert int.from_bytes(raw[22:30], "little") == 3        # cols
    assert len(raw) == 30 + 2 * 3 * 4


def test_matrix_rejects_corruption(tmp_path):
    path = tmp_path / "m.dtrk"
    cachefile.write_matrix(path, np.zeros((2, 2), dtype=np.float32), 0, 0, "key")
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    bad = tmp_path / "bad.dtrk"
    bad.write_bytes(bytes(raw))
    with pytest.raises(cachefile.CacheFormatError):
        cachefile.read_matrix(bad)
    truncated = tmp_path / "short.dtrk"
    truncated.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(cachefile.CacheFormatError):
        cachefile.read_matrix(truncated)
    with pytest.raises(ValueError):
        cachefile.write_matrix(tmp_path / "k.dtrk", np.zeros((2, 2)), 0, 0, "nope")


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config()
    model = VideoDiT(cfg, seed=3)
    path = tmp_path / "model.dtrk"
    cachefile.save_checkpoint(path, model)
    restored = VideoDiT(cfg, seed=99)
    restored.load_state_dict(cachefile.load_checkpoint(path))
    for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()),
                                  sorted(restored.state_dict().items())):
        assert ka == kb
        assert torch.equal(va, vb)


def test_checkpoint_rejects_matrix_file(tmp_path):
    path = tmp_path / "m.dtrk"
    cachefile.write_matrix(path, np.zeros((2, 2), dtype=np.float32), 0, 0, "query")
    with pytest.raises(cachefile.CacheFormatError):
        cachefile.load_checkpoint(path)

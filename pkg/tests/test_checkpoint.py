import struct

import numpy as np
import pytest

from stylebend import checkpoint as ck
from stylebend.model import FewShotModel


def _entries():
    return {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(2.5), "c": np.zeros((0, 4))}


def test_round_trip(tmp_path):
    ck.save(tmp_path / "x.ckpt", _entries())
    out = ck.load(tmp_path / "x.ckpt")
    for k, v in _entries().items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        np.testing.assert_array_equal(out[k], v)


def test_layout_example():
    blob = ck.encode({"w": np.array([1.0], dtype=np.float32)})
    assert blob == (b"DRAD" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
                    + struct.pack("<III", 0, 1, 1) + struct.pack("<f", 1.0))


def test_rejects_bad_magic():
    with pytest.raises(ck.CheckpointError):
        ck.decode(b"NOPE" + bytes(8))


def test_rejects_version():
    blob = bytearray(ck.encode(_entries()))
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode(bytes(blob))


def test_rejects_truncation_and_trailing():
    blob = ck.encode(_entries())
    for cut in (len(blob) - 1, 20, 13):
        with pytest.raises(ck.CheckpointError):
            ck.decode(blob[:cut])
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.decode(blob + b"\0")


def test_rejects_unknown_dtype():
    with pytest.raises(ck.CheckpointError):
        ck.encode({"i": np.arange(3)})
    blob = bytearray(ck.encode({"w": np.zeros(1, np.float32)}))
    blob[17:21] = struct.pack("<I", 9)
    with pytest.raises(ck.CheckpointError):
        ck.decode(bytes(blob))


def test_model_round_trip_is_bit_exact(tmp_path):
    m = FewShotModel.create(seed=4)
    m.bank.set(0, np.linspace(0, 1, 16))
    ck.save(tmp_path / "m.ckpt", m.to_entries())
    fresh = FewShotModel.create(seed=99)
    fresh.load_entries(ck.load(tmp_path / "m.ckpt"))
    a, b = m.to_entries(), fresh.to_entries()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])

import io
import struct

import numpy as np
import pytest

from mmdistill.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mmdistill.denoiser import ArchDescriptor, init_params
from mmdistill.params import DualParamVector, LayoutError, ParamVector, make_layout


def test_layout_offsets_contiguous():
    layout = make_layout([("a", (2, 3)), ("b", (4,)), ("c", ())])
    assert [e.offset for e in layout] == [0, 6, 10]
    pv = ParamVector(np.arange(11.0), layout)
    np.testing.assert_array_equal(pv["a"], [[0, 1, 2], [3, 4, 5]])
    assert pv["c"].shape == ()


def test_layout_must_cover_data():
    with pytest.raises(LayoutError):
        ParamVector(np.zeros(5), [("a", (2, 3))])


def test_duplicate_names_rejected():
    with pytest.raises(LayoutError):
        make_layout([("a", (1,)), ("a", (2,))])


def test_views_write_through():
    pv = ParamVector.zeros([("w", (2, 2)), ("b", (2,))])
    pv["w"] = np.eye(2)
    pv["b"][1] = 5.0
    np.testing.assert_array_equal(pv.data, [1, 0, 0, 1, 0, 5])


def test_dual_layout_check():
    a = ParamVector.zeros([("w", (2,))])
    with pytest.raises(LayoutError):
        DualParamVector(a, ParamVector.zeros([("v", (2,))]))


def test_byte_layout_is_exact():
    pv = ParamVector(np.array([1.0, -2.0, 0.5]), [("ab", (1, 2)), ("c", (1,))])
    buf = io.BytesIO()
    pv.write(buf)
    expected = (
        b"MMD1" + struct.pack("<I", 2)
        + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 2) + struct.pack("<2I", 1, 2)
        + struct.pack("<I", 1) + b"c" + struct.pack("<I", 1) + struct.pack("<I", 1)
        + struct.pack("<3d", 1.0, -2.0, 0.5)
    )
    assert buf.getvalue() == expected


def test_roundtrip_and_bad_magic():
    rng = np.random.default_rng(0)
    pv = ParamVector(rng.normal(size=7), [("x", (7,))])
    buf = io.BytesIO()
    pv.write(buf)
    buf.seek(0)
    assert ParamVector.read(buf) == pv
    with pytest.raises(LayoutError):
        ParamVector.read(io.BytesIO(b"XXXX" + buf.getvalue()[4:]))


def test_checkpoint_roundtrip(tmp_path):
    arch = ArchDescriptor(hidden_dims=(8, 8), num_classes=3)
    p = init_params(arch, np.random.default_rng(0))
    v = p.like(np.abs(np.random.default_rng(1).normal(size=len(p))))
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, Checkpoint(arch, p, v, {"step": 12}))
    back = load_checkpoint(path)
    assert back.arch == arch and back.params == p and back.second_moment == v
    assert back.meta == {"step": 12}
    save_checkpoint(path, Checkpoint(arch, p))
    assert load_checkpoint(path).second_moment is None

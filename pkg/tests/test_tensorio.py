import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segnode import tensorio
from segnode.checkpoint import CheckpointError, load_checkpoint, read_kv, save_checkpoint
from segnode.model import NetworkConfig, make_model
from segnode.ode import SolverConfig

SMALL = NetworkConfig(branch_channels=(4, 4, 4, 4), num_classes=2, input_size=(16, 16),
                      norm_groups=2, modules_in_dynamics=1, blocks_per_branch=1)


def test_header_layout():
    buf = tensorio.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"SGNT"
    assert struct.unpack_from("<BBB", buf, 4) == (1, 0, 2)
    assert struct.unpack_from("<2I", buf, 7) == (2, 3)
    assert np.frombuffer(buf[15:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]
    assert struct.unpack_from("<BBB", tensorio.encode(np.zeros(1)), 4) == (1, 1, 1)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(dtype=st.sampled_from([np.float32, np.float64]),
                  shape=hnp.array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5),
                  elements=st.floats(allow_nan=True, width=32)))
def test_bit_exact_roundtrip(arr):
    out = tensorio.decode(tensorio.encode(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_decode_rejects_corruption():
    good = tensorio.encode(np.ones((2, 2)))
    with pytest.raises(tensorio.TensorFormatError, match="magic"):
        tensorio.decode(b"XXXX" + good[4:])
    with pytest.raises(tensorio.TensorFormatError, match="version"):
        tensorio.decode(good[:4] + b"\x02" + good[5:])
    with pytest.raises(tensorio.TensorFormatError, match="dtype"):
        tensorio.decode(good[:5] + b"\x07" + good[6:])
    with pytest.raises(tensorio.TensorFormatError, match="payload"):
        tensorio.decode(good[:-1])
    with pytest.raises(TypeError):
        tensorio.encode(np.zeros(2, dtype=np.int32))


def test_save_load(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4))
    tensorio.save(tmp_path / "a.sgnt", arr)
    assert np.array_equal(tensorio.load(tmp_path / "a.sgnt"), arr)


def test_checkpoint_roundtrip(tmp_path):
    solver = SolverConfig("dopri5", rtol=1e-4, atol=1e-6)
    model = make_model("segnode", SMALL, seed=4, dtype=np.float64, solver=solver)
    save_checkpoint(tmp_path / "ck", model)
    back = load_checkpoint(tmp_path / "ck")
    assert back.cfg == SMALL and back.solver == solver and back.kind == "segnode"
    assert back.params.names() == model.params.names()
    assert back.params.flatten().tobytes() == model.params.flatten().tobytes()
    kv = read_kv(tmp_path / "ck" / "manifest.txt")
    assert kv["config.branch_channels"] == "4,4,4,4"
    assert kv["param.stem.conv1.weight"].endswith(".sgnt")


def test_checkpoint_rejects_shape_mismatch_naming_tensor(tmp_path):
    model = make_model("baseline", SMALL, dtype=np.float32)
    save_checkpoint(tmp_path / "ck", model)
    fname = read_kv(tmp_path / "ck" / "manifest.txt")["param.heads.b1.weight"]
    tensorio.save(tmp_path / "ck" / fname, np.zeros((3, 4, 1, 1), dtype=np.float32))
    with pytest.raises(CheckpointError, match=r"heads\.b1\.weight"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_rejects_bad_magic_and_missing(tmp_path):
    model = make_model("segnode", SMALL)
    save_checkpoint(tmp_path / "ck", model)
    fname = read_kv(tmp_path / "ck" / "manifest.txt")["param.stem.norm1.gamma"]
    path = tmp_path / "ck" / fname
    path.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match=r"stem\.norm1\.gamma.*magic"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from etclip.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, CheckpointError, VersionError,
                               decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint)


def _sample():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={"kind": "run", "meta": {"epoch": 3}},
        tensors={"agent.w": rng.normal(size=(3, 4)).astype(np.float32),
                 "agent.s": np.array(1.5, dtype=np.float32),
                 "dualenc.b": rng.normal(size=(5,)).astype(np.float32)},
        rng_state={"bit_generator": "PCG64", "state": {"state": 2**100 + 7, "inc": 3}},
    )


def test_header_layout():
    data = encode_checkpoint(_sample())
    assert data[:4] == MAGIC == b"ETCP"
    assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_roundtrip_is_bit_exact(tmp_path):
    ck = _sample()
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "c.etcp"))
    assert back.config == ck.config and back.rng_state == ck.rng_state
    assert set(back.tensors) == set(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=5),
              elements=st.floats(width=32, allow_nan=False)))
def test_roundtrip_property(arr):
    back = decode_checkpoint(encode_checkpoint(Checkpoint({}, {"x": arr}, {})))
    assert back.tensors["x"].shape == arr.shape
    assert back.tensors["x"].tobytes() == arr.tobytes()


def test_encoding_is_deterministic():
    assert encode_checkpoint(_sample()) == encode_checkpoint(_sample())


def test_wrong_version_is_rejected():
    data = bytearray(encode_checkpoint(_sample()))
    data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(data))


def test_truncated_file_rejected():
    data = encode_checkpoint(_sample())
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])


def test_corrupt_payload_rejected():
    data = bytearray(encode_checkpoint(_sample()))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + encode_checkpoint(_sample())[4:])


def test_sections():
    ck = _sample()
    assert set(ck.section("agent")) == {"w", "s"}
    assert ck.has_section("dualenc") and not ck.without("dualenc").has_section("dualenc")


def test_save_leaves_no_temp_file(tmp_path):
    save_checkpoint(_sample(), tmp_path / "c.etcp")
    assert [p.name for p in tmp_path.iterdir()] == ["c.etcp"]

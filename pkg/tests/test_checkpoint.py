import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starchnet.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from starchnet.errors import CheckpointError, CheckpointVersionError
from starchnet.models import ModelSpec, build_resnet18, model_from_checkpoint
from starchnet.tensor import Tensor, no_grad


def sample():
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32), "b": rng.standard_normal(4)}
    return Checkpoint({"epoch": 3, "note": "µ"}, tensors)


def test_round_trip_is_bit_exact(tmp_path):
    ckpt = sample()
    save_checkpoint(ckpt, None, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.metadata == ckpt.metadata
    assert list(back.tensors) == list(ckpt.tensors)
    for name, arr in ckpt.tensors.items():
        assert back.tensors[name].dtype == arr.dtype
        assert back.tensors[name].tobytes() == arr.tobytes()


def test_serialization_is_deterministic():
    assert sample().to_bytes() == sample().to_bytes()


def test_header_layout():
    blob = sample().to_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<I", blob, 4)[0] == FORMAT_VERSION


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 10_000))
def test_any_flipped_byte_is_detected(pos):
    blob = bytearray(sample().to_bytes())
    pos %= len(blob)
    pos = max(pos, 8)
    blob[pos] ^= 0x40
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(blob))


def test_flipped_tensor_byte_reports_crc():
    blob = bytearray(sample().to_bytes())
    blob[-10] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC32"):
        Checkpoint.from_bytes(bytes(blob))


def test_wrong_magic():
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"PK\x03\x04" + sample().to_bytes()[4:])


def test_future_version_is_refused():
    blob = bytearray(sample().to_bytes())
    blob[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError, match=str(FORMAT_VERSION + 1)):
        Checkpoint.from_bytes(bytes(blob))


def test_truncation_reports_offset():
    blob = sample().to_bytes()
    with pytest.raises(CheckpointError, match="offset"):
        Checkpoint.from_bytes(blob[: len(blob) // 2])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_atomic_write_leaves_no_temp_file(tmp_path):
    save_checkpoint(sample(), None, tmp_path / "c.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]


def test_model_round_trip_gives_identical_outputs(tmp_path):
    spec = ModelSpec(base_width=4)
    model = build_resnet18(spec, np.random.default_rng(0)).eval()
    save_checkpoint(model, {"architecture": spec.to_dict()}, tmp_path / "m.ckpt")
    restored = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt")).eval()
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 224, 224)).astype(np.float32))
    with no_grad():
        assert np.array_equal(model(x).data, restored(x).data)

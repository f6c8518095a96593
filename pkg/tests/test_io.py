import struct
import zlib

import numpy as np
import pytest

from logdesc.geometry import RigidTransform, axis_angle_matrix
from logdesc.io import (
    CheckpointError,
    CheckpointVersionError,
    CloudParseError,
    CorruptCheckpointError,
    checkpoint_bytes,
    key_value_block,
    parse_checkpoint,
    read_checkpoint,
    read_cloud,
    read_transform_record,
    transform_record,
    write_checkpoint,
    write_cloud,
    write_json,
)


def test_off_three_vertices(tmp_path):
    p = tmp_path / "tri.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1.5 0\n3 0 1 2\n")
    np.testing.assert_array_equal(read_cloud(p).points, [[0, 0, 0], [1, 0, 0], [0, 1.5, 0]])


def test_off_counts_on_header_line(tmp_path):
    p = tmp_path / "a.off"
    p.write_text("OFF 2 0 0\n1 2 3\n4 5 6\n")
    assert len(read_cloud(p)) == 2


def test_ply_skips_extra_properties(tmp_path):
    p = tmp_path / "c.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty uchar red\nproperty float x\n"
        "property float y\nproperty float z\nproperty uchar green\nend_header\n"
        "255 1 2 3 0\n10 4 5 6 7\n"
    )
    np.testing.assert_array_equal(read_cloud(p).points, [[1, 2, 3], [4, 5, 6]])


def test_binary_ply_rejected(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n")
    with pytest.raises(CloudParseError, match="ascii"):
        read_cloud(p)


def test_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(1000, 3))
    for name in ("a.xyz", "a.ply", "a.off"):
        write_cloud(pts, tmp_path / name)
        np.testing.assert_allclose(read_cloud(tmp_path / name).points, pts, atol=1e-6)


@pytest.mark.parametrize(
    "name, text, line",
    [
        ("bad.xyz", "1 2 3\n4 five 6\n", 2),
        ("short.xyz", "1 2 3\n4 5\n", 2),
        ("trunc.off", "OFF\n3 0 0\n0 0 0\n", 3),
        ("trunc.ply", "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n", 8),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path, name, text, line):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(CloudParseError) as err:
        read_cloud(p)
    assert f":{line}:" in str(err.value) or f"line {line}" in str(err.value)


def test_huge_claimed_count_does_not_allocate(tmp_path):
    p = tmp_path / "big.off"
    p.write_text("OFF\n4000000000 0 0\n0 0 0\n")
    with pytest.raises(CloudParseError, match="truncated"):
        read_cloud(p)
    # claim a 2^31-element tensor, then fix the CRC so only truncation can catch it
    body = checkpoint_bytes({"w": np.zeros(1, np.float32)})[:-4]
    body = body[:21] + struct.pack("<I", 2**31) + body[25:]
    with pytest.raises(CorruptCheckpointError, match="truncated"):
        parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b/c": rng.normal(size=7).astype(np.float32), "s": np.float32(2.5).reshape(())}
    write_checkpoint(tensors, tmp_path / "m.logd")
    back = read_checkpoint(tmp_path / "m.logd")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes() and back[k].shape == np.shape(tensors[k])


def test_checkpoint_layout():
    blob = checkpoint_bytes({"w": np.array([1.0, 2.0], np.float32)})
    assert blob[:4] == b"LOGD"
    assert struct.unpack_from("<III", blob, 4) == (1, 1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,)
    assert blob[16:17] == b"w"
    assert struct.unpack_from("<II", blob, 17) == (1, 2)
    assert np.frombuffer(blob[25:33], "<f4").tolist() == [1.0, 2.0]
    assert len(blob) == 37


def test_flipped_byte_fails_crc():
    blob = bytearray(checkpoint_bytes({"w": np.arange(6, dtype=np.float32)}))
    blob[25] ^= 0x01
    with pytest.raises(CorruptCheckpointError, match="CRC"):
        parse_checkpoint(bytes(blob))


def test_empty_model_checkpoint(tmp_path):
    write_checkpoint({}, tmp_path / "e.logd")
    assert len(read_checkpoint(tmp_path / "e.logd")) == 0


def test_version_mismatch():
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(checkpoint_bytes({}, version=2))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOPE" + bytes(20))


def test_checkpoint_writer_deterministic():
    t = {"x": np.linspace(0, 1, 10, dtype=np.float32)}
    assert checkpoint_bytes(t) == checkpoint_bytes(dict(t))


# -------------------------------------------------------------- records


def test_transform_record_round_trip(tmp_path):
    t = RigidTransform(axis_angle_matrix([1, 2, 3], 0.7), np.array([0.1, -0.2, 0.3]))
    write_json(transform_record(t, "fsr", {"L_R": 0.5}, seed=3), tmp_path / "t.json")
    back, rec = read_transform_record(tmp_path / "t.json")
    np.testing.assert_allclose(back.matrix(), t.matrix(), atol=1e-15)
    assert rec["estimator"] == "fsr" and rec["seed"] == 3 and rec["metrics"]["L_R"] == 0.5


def test_key_value_block():
    text = key_value_block({"b": 1, "a": {"x": 0.5}})
    assert text.splitlines() == ["a.x = 0.5", "b = 1"]


def test_failed_write_leaves_no_file(tmp_path):
    with pytest.raises(TypeError):
        write_json({"bad": object()}, tmp_path / "out.json")
    assert list(tmp_path.iterdir()) == []

import json
import struct

import numpy as np
import pytest

from hotloc.geometry import PointCloud, Pose
from hotloc.hotformer import init_params, toy_config
from hotloc.io import (
    FormatError,
    IntegrityError,
    canonical_json,
    read_cloud,
    read_csv_cloud,
    read_descriptors,
    read_weights,
    write_cloud,
    write_descriptors,
    write_weights,
)


def test_cloud_roundtrip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(17, 3))
    pose = Pose((1.0, 2.0, 0.5), (np.cos(0.2), 0.0, 0.0, np.sin(0.2)))
    write_cloud(tmp_path / "a.hopc", PointCloud(pts, "abc", pose))
    back = read_cloud(tmp_path / "a.hopc")
    np.testing.assert_array_equal(back.points, pts)
    assert back.source_id == "abc"
    assert back.pose.translation == pose.translation
    raw = (tmp_path / "a.hopc").read_bytes()
    assert raw[:4] == b"HOPC" and struct.unpack_from("<IQ", raw, 4) == (1, 17)


def test_cloud_without_sidecar(tmp_path):
    write_cloud(tmp_path / "b.hopc", PointCloud(np.zeros((2, 3)), "x"))
    (tmp_path / "b.hopc.json").unlink()
    back = read_cloud(tmp_path / "b.hopc")
    assert back.source_id == "b" and back.pose == Pose()


def test_cloud_truncated(tmp_path):
    write_cloud(tmp_path / "c.hopc", PointCloud(np.ones((4, 3)), "c"))
    raw = (tmp_path / "c.hopc").read_bytes()
    (tmp_path / "c.hopc").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "c.hopc")
    (tmp_path / "d.hopc").write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_cloud(tmp_path / "d.hopc")


def test_csv_cloud(tmp_path):
    (tmp_path / "p.csv").write_text("1,2,3\n4,5,6\n")
    pc = read_csv_cloud(tmp_path / "p.csv")
    assert pc.points.tolist() == [[1, 2, 3], [4, 5, 6]] and pc.source_id == "p"
    (tmp_path / "q.csv").write_text("1,2\n")
    with pytest.raises(FormatError):
        read_csv_cloud(tmp_path / "q.csv")


def test_descriptor_roundtrip(tmp_path):
    d = np.random.default_rng(1).normal(size=(5, 7))
    write_descriptors(tmp_path / "d.hodc", [9, 3, 4, 100, 0], d)
    ids, back = read_descriptors(tmp_path / "d.hodc")
    assert ids.tolist() == [9, 3, 4, 100, 0]
    np.testing.assert_array_equal(back, d)
    with pytest.raises(ValueError):
        write_descriptors(tmp_path / "e.hodc", [1], d)


def test_weights_roundtrip_and_canonical_config(tmp_path):
    cfg = toy_config()
    params = init_params(cfg, seed=3)
    doc = {"seed": 3, "model": cfg.to_dict()}
    write_weights(tmp_path / "w.howt", doc, params)
    back_doc, text, tensors = read_weights(tmp_path / "w.howt")
    assert back_doc == doc
    assert text == canonical_json(doc)
    assert canonical_json(json.loads(text)) == text
    assert list(tensors) == list(params)
    for name, p in params.items():
        np.testing.assert_array_equal(tensors[name], p.data)


def test_weights_crc_detects_any_flipped_byte(tmp_path):
    write_weights(tmp_path / "w.howt", {"a": 1}, {"x": np.arange(6.0).reshape(2, 3)})
    raw = bytearray((tmp_path / "w.howt").read_bytes())
    for pos in range(0, len(raw), 7):
        bad = bytearray(raw)
        bad[pos] ^= 0x10
        (tmp_path / "bad.howt").write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            read_weights(tmp_path / "bad.howt")
    bad = bytearray(raw)
    bad[40] ^= 0xFF
    (tmp_path / "bad.howt").write_bytes(bytes(bad))
    with pytest.raises(IntegrityError):
        read_weights(tmp_path / "bad.howt")


def test_weights_truncated(tmp_path):
    write_weights(tmp_path / "w.howt", {}, {"x": np.ones(3)})
    raw = (tmp_path / "w.howt").read_bytes()
    (tmp_path / "t.howt").write_bytes(raw[:-10])
    with pytest.raises(IntegrityError):
        read_weights(tmp_path / "t.howt")

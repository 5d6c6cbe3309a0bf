import json
import struct

import numpy as np
import pytest
import torch

from densernet.errors import FormatError
from densernet.io import (CHECKPOINT_MAGIC, FeatureRecord, load_checkpoint, load_store, read_checkpoint, read_index,
                          read_record, record_bytes, save_checkpoint, write_index, write_record)
from densernet.model import DenserNet, images_to_batch
from densernet.network import NetworkConfig


def test_checkpoint_roundtrip(tmp_path):
    m = DenserNet(NetworkConfig.tiny(seed=2, ablation="hb+mb"))
    save_checkpoint(m, tmp_path / "m.ckpt", meta={"epoch": 4})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"epoch": 4} and loaded.config == m.config
    for (k, a), (_, b) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_layout_is_little_endian_float32(tmp_path):
    m = DenserNet(NetworkConfig.tiny())
    save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC and raw[4] == 1
    (n,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + n])
    first = header["tensors"][0]
    count = int(np.prod(first["shape"]))
    values = np.frombuffer(raw[9 + n: 9 + n + 4 * count], dtype="<f4")
    assert np.array_equal(values, m.state_dict()[first["name"]].numpy().ravel())
    total = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    assert len(raw) == 9 + n + 4 * total


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(DenserNet(NetworkConfig.tiny()), tmp_path / "a.ckpt")
    save_checkpoint(DenserNet(NetworkConfig.tiny()), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_corrupt_checkpoints(tmp_path, damage):
    p = tmp_path / "m.ckpt"
    save_checkpoint(DenserNet(NetworkConfig.tiny()), p)
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-10]
    else:
        raw += b"\0"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_checkpoint(p)


def test_checkpoint_config_mismatch(tmp_path):
    save_checkpoint(DenserNet(NetworkConfig.tiny()), tmp_path / "m.ckpt")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.ckpt", expect=NetworkConfig.tiny(ablation="hb"))


def _record(image_id="img"):
    m = DenserNet(NetworkConfig.tiny()).eval()
    x = images_to_batch([np.random.default_rng(0).random((64, 64, 3))])
    with torch.no_grad():
        d = m.decode(x, [image_id], max_keypoints=8)[0]
    return FeatureRecord.from_decoded(d, (64, 64))


def test_record_roundtrip(tmp_path):
    rec = _record()
    write_record(rec, tmp_path / "r.rec")
    back = read_record(tmp_path / "r.rec")
    assert back.image_id == "img" and back.grid_shape == (32, 32) and back.stride == 2
    assert back.image_shape == (64, 64)
    assert np.array_equal(back.scores, rec.scores.astype(np.float32))
    assert np.array_equal(back.global_vector, rec.global_vector.astype(np.float32))
    assert len(back.keypoints) == len(rec.keypoints) > 0
    for a, b in zip(rec.keypoints, back.keypoints):
        assert a.grid == b.grid and a.pixel == b.pixel and a.channel == b.channel
        assert np.allclose(a.descriptor, b.descriptor, atol=1e-7)


def test_record_bytes_deterministic():
    assert record_bytes(_record()) == record_bytes(_record())


def test_record_bad_magic(tmp_path):
    p = tmp_path / "r.rec"
    p.write_bytes(b"JUNK" + record_bytes(_record())[4:])
    with pytest.raises(FormatError, match="magic"):
        read_record(p)


def test_store_index_and_missing(tmp_path):
    (tmp_path / "records").mkdir()
    write_record(_record("a"), tmp_path / "records/a.rec")
    write_index(tmp_path, {"a": "records/a.rec", "b": "records/b.rec"})
    assert read_index(tmp_path) == {"a": "records/a.rec", "b": "records/b.rec"}
    assert set(load_store(tmp_path, ["a"])) == {"a"}
    with pytest.raises(FormatError, match="'b'"):
        load_store(tmp_path, ["a", "b", ])
    with pytest.raises(FormatError):
        read_index(tmp_path / "records")

"""Binary checkpoint and feature-store formats.

Both are little-endian. A file starts with a 4-byte magic and a version byte,
followed by a length-prefixed JSON header and raw float32 arrays.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .decoder import DecodedImage, Keypoint
from .errors import FormatError
from .model import DenserNet
from .network import NetworkConfig

CHECKPOINT_MAGIC = b"DNCK"
CHECKPOINT_VERSION = 1
RECORD_MAGIC = b"DNFR"
RECORD_VERSION = 1
INDEX_NAME = "index.json"


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def header(self, magic: bytes, version: int) -> dict:
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        v = self.take(1)[0]
        if v != version:
            raise FormatError(f"{self.path}: unsupported version {v}")
        (n,) = struct.unpack("<I", self.take(4))
        try:
            return json.loads(self.take(n))
        except json.JSONDecodeError as e:
            raise FormatError(f"{self.path}: corrupt header ({e})") from None

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    h = _dumps(header)
    return magic + bytes([version]) + struct.pack("<I", len(h)) + h + payload


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: DenserNet, path, meta: dict | None = None) -> None:
    """Config, metadata and every named parameter/buffer as float32, in state-dict order."""
    state = model.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {"config": model.config.to_dict(), "meta": meta or {}, "tensors": tensors}
    payload = b"".join(_f32(v.detach().cpu().numpy()) for v in state.values())
    Path(path).write_bytes(_pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload))


def read_checkpoint(path) -> tuple[NetworkConfig, dict[str, np.ndarray], dict]:
    r = _Reader(Path(path).read_bytes(), path)
    header = r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        config = NetworkConfig.from_dict(header["config"])
        arrays = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arrays[t["name"]] = r.floats(count).reshape(t["shape"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed checkpoint header ({e})") from None
    r.done()
    return config, arrays, header.get("meta", {})


def load_checkpoint(path, dtype=torch.float32, expect: NetworkConfig | None = None) -> tuple[DenserNet, dict]:
    config, arrays, meta = read_checkpoint(path)
    if expect is not None and expect.to_dict() != config.to_dict():
        raise FormatError(f"{path}: checkpoint config does not match the requested network")
    model = DenserNet(config).to(dtype)
    state = model.state_dict()
    if set(state) != set(arrays):
        raise FormatError(f"{path}: parameter names differ from the network built from its config")
    model.load_state_dict({k: torch.from_numpy(arrays[k]).to(dtype) for k in state})
    model.eval()
    return model, meta


# --------------------------------------------------------------------------
# feature store

@dataclass
class FeatureRecord:
    image_id: str
    grid_shape: tuple[int, int]
    stride: int
    scores: np.ndarray  # (h, w) detection field
    keypoints: list[Keypoint]
    global_vector: np.ndarray
    global_degenerate: bool = False
    image_shape: tuple[int, int] = field(default=(0, 0))

    @classmethod
    def from_decoded(cls, d: DecodedImage, image_shape: tuple[int, int]) -> FeatureRecord:
        return cls(d.image_id, tuple(d.grid_shape), d.stride, d.detection.scores.detach().cpu().numpy(),
                   list(d.keypoints), d.global_descriptor.vector.detach().cpu().numpy(),
                   bool(d.global_descriptor.degenerate), tuple(image_shape))


def record_bytes(rec: FeatureRecord) -> bytes:
    n = len(rec.keypoints[0].descriptor) if rec.keypoints else 0
    header = {
        "image_id": rec.image_id, "grid_shape": list(rec.grid_shape), "stride": rec.stride,
        "image_shape": list(rec.image_shape), "n_keypoints": len(rec.keypoints), "descriptor_dim": n,
        "global_dim": int(rec.global_vector.size), "global_degenerate": rec.global_degenerate,
    }
    kp_rows = np.array([[k.grid[0], k.grid[1], k.pixel[0], k.pixel[1], k.score, k.channel] for k in rec.keypoints],
                       dtype=np.float64).reshape(-1, 6)
    kp_desc = np.array([k.descriptor for k in rec.keypoints], dtype=np.float64).reshape(-1, n)
    payload = _f32(rec.scores) + _f32(kp_rows) + _f32(kp_desc) + _f32(rec.global_vector)
    return _pack(RECORD_MAGIC, RECORD_VERSION, header, payload)


def write_record(rec: FeatureRecord, path) -> None:
    Path(path).write_bytes(record_bytes(rec))


def read_record(path) -> FeatureRecord:
    r = _Reader(Path(path).read_bytes(), path)
    h = r.header(RECORD_MAGIC, RECORD_VERSION)
    gh, gw = h["grid_shape"]
    scores = r.floats(gh * gw).reshape(gh, gw)
    k, n = h["n_keypoints"], h["descriptor_dim"]
    rows = r.floats(6 * k).reshape(k, 6)
    desc = r.floats(k * n).reshape(k, n)
    g = r.floats(h["global_dim"])
    r.done()
    kps = [Keypoint((int(row[0]), int(row[1])), (float(row[2]), float(row[3])), float(row[4]), int(row[5]), d)
           for row, d in zip(rows, desc)]
    return FeatureRecord(h["image_id"], (gh, gw), h["stride"], scores, kps, g, h["global_degenerate"],
                         tuple(h["image_shape"]))


def write_index(root, mapping: dict[str, str]) -> None:
    body = {"schema_version": RECORD_VERSION, "records": dict(sorted(mapping.items()))}
    (Path(root) / INDEX_NAME).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def read_index(root) -> dict[str, str]:
    path = Path(root) / INDEX_NAME
    if not path.exists():
        raise FormatError(f"{root}: not a feature store (no {INDEX_NAME})")
    body = json.loads(path.read_text())
    if body.get("schema_version") != RECORD_VERSION:
        raise FormatError(f"{path}: unsupported schema version {body.get('schema_version')}")
    return body["records"]


def load_store(root, ids=None) -> dict[str, FeatureRecord]:
    """Load records by id; raises FormatError listing ids the index lacks or whose files are missing."""
    root = Path(root)
    index = read_index(root)
    ids = sorted(index) if ids is None else list(ids)
    missing = [i for i in ids if i not in index or not (root / index[i]).exists()]
    if missing:
        raise FormatError(f"feature store {root} is missing records: {missing}")
    return {i: read_record(root / index[i]) for i in ids}

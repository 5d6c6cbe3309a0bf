"""Geo-tagged manifests, triplet mining, and the synthetic city generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .geo import haversine_matrix, offset_to_latlon

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "db", "query")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    lat: float
    lon: float
    dynamic_score: float = 0.0
    split: str = "train"

    def validate(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("entry id must be a non-empty string")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"entry {self.id!r}: coordinates ({self.lat}, {self.lon}) out of range")
        if not 0.0 <= self.dynamic_score <= 1.0:
            raise ValidationError(f"entry {self.id!r}: dynamic_score {self.dynamic_score} not in [0, 1]")
        if self.split not in SPLITS:
            raise ValidationError(f"entry {self.id!r}: unknown split {self.split!r}")

    @property
    def latlon(self) -> tuple[float, float]:
        return (self.lat, self.lon)


@dataclass(frozen=True)
class Triplet:
    query_id: str
    positive_id: str
    negative_id: str


@dataclass(frozen=True)
class PairRecord:
    image1: str
    image2: str
    homography: np.ndarray  # maps image1 pixel (x, y) to image2 pixel
    photometric_tag: str = "none"

    def to_dict(self) -> dict:
        return {"image1": self.image1, "image2": self.image2,
                "homography": [float(v) for v in np.asarray(self.homography).reshape(-1)],
                "photometric_tag": self.photometric_tag}

    @classmethod
    def from_dict(cls, d: dict) -> PairRecord:
        H = np.asarray(d["homography"], dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(H)) <= 1e-9:
            raise ValidationError(f"pair {d['image1']}->{d['image2']}: singular homography")
        return cls(d["image1"], d["image2"], H, d.get("photometric_tag", "none"))


# --------------------------------------------------------------------------
# manifests

def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    fields = set(ManifestEntry.__dataclass_fields__)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise ValueError("not a JSON object")
                raw.pop("schema_version", None)
                missing = {"id", "image_path", "lat", "lon"} - set(raw)
                extra = set(raw) - fields
                if missing or extra:
                    raise ValueError(f"missing fields {sorted(missing)}, unknown fields {sorted(extra)}")
                entry = ManifestEntry(
                    id=str(raw["id"]), image_path=str(raw["image_path"]),
                    lat=float(raw["lat"]), lon=float(raw["lon"]),
                    dynamic_score=float(raw.get("dynamic_score", 0.0)),
                    split=str(raw.get("split", "train")),
                )
            except (ValueError, TypeError, KeyError) as e:
                raise ValidationError(f"{path}: line {lineno}: malformed entry ({e})") from e
            entry.validate()
            if entry.id in seen:
                raise ValidationError(f"{path}: line {lineno}: duplicate id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **asdict(e)}, sort_keys=True) + "\n")


def write_pairs(records: Sequence[PairRecord], path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "pairs": [r.to_dict() for r in records]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_pairs(path) -> list[PairRecord]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [PairRecord.from_dict(d) for d in doc["pairs"]]


def write_triplets(triplets: Sequence[Triplet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, **asdict(t)}, sort_keys=True) + "\n")


def load_triplets(path) -> list[Triplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(Triplet(d["query_id"], d["positive_id"], d["negative_id"]))
    return out


# --------------------------------------------------------------------------
# mining

def mine_triplets(manifest: Sequence[ManifestEntry], features: Mapping[str, np.ndarray] | None = None,
                  pos_radius_m: float = 10.0, neg_radius_m: float = 25.0, triplets_per_query: int = 4,
                  max_dynamic: float = 0.2, seed: int = 0, split: str | None = "train",
                  hard_negatives: bool = False) -> list[Triplet]:
    """Mine (query, positive, negative) triplets among the entries of ``split``.

    Positives lie within ``pos_radius_m`` and have ``dynamic_score <= max_dynamic``;
    they are ranked by global-descriptor distance when ``features`` is given,
    otherwise by geo distance. Negatives lie beyond ``neg_radius_m`` and are drawn
    uniformly without replacement (or closest-in-feature-space with
    ``hard_negatives``). Each query gets ``triplets_per_query`` triplets cycling
    through its ranked positives, each with a distinct negative.
    """
    if hard_negatives and features is None:
        raise ValueError("hard negative mining needs a feature store")
    pool = [e for e in manifest if split is None or e.split == split]
    if not pool:
        return []
    rng = np.random.default_rng(seed)
    coords = np.array([e.latlon for e in pool])
    dist = haversine_matrix(coords, coords)
    dyn = np.array([e.dynamic_score for e in pool])
    feats = None
    if features is not None:
        feats = np.stack([np.asarray(features[e.id], dtype=np.float64) for e in pool])

    triplets = []
    for qi, q in enumerate(pool):
        pos = np.flatnonzero((dist[qi] <= pos_radius_m) & (dyn <= max_dynamic))
        pos = pos[pos != qi]
        neg = np.flatnonzero(dist[qi] > neg_radius_m)
        if len(pos) == 0:
            log.warning("query %s has no eligible positive; skipped", q.id)
            continue
        if len(neg) == 0:
            log.warning("query %s has no negative beyond %.1f m; skipped", q.id, neg_radius_m)
            continue
        if feats is not None:
            fd = np.linalg.norm(feats - feats[qi], axis=1)
            pos = pos[np.argsort(fd[pos], kind="stable")]
        else:
            pos = pos[np.argsort(dist[qi, pos], kind="stable")]
        k = min(triplets_per_query, len(neg))
        if hard_negatives:
            chosen = neg[np.argsort(fd[neg], kind="stable")[:k]]
        else:
            chosen = rng.choice(neg, size=k, replace=False)
        for t in range(k):
            triplets.append(Triplet(q.id, pool[pos[t % len(pos)]].id, pool[chosen[t]].id))
    return triplets


# --------------------------------------------------------------------------
# synthetic city

@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 4
    meters_per_block: float = 50.0
    views_per_block: int = 8
    texture_seed: int = 0
    occluder_rate: float = 0.3
    image_size: int = 64
    max_corner_shift: float = 0.15
    # Share of every facade drawn from a city-wide style, making blocks look alike.
    style_share: float = 0.5
    origin: tuple[float, float] = (40.4406, -79.9959)
    split_pattern: tuple[str, ...] = ("db", "query", "val", "train", "train", "query", "train", "train")

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(self.origin))
        object.__setattr__(self, "split_pattern", tuple(self.split_pattern))
        if self.grid_size < 1 or self.views_per_block < 1 or self.meters_per_block <= 0:
            raise ValidationError("grid_size, views_per_block and meters_per_block must be positive")
        if not 0.0 <= self.occluder_rate <= 1.0:
            raise ValidationError("occluder_rate must be within [0, 1]")
        if self.image_size < 32 or self.image_size % 32:
            raise ValidationError("image_size must be a positive multiple of 32")
        if not 0.0 <= self.max_corner_shift <= 0.15:
            raise ValidationError("max_corner_shift must be within [0, 0.15]")
        if not 0.0 <= self.style_share < 1.0:
            raise ValidationError("style_share must be within [0, 1)")
        if not self.split_pattern or any(s not in SPLITS for s in self.split_pattern):
            raise ValidationError(f"split_pattern entries must be among {SPLITS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        d["split_pattern"] = list(self.split_pattern)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class City:
    manifest: list[ManifestEntry]
    images: dict[str, np.ndarray]  # uint8 (h, w, 3)
    pairs: list[PairRecord]
    view_homographies: dict[str, np.ndarray] = field(default_factory=dict)  # view px -> texture px


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1, 3)).astype(np.float32)
    return cv2.resize(grid, (size, size), interpolation=cv2.INTER_CUBIC)


def _facade(rng: np.random.Generator, size: int) -> np.ndarray:
    tex = np.zeros((size, size, 3), np.float32)
    for cells, weight in ((3, 0.5), (6, 0.3), (12, 0.2), (24, 0.12)):
        tex += weight * _value_noise(rng, size, cells)
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-6)
    # wall panels and window grids
    for _ in range(rng.integers(4, 9)):
        w, h = rng.integers(size // 10, size // 3, size=2)
        x, y = rng.integers(0, size - w), rng.integers(0, size - h)
        tex[y:y + h, x:x + w] = 0.35 * tex[y:y + h, x:x + w] + 0.65 * rng.random(3)
    for _ in range(rng.integers(1, 3)):
        pitch = int(rng.integers(size // 16, size // 8))
        win = max(2, pitch // 2)
        x0, y0 = rng.integers(0, size // 2, size=2)
        x1, y1 = x0 + rng.integers(size // 4, size // 2), y0 + rng.integers(size // 4, size // 2)
        colour = rng.random(3)
        for yy in range(int(y0), int(min(y1, size - win)), pitch):
            for xx in range(int(x0), int(min(x1, size - win)), pitch):
                tex[yy:yy + win, xx:xx + win] = colour
    return np.clip(tex, 0, 1)


def _view_homography(rng: np.random.Generator, spec: SceneSpec, shift: float | None = None) -> np.ndarray:
    """View pixel -> texture pixel; the view sees the texture centre with jittered corners."""
    s = spec.image_size
    shift = spec.max_corner_shift if shift is None else shift
    corners = np.array([[0, 0], [s, 0], [s, s], [0, s]], np.float64)
    base = corners + s / 2  # texture is 2s wide
    target = base + rng.uniform(-shift * s, shift * s, size=(4, 2))
    return np.asarray(cv2.getPerspectiveTransform(corners.astype(np.float32), target.astype(np.float32)), np.float64)


def _render(texture: np.ndarray, H: np.ndarray, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([xs + 0.5, ys + 0.5, np.ones_like(xs)], axis=-1) @ H.T
    u = pts[..., 0] / pts[..., 2] - 0.5
    v = pts[..., 1] / pts[..., 2] - 0.5
    return np.stack([ndimage.map_coordinates(texture[..., c], [v, u], order=1, mode="nearest")
                     for c in range(3)], axis=-1)


def _photometric(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.8, 1.2) * rng.uniform(0.95, 1.05, size=3)
    gamma = rng.uniform(0.8, 1.25)
    return np.clip(img, 0, 1) ** gamma * gain


def _occlude(img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    size = img.shape[0]
    mask = np.zeros(img.shape[:2], bool)
    for _ in range(rng.integers(1, 4)):
        w = int(rng.integers(size // 8, size // 3))
        h = int(rng.integers(size // 6, size // 2))
        x, y = int(rng.integers(0, size - w)), int(rng.integers(size // 3, size - h + 1))
        img[y:y + h, x:x + w] = rng.random(3) * rng.uniform(0.7, 1.0, size=(h, w, 1))
        mask[y:y + h, x:x + w] = True
    return img, float(mask.mean())


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def block_textures(spec: SceneSpec) -> list[np.ndarray]:
    style = _facade(np.random.default_rng([spec.texture_seed, 99991]), 2 * spec.image_size)
    out = []
    for b in range(spec.grid_size ** 2):
        own = _facade(np.random.default_rng([spec.texture_seed, b]), 2 * spec.image_size)
        out.append(spec.style_share * style + (1 - spec.style_share) * own)
    return out


def pair_homography(H_a: np.ndarray, H_b: np.ndarray) -> np.ndarray:
    """Image-a pixel -> image-b pixel given view->texture homographies of both views."""
    H = np.linalg.solve(H_b, H_a)
    return H / H[2, 2]


def generate_city(spec: SceneSpec) -> City:
    textures = block_textures(spec)
    manifest, images, pairs, homs = [], {}, [], {}
    for b, tex in enumerate(textures):
        bx, by = b % spec.grid_size, b // spec.grid_size
        lat, lon = offset_to_latlon(spec.origin, bx * spec.meters_per_block, by * spec.meters_per_block)
        ids = []
        for v in range(spec.views_per_block):
            rng = np.random.default_rng([spec.texture_seed, b, 0, v])
            H = _view_homography(rng, spec)
            img = _photometric(_render(tex, H, spec.image_size), rng)
            dynamic = 0.0
            if rng.random() < spec.occluder_rate:
                img, dynamic = _occlude(img, rng)
            image_id = f"b{b:03d}_v{v:02d}"
            images[image_id] = _to_uint8(img)
            homs[image_id] = H
            split = spec.split_pattern[v % len(spec.split_pattern)]
            manifest.append(ManifestEntry(image_id, f"images/{image_id}.png", lat, lon, dynamic, split))
            ids.append(image_id)
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                pairs.append(PairRecord(ids[i], ids[j], pair_homography(homs[ids[i]], homs[ids[j]]), "viewpoint"))
    return City(manifest, images, pairs, homs)


def generate_pairs_benchmark(spec: SceneSpec, pairs_per_block: int = 1,
                             max_corner_shift: float | None = None) -> tuple[list[PairRecord], dict[str, np.ndarray]]:
    """Held-out same-block view pairs with exact homographies.

    Views come from a seed stream disjoint from the training views. With
    ``max_corner_shift=0`` both views share one warp and the homography is the identity.
    """
    textures = block_textures(spec)
    records, images = [], {}
    for b, tex in enumerate(textures):
        for k in range(pairs_per_block):
            rng = np.random.default_rng([spec.texture_seed, b, 1, k])
            H1 = _view_homography(rng, spec, max_corner_shift)
            H2 = _view_homography(rng, spec, max_corner_shift)
            id1, id2 = f"eval_b{b:03d}_p{k:02d}_a", f"eval_b{b:03d}_p{k:02d}_b"
            images[id1] = _to_uint8(_render(tex, H1, spec.image_size))
            images[id2] = _to_uint8(_photometric(_render(tex, H2, spec.image_size), rng))
            H = np.eye(3) if np.array_equal(H1, H2) else pair_homography(H1, H2)
            records.append(PairRecord(id1, id2, H, "viewpoint+illumination"))
    return records, images


def write_city(city: City, root, benchmark: tuple[list[PairRecord], dict[str, np.ndarray]] | None = None) -> list[Path]:
    """Write images (8-bit PNG), manifest and pair files under ``root``; returns written paths."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for image_id, img in city.images.items():
        p = root / "images" / f"{image_id}.png"
        save_png(p, img)
        written.append(p)
    write_manifest(city.manifest, root / "manifest.jsonl")
    write_pairs(city.pairs, root / "pairs.json")
    written += [root / "manifest.jsonl", root / "pairs.json"]
    if benchmark is not None:
        records, images = benchmark
        (root / "benchmark").mkdir(exist_ok=True)
        for image_id, img in images.items():
            p = root / "benchmark" / f"{image_id}.png"
            save_png(p, img)
            written.append(p)
        write_pairs(records, root / "benchmark_pairs.json")
        written.append(root / "benchmark_pairs.json")
    return written


def save_png(path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def load_image(path) -> np.ndarray:
    """Read an 8-bit image as float32 RGB in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    noise_sigma_max: float = 0.02
    brightness: float = 0.2
    blur_taps: int = 3


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Motion blur, Gaussian noise and brightness change, each applied with probability ``cfg.probability``."""
    out = np.asarray(img, dtype=np.float32)
    if rng.random() < cfg.probability:
        axis = int(rng.integers(0, 2))
        out = ndimage.uniform_filter1d(out, cfg.blur_taps, axis=axis, mode="nearest")
    if rng.random() < cfg.probability:
        sigma = rng.uniform(0, cfg.noise_sigma_max)
        out = out + rng.normal(0, sigma, size=out.shape).astype(np.float32)
    if rng.random() < cfg.probability:
        out = out * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    return np.clip(out, 0, 1).astype(np.float32)

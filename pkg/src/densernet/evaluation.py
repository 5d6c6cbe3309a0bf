"""Keypoint matching metrics under known homographies and geo-tagged retrieval metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import PairRecord
from .decoder import Keypoint
from .errors import ValidationError
from .geo import haversine_m, haversine_matrix  # noqa: F401  (re-exported)

SCHEMA_VERSION = 1


def warp_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]


def average_precision(labels: Sequence[bool]) -> float:
    """All-point AP of a ranked list of relevance labels (0 when nothing is relevant)."""
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        return 0.0
    hits = np.cumsum(labels)
    precision = hits / np.arange(1, len(labels) + 1)
    return float(precision[labels].sum() / labels.sum())


# --------------------------------------------------------------------------
# matching

@dataclass
class MatchSet:
    matches: list[tuple[int, int, float]]  # (index in kps1, index in kps2, descriptor distance)
    method: str = "mutual-nn"


def match_keypoints(kps1: Sequence[Keypoint], kps2: Sequence[Keypoint]) -> MatchSet:
    """Mutual nearest neighbours by Euclidean descriptor distance; ties go to the lower index."""
    if not kps1 or not kps2:
        return MatchSet([])
    d1 = np.stack([k.descriptor for k in kps1]).astype(np.float64)
    d2 = np.stack([k.descriptor for k in kps2]).astype(np.float64)
    dist = np.sqrt(np.maximum(((d1[:, None, :] - d2[None, :, :]) ** 2).sum(-1), 0.0))
    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    matches = [(i, int(j), float(dist[i, j])) for i, j in enumerate(nn12) if nn21[j] == i]
    return MatchSet(matches)


@dataclass
class MatchingReport:
    repeatability: float | None
    mle_px: float | None
    map: float | None
    matching_score: float | None
    n_keypoints: tuple[int, int]
    n_shared: tuple[int, int]
    n_matches: int
    n_correct: int
    defined: bool = True
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_keypoints"] = list(self.n_keypoints)
        d["n_shared"] = list(self.n_shared)
        return d


def _inside(pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)


def matching_metrics(pair: PairRecord, kps1: Sequence[Keypoint], kps2: Sequence[Keypoint],
                     image_shape: tuple[int, int], eps_px: float = 3.0) -> MatchingReport:
    """Repeatability, MLE, matching score and mAP for one image pair.

    Only keypoints whose warp lands inside the other image (the shared view)
    count. Repeatability averages the two directions; a match is correct when
    the warped first keypoint lies within ``eps_px`` of the second.
    """
    H = np.asarray(pair.homography, dtype=np.float64)
    p1 = np.array([k.pixel for k in kps1], dtype=np.float64).reshape(-1, 2)
    p2 = np.array([k.pixel for k in kps2], dtype=np.float64).reshape(-1, 2)
    shared1 = np.flatnonzero(_inside(warp_points(H, p1), image_shape)) if len(p1) else np.zeros(0, int)
    shared2 = np.flatnonzero(_inside(warp_points(np.linalg.inv(H), p2), image_shape)) if len(p2) else np.zeros(0, int)
    counts = (len(kps1), len(kps2))
    if len(shared1) == 0 or len(shared2) == 0:
        return MatchingReport(None, None, None, None, counts, (len(shared1), len(shared2)), 0, 0, defined=False)

    w1 = warp_points(H, p1[shared1])
    dist = np.linalg.norm(w1[:, None, :] - p2[shared2][None, :, :], axis=-1)
    min1, min2 = dist.min(axis=1), dist.min(axis=0)
    rep1, rep2 = min1 <= eps_px, min2 <= eps_px
    repeatability = 0.5 * (rep1.mean() + rep2.mean())
    residuals = np.concatenate([min1[rep1], min2[rep2]])
    mle = float(residuals.mean()) if len(residuals) else None

    s1 = [kps1[i] for i in shared1]
    s2 = [kps2[i] for i in shared2]
    ms = match_keypoints(s1, s2)
    ranked = sorted(ms.matches, key=lambda m: m[2])
    correct = [bool(dist[a, b] <= eps_px) for a, b, _ in ranked]
    n_correct = int(sum(correct))
    return MatchingReport(
        repeatability=float(repeatability),
        mle_px=mle,
        map=average_precision(correct),
        matching_score=n_correct / min(len(s1), len(s2)),
        n_keypoints=counts,
        n_shared=(len(s1), len(s2)),
        n_matches=len(ranked),
        n_correct=n_correct,
    )


def mean_matching_report(reports: Sequence[MatchingReport]) -> dict:
    """Average every defined metric over pairs; undefined pairs are counted, not averaged."""
    out = {"pairs": len(reports), "undefined_pairs": sum(not r.defined for r in reports)}
    for key in ("repeatability", "mle_px", "map", "matching_score"):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    out["schema_version"] = SCHEMA_VERSION
    return out


# --------------------------------------------------------------------------
# retrieval

@dataclass
class RetrievalIndex:
    ids: list[str]
    descriptors: np.ndarray  # (N, D)
    geo: np.ndarray          # (N, 2) lat/lon
    _id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind="stable"), kind="stable")

    def distances(self, query: np.ndarray) -> np.ndarray:
        diff = self.descriptors - np.asarray(query, dtype=np.float64)[None, :]
        return np.sqrt((diff * diff).sum(axis=1))

    def ranking(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Database order by ascending distance, ties broken by id."""
        d = self.distances(query)
        order = np.lexsort((self._id_rank, d))
        return order, d[order]

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        order, d = self.ranking(query)
        return [(self.ids[i], float(x)) for i, x in zip(order[:k], d[:k])]


def build_index(db: Sequence[tuple[str, np.ndarray, tuple[float, float]]]) -> RetrievalIndex:
    ids = [d[0] for d in db]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate database ids: {dup}")
    if not db:
        return RetrievalIndex([], np.zeros((0, 0)), np.zeros((0, 2)))
    desc = np.stack([np.asarray(d[1], dtype=np.float64) for d in db])
    if np.any(np.linalg.norm(desc, axis=1) < 1e-12):
        bad = [ids[i] for i in np.flatnonzero(np.linalg.norm(desc, axis=1) < 1e-12)]
        raise ValidationError(f"degenerate (zero) descriptors cannot be indexed: {bad}")
    geo = np.array([d[2] for d in db], dtype=np.float64).reshape(-1, 2)
    return RetrievalIndex(ids, desc, geo)


@dataclass
class RetrievalReport:
    recall_at: dict[int, float]
    pr_curve: list[tuple[float, float]]
    map: float
    n_queries: int
    top_ids: dict[str, list[str]] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "pr_curve": [list(p) for p in self.pr_curve],
            "map": self.map,
            "n_queries": self.n_queries,
            "top_ids": self.top_ids,
            "schema_version": self.schema_version,
        }


def recall_at_n(index: RetrievalIndex, queries: Sequence[tuple[str, np.ndarray, tuple[float, float]]],
                d_m: float = 25.0, ns: Sequence[int] = (1, 5, 10)) -> RetrievalReport:
    """A query is correct at N when one of its top-N database images lies within ``d_m`` meters."""
    if not queries:
        raise ValidationError("empty query set")
    ns = sorted(set(int(n) for n in ns))
    qgeo = np.array([q[2] for q in queries], dtype=np.float64).reshape(-1, 2)
    relevant = haversine_matrix(qgeo, index.geo) <= d_m
    first_hit = np.full(len(queries), np.inf)
    top1_dist = np.zeros(len(queries))
    aps = []
    top_ids = {}
    for qi, (qid, qvec, _) in enumerate(queries):
        order, dist = index.ranking(qvec)
        rel = relevant[qi, order]
        hits = np.flatnonzero(rel)
        if len(hits):
            first_hit[qi] = hits[0]
        top1_dist[qi] = dist[0] if len(dist) else np.inf
        aps.append(average_precision(rel))
        top_ids[qid] = [index.ids[i] for i in order[: max(ns)]]
    recall = {n: float(np.mean(first_hit < n)) for n in ns}

    top1_correct = first_hit == 0
    pr = []
    order = np.argsort(top1_dist, kind="stable")
    thresholds = np.unique(top1_dist[order])
    for t in thresholds:
        accepted = top1_dist <= t
        tp = int((accepted & top1_correct).sum())
        pr.append((tp / int(accepted.sum()), tp / len(queries)))
    return RetrievalReport(recall, pr, float(np.mean(aps)), len(queries), top_ids)

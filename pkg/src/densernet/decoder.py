"""One-stage feature decoder.

All tensor functions take channel-last maps of shape (..., h, w, n) so the
same code path serves single images and batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

DEGENERATE_NORM = 1e-12

_NEIGHBOURS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]


@dataclass
class DescriptorField:
    descriptors: torch.Tensor  # (..., h, w, n), unit norm or zero
    degenerate: torch.Tensor   # (..., h, w) bool


@dataclass
class DetectionField:
    scores: torch.Tensor  # (..., h, w) image-normalized, sums to 1
    local: torch.Tensor   # (..., h, w) local softmax score before normalization
    k_star: torch.Tensor  # (..., h, w) argmax channel


@dataclass
class Keypoint:
    grid: tuple[int, int]
    pixel: tuple[float, float]  # (x, y) of the cell center in input pixels
    score: float
    channel: int
    descriptor: np.ndarray


@dataclass
class GlobalDescriptor:
    vector: torch.Tensor  # (..., global_dim)
    degenerate: torch.Tensor  # (...) bool


@dataclass
class DecodedImage:
    image_id: str
    stride: int
    descriptors: DescriptorField
    detection: DetectionField
    global_descriptor: GlobalDescriptor
    keypoints: list[Keypoint] = field(default_factory=list)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.detection.scores.shape[-2:])


def apply_attention(features: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """A[i, j] = ReLU(theta @ F[i, j]) at every cell."""
    features = torch.as_tensor(features)
    theta = torch.as_tensor(theta, dtype=features.dtype)
    n = features.shape[-1]
    if theta.shape != (n, n):
        raise ShapeError(f"attention filter must be {n}x{n}, got {tuple(theta.shape)}")
    return F.relu(features @ theta.T)


def extract_descriptors(attention: torch.Tensor) -> DescriptorField:
    attention = torch.as_tensor(attention)
    norm = torch.linalg.vector_norm(attention, dim=-1, keepdim=True)
    degenerate = norm[..., 0] < DEGENERATE_NORM
    safe = torch.where(degenerate[..., None], torch.ones_like(norm), norm)
    desc = torch.where(degenerate[..., None], torch.zeros_like(attention), attention / safe)
    return DescriptorField(desc, degenerate)


def _neighbourhood_values(attention: torch.Tensor, k_star: torch.Tensor) -> torch.Tensor:
    """Values A[i', j', k*(i, j)] over each pixel's 3x3 window, -inf outside the image."""
    h, w = attention.shape[-3:-1]
    padded = F.pad(attention.movedim(-1, -3), (1, 1, 1, 1), value=float("-inf")).movedim(-3, -1)
    idx = k_star.unsqueeze(-1)
    vals = []
    for di, dj in _NEIGHBOURS:
        window = padded[..., 1 + di: 1 + di + h, 1 + dj: 1 + dj + w, :]
        vals.append(torch.gather(window, -1, idx)[..., 0])
    return torch.stack(vals, dim=-1)


def detection_scores(attention: torch.Tensor) -> DetectionField:
    """Hard detector + 3x3 local softmax on each pixel's own argmax channel + image-level normalization.

    Border windows are clipped to the image. Argmax ties resolve to the lowest channel.
    """
    attention = torch.as_tensor(attention)
    if attention.ndim < 3 or attention.shape[-3] < 1 or attention.shape[-2] < 1:
        raise ShapeError(f"expected (..., h, w, n) with h, w >= 1, got {tuple(attention.shape)}")
    k_star = torch.argmax(attention, dim=-1)
    neigh = _neighbourhood_values(attention, k_star)
    centre = neigh[..., 4]
    # subtract the window max before exponentiating
    m = neigh.max(dim=-1, keepdim=True).values.detach()
    local = torch.exp(centre - m[..., 0]) / torch.exp(neigh - m).sum(dim=-1)
    total = local.sum(dim=(-2, -1), keepdim=True)
    return DetectionField(local / total, local, k_star)


def select_keypoints(field: DetectionField, descs: DescriptorField, max_count: int,
                     nms_radius: int, stride: int = 1) -> list[Keypoint]:
    """Strict local maxima of the detection field, best first.

    A cell survives when its score is strictly greater than every other cell
    within ``nms_radius`` (Chebyshev). Equal scores order by (i, j).
    """
    if max_count < 1 or nms_radius < 0:
        raise ValueError("max_count must be >= 1 and nms_radius >= 0")
    scores = field.scores.detach().cpu().numpy().astype(np.float64)
    if scores.ndim != 2:
        raise ShapeError("select_keypoints works on a single image")
    h, w = scores.shape
    r = nms_radius
    is_max = scores > 0
    if r > 0:
        padded = np.pad(scores, r, constant_values=-np.inf)
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                if di == 0 and dj == 0:
                    continue
                is_max &= scores > padded[r + di: r + di + h, r + dj: r + dj + w]
    ii, jj = np.nonzero(is_max)
    order = np.lexsort((jj, ii, -scores[ii, jj]))[:max_count]
    desc = descs.descriptors.detach().cpu().numpy()
    k_star = field.k_star.cpu().numpy()
    out = []
    for o in order:
        i, j = int(ii[o]), int(jj[o])
        out.append(Keypoint(
            grid=(i, j),
            pixel=((j + 0.5) * stride, (i + 0.5) * stride),
            score=float(scores[i, j]),
            channel=int(k_star[i, j]),
            descriptor=desc[i, j].copy(),
        ))
    return out


def global_descriptor(descs: DescriptorField, field: DetectionField, projection: torch.Tensor) -> GlobalDescriptor:
    """normalize(projection @ sum_ij s~_ij f_ij); a zero pool is flagged degenerate."""
    f = descs.descriptors
    projection = torch.as_tensor(projection, dtype=f.dtype)
    if projection.shape[-1] != f.shape[-1]:
        raise ShapeError(f"projection expects {projection.shape[-1]} channels, descriptors have {f.shape[-1]}")
    pooled = (field.scores.unsqueeze(-1) * f).sum(dim=(-3, -2))
    g = pooled @ projection.T
    norm = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    degenerate = norm[..., 0] < DEGENERATE_NORM
    safe = torch.where(degenerate[..., None], torch.ones_like(norm), norm)
    g = torch.where(degenerate[..., None], torch.zeros_like(g), g / safe)
    return GlobalDescriptor(g, degenerate)

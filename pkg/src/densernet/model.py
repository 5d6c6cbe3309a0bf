"""Full model: feature encoder plus the decoder's learned attention filter and
the fixed 256-D retrieval projection."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import decoder
from .decoder import DecodedImage
from .network import FeatureEncoder, NetworkConfig


def orthonormal_projection(out_dim: int, in_dim: int, gen: torch.Generator) -> torch.Tensor:
    """Random matrix with orthonormal rows (out <= in) or columns (out > in)."""
    a = torch.randn(max(out_dim, in_dim), min(out_dim, in_dim), generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    return q if out_dim >= in_dim else q.T


def images_to_batch(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


class _Decoding(nn.Module):
    stride: int

    def dense_features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        dense = self.dense_features(x).permute(0, 2, 3, 1)
        return decoder.apply_attention(dense, self.theta)

    def decode(self, x: torch.Tensor, ids: Sequence[str] | None = None,
               max_keypoints: int = 0, nms_radius: int = 1) -> list[DecodedImage]:
        """Decode an NCHW batch. Keypoints are only materialized when ``max_keypoints > 0``."""
        a = self.attention(x)
        descs = decoder.extract_descriptors(a)
        det = decoder.detection_scores(a)
        glob = decoder.global_descriptor(descs, det, self.projection)
        ids = list(ids) if ids is not None else [str(i) for i in range(x.shape[0])]
        out = []
        for b, image_id in enumerate(ids):
            d = decoder.DescriptorField(descs.descriptors[b], descs.degenerate[b])
            s = decoder.DetectionField(det.scores[b], det.local[b], det.k_star[b])
            g = decoder.GlobalDescriptor(glob.vector[b], glob.degenerate[b])
            img = DecodedImage(image_id, self.stride, d, s, g)
            if max_keypoints > 0:
                img.keypoints = decoder.select_keypoints(s, d, max_keypoints, nms_radius, self.stride)
            out.append(img)
        return out


class DenserNet(_Decoding):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        config = config or NetworkConfig()
        self.config = config
        self.encoder = FeatureEncoder(config)
        n = config.dense_channels
        gen = torch.Generator().manual_seed(config.seed + 1)
        theta = torch.eye(n, dtype=torch.float64) + 0.01 * torch.randn(n, n, generator=gen, dtype=torch.float64)
        self.theta = nn.Parameter(theta.float())
        # No loss term reaches the retrieval projection, so it stays a fixed buffer.
        self.register_buffer("projection", orthonormal_projection(config.global_dim, n, gen).float())
        self.stride = config.output_stride

    def dense_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)


class PixelDecoder(_Decoding):
    """Decoder applied to space-to-depth pixels: no convolutions, only the attention filter.

    Serves as the closed-form model for gradient checks.
    """

    def __init__(self, stride: int = 4, global_dim: int = 256, seed: int = 0, theta_noise: float = 0.01):
        super().__init__()
        n = 3 * stride * stride
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(n, n, generator=gen, dtype=torch.float64)
        theta = torch.eye(n, dtype=torch.float64) + theta_noise * noise
        self.theta = nn.Parameter(theta)
        self.register_buffer("projection", orthonormal_projection(global_dim, n, gen))
        self.stride = stride

    def dense_features(self, x: torch.Tensor) -> torch.Tensor:
        return F.pixel_unshuffle(x, self.stride)

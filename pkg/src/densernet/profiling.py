"""Analytic FLOP counts and wall-clock timing split into backbone encoder (BE),
feature extraction branches (FEB) and feature decoder (FD)."""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from . import decoder
from .model import DenserNet

SCHEMA_VERSION = 1


def conv_flops(h_out: int, w_out: int, c_in: int, c_out: int, k: int, groups: int = 1) -> int:
    """2 * h_out * w_out * c_out * k^2 * (c_in / groups): one multiply and one add per MAC."""
    return 2 * h_out * w_out * c_out * k * k * (c_in // groups)


def _conv_module_flops(conv: nn.Conv2d, h_out: int, w_out: int) -> int:
    return conv_flops(h_out, w_out, conv.in_channels, conv.out_channels, conv.kernel_size[0], conv.groups)


@dataclass
class LayerCount:
    part: str
    name: str
    out_shape: tuple[int, int, int]
    flops: int


@dataclass
class ProfileReport:
    image_shape: tuple[int, int]
    flops_backbone: int
    flops_branches: int
    flops_decoder: int
    wall_be_ms: float | None = None
    wall_feb_ms: float | None = None
    wall_fd_ms: float | None = None
    layers: list[LayerCount] = field(default_factory=list)
    ablation: str = "full"
    schema_version: int = SCHEMA_VERSION

    @property
    def ratio_r(self) -> float:
        return (self.flops_backbone + self.flops_branches + self.flops_decoder) / (
            self.flops_backbone + self.flops_decoder)

    @property
    def branch_fraction(self) -> float:
        return self.flops_branches / self.flops_backbone

    def table_rows(self) -> list[dict]:
        """Rows shaped like a BE / FEB / FD runtime table."""
        rows = []
        for part, flops, wall in (("BE", self.flops_backbone, self.wall_be_ms),
                                  ("FEB", self.flops_branches, self.wall_feb_ms),
                                  ("FD", self.flops_decoder, self.wall_fd_ms)):
            rows.append({"part": part, "flops": flops, "wall_ms": wall})
        walls = [r["wall_ms"] for r in rows]
        rows.append({"part": "Total", "flops": sum(r["flops"] for r in rows),
                     "wall_ms": None if None in walls else sum(walls)})
        return rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["ratio_r"] = self.ratio_r
        d["layers"] = [dict(asdict(l), out_shape=list(l.out_shape)) for l in self.layers]
        return d


def count_flops(model: DenserNet, image_shape: tuple[int, int]) -> ProfileReport:
    h, w = image_shape
    cfg = model.config
    layers = []
    for i, (conv, stride) in enumerate(model.encoder.backbone.conv_layers()):
        ho, wo = h // stride, w // stride
        layers.append(LayerCount("BE", f"backbone.conv{i}", (ho, wo, conv.out_channels),
                                 _conv_module_flops(conv, ho, wo)))
    for level, branch in model.encoder.branches.items():
        th, tw = h // branch.tap_stride, w // branch.tap_stride
        layers.append(LayerCount("FEB", f"{level}.expand", (th, tw, branch.out_channels),
                                 _conv_module_flops(branch.expand, th, tw)))
        oh, ow = h // branch.spec.target_stride, w // branch.spec.target_stride
        layers.append(LayerCount("FEB", f"{level}.smooth", (oh, ow, branch.out_channels),
                                 _conv_module_flops(branch.smooth, oh, ow)))
    n = cfg.dense_channels
    fh, fw = h // cfg.output_stride, w // cfg.output_stride
    layers.append(LayerCount("FD", "attention", (fh, fw, n), 2 * fh * fw * n * n))
    layers.append(LayerCount("FD", "score_pooling", (1, 1, n), 2 * fh * fw * n))
    layers.append(LayerCount("FD", "projection", (1, 1, cfg.global_dim), 2 * cfg.global_dim * n))
    totals = {p: sum(l.flops for l in layers if l.part == p) for p in ("BE", "FEB", "FD")}
    return ProfileReport((h, w), totals["BE"], totals["FEB"], totals["FD"], layers=layers,
                         ablation=cfg.ablation)


def _median_ms(fn, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def profile(model: DenserNet, image_shape: tuple[int, int], warmup: int = 3, repeats: int = 11,
            timed: bool = True) -> ProfileReport:
    """FLOP counts plus median wall times; wall times need an otherwise idle machine."""
    if warmup < 3 or repeats < 10:
        raise ValueError("need at least 3 warm-up runs and 10 timed runs")
    report = count_flops(model, image_shape)
    if not timed:
        return report
    dtype = next(model.parameters()).dtype
    x = torch.rand(1, 3, *image_shape, generator=torch.Generator().manual_seed(0)).to(dtype)
    enc = model.encoder
    with torch.no_grad():
        taps = enc.backbone(x)
        dense = enc(x)

        def run_feb():
            if enc.branches:
                torch.cat(enc.branch_outputs(taps), dim=1)

        def run_fd():
            a = decoder.apply_attention(dense.permute(0, 2, 3, 1), model.theta)
            descs = decoder.extract_descriptors(a)
            det = decoder.detection_scores(a)
            decoder.global_descriptor(descs, det, model.projection)

        report.wall_be_ms = _median_ms(lambda: enc.backbone(x), warmup, repeats)
        report.wall_feb_ms = _median_ms(run_feb, warmup, repeats) if enc.branches else 0.0
        report.wall_fd_ms = _median_ms(run_fd, warmup, repeats)
    return report

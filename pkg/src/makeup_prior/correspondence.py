"""Region-constrained dense correspondence and makeup-feature warping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backends import REGIONS, RegionMaskSet
from .errors import ConfigurationError, EmptyRegion

EPS = 1e-8
MAX_POSITIONS = 4096


@dataclass
class CorrespondenceMatrix:
    """Cosine correlation between every source position u and reference position v.

    ``inactive`` flags source rows whose feature vector had zero norm (or lay
    outside the source region); their entries are 0.
    """

    values: torch.Tensor
    source_shape: Tuple[int, int]
    reference_shape: Tuple[int, int]
    region: Optional[str] = None
    inactive: Optional[torch.Tensor] = None
    inactive_ref: Optional[torch.Tensor] = None
    excluded_ref: Optional[torch.Tensor] = None     # out-of-region v, dropped from the softmax

    def to_numpy(self) -> Dict[str, np.ndarray]:
        """Arrays suitable for ``np.savez`` diagnostics."""
        return {
            "values": self.values.detach().cpu().numpy(),
            "inactive": self.inactive.cpu().numpy(),
            "source_shape": np.array(self.source_shape),
            "reference_shape": np.array(self.reference_shape),
        }


@dataclass
class WarpConfig:
    temperature: float = 100.0
    regions: Tuple[str, ...] = REGIONS
    projection_dim: int = 16
    level: int = 0                      # pyramid index, 0 = coarsest
    max_positions: int = MAX_POSITIONS

    def __post_init__(self):
        self.regions = tuple(self.regions)
        if self.temperature <= 0:
            raise ConfigurationError("warp.temperature must be > 0")
        if not self.regions or not set(self.regions) <= set(REGIONS):
            raise ConfigurationError(f"warp.regions must be a non-empty subset of {REGIONS}")


def centralize(feat: torch.Tensor) -> torch.Tensor:
    """Subtract each channel's spatial mean from a CxHxW map."""
    return feat - feat.mean(dim=(-2, -1), keepdim=True)


def _check_positions(h, w, cap):
    if h * w > cap:
        raise ConfigurationError(
            f"{h}x{w} = {h * w} positions exceeds the dense-correlation cap of {cap}")


def correlation_matrix(feat_s: torch.Tensor, feat_r: torch.Tensor,
                       max_positions: int = MAX_POSITIONS) -> CorrespondenceMatrix:
    """Cosine similarity between all source and reference positions.

    Both maps are expected to be centralized already.  Zero-norm positions get
    a zero row/column and are flagged.
    """
    if feat_s.shape[0] != feat_r.shape[0]:
        raise ConfigurationError(
            f"channel mismatch: {feat_s.shape[0]} vs {feat_r.shape[0]}")
    for f in (feat_s, feat_r):
        _check_positions(f.shape[-2], f.shape[-1], max_positions)
    s = feat_s.flatten(1).T                          # HW x C
    r = feat_r.flatten(1).T
    ns = s.norm(dim=1)
    nr = r.norm(dim=1)
    dead_s = ns < EPS
    dead_r = nr < EPS
    s_hat = s / ns.clamp_min(EPS)[:, None]
    r_hat = r / nr.clamp_min(EPS)[:, None]
    a = s_hat @ r_hat.T
    a = a * (~dead_s)[:, None] * (~dead_r)[None, :]
    return CorrespondenceMatrix(a.clamp(-1, 1), tuple(feat_s.shape[-2:]),
                                tuple(feat_r.shape[-2:]), None, dead_s, dead_r)


def region_correlation(feat_s: torch.Tensor, feat_r: torch.Tensor,
                       masks_s: RegionMaskSet, masks_r: RegionMaskSet, region: str,
                       max_positions: int = MAX_POSITIONS) -> CorrespondenceMatrix:
    """Correlation restricted to one facial region.

    Masks are area-averaged to feature resolution and multiplied in softly;
    the masked features are re-centralized before the cosine.  Source
    positions with zero mask weight are flagged inactive.
    """
    ms = masks_s.resized(tuple(feat_s.shape[-2:]))[region].to(feat_s)
    mr = masks_r.resized(tuple(feat_r.shape[-2:]))[region].to(feat_r)
    if ms.sum() <= 0:
        raise EmptyRegion(region, "source")
    if mr.sum() <= 0:
        raise EmptyRegion(region, "reference")
    a = correlation_matrix(centralize(feat_s * ms), centralize(feat_r * mr), max_positions)
    off_s = (ms <= 0).flatten()
    off_r = (mr <= 0).flatten()
    values = a.values * (~off_s)[:, None]
    return CorrespondenceMatrix(values, a.source_shape, a.reference_shape, region,
                                a.inactive | off_s, a.inactive_ref, off_r)


def warp(a: CorrespondenceMatrix, feat_r: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax(temperature * A) weighted sum of reference features per source position.

    Inactive source rows produce zeros.  Returns a C x Hs x Ws map.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not torch.isfinite(a.values).all():
        raise ValueError("correspondence matrix is not finite")
    r = feat_r.flatten(1).T                          # HWr x C
    logits = temperature * a.values
    if a.excluded_ref is not None and a.excluded_ref.any() and not a.excluded_ref.all():
        logits = logits.masked_fill(a.excluded_ref[None, :], float("-inf"))
    weights = torch.softmax(logits, dim=1)
    out = weights @ r
    if a.inactive is not None:
        out = out * (~a.inactive)[:, None]
    hs, ws = a.source_shape
    return out.T.reshape(feat_r.shape[0], hs, ws)


def hard_warp(a: CorrespondenceMatrix, feat_r: torch.Tensor) -> torch.Tensor:
    """The temperature -> infinity limit of :func:`warp`; ties go to the lowest index."""
    r = feat_r.flatten(1).T
    idx = torch.as_tensor(np.argmax(a.values.detach().cpu().numpy(), axis=1))
    out = r[idx]
    if a.inactive is not None:
        out = out * (~a.inactive)[:, None]
    hs, ws = a.source_shape
    return out.T.reshape(feat_r.shape[0], hs, ws)


class FusionProjection(nn.Module):
    """Bias-free 1x1 convolution mixing concatenated region warps.

    When some regions are missing, only their weight columns are dropped and
    the output is rescaled by (all regions / present regions).
    """

    def __init__(self, regions: Sequence[str], channels: int, projection_dim: int,
                 seed: int = 0):
        super().__init__()
        self.regions = tuple(regions)
        self.channels = channels
        self.weight = nn.Parameter(torch.empty(projection_dim, channels * len(self.regions)))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.weight.copy_(torch.randn(self.weight.shape, generator=gen)
                              / np.sqrt(self.weight.shape[1]))

    def forward(self, warped: Dict[str, torch.Tensor]) -> torch.Tensor:
        return fuse_regions(warped, self.weight, self.regions, self.channels)


def fuse_regions(warped: Dict[str, torch.Tensor], weight: torch.Tensor,
                 regions: Optional[Sequence[str]] = None,
                 channels: Optional[int] = None) -> torch.Tensor:
    """Concatenate region warps in ``regions`` order and apply a 1x1 projection.

    ``weight`` has shape (projection_dim, len(regions) * channels).
    """
    regions = tuple(regions) if regions is not None else tuple(warped)
    present = [r for r in regions if r in warped]
    if not present:
        raise ConfigurationError("no warped regions to fuse")
    shapes = {tuple(warped[r].shape[-2:]) for r in present}
    if len(shapes) != 1:
        raise ValueError(f"warped maps disagree in spatial shape: {sorted(shapes)}")
    if channels is None:
        channels = warped[present[0]].shape[0]
    cols = []
    for i, r in enumerate(regions):
        if r in warped:
            cols.append(weight[:, i * channels:(i + 1) * channels])
    w = torch.cat(cols, dim=1) * (len(regions) / len(present))
    x = torch.cat([warped[r] for r in present], dim=0)
    c, h, wd = x.shape
    return (w @ x.reshape(c, h * wd)).reshape(-1, h, wd)

"""Test-time objective: structure, histogram, global patch and adversarial terms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .backends import (REGIONS, EmbedderBackend, FeaturePyramid, KeySet, RegionMaskSet,
                       ViTBackend, embed_face, extract_keys)
from .errors import EmptyRegion, OptimizationFault

log = logging.getLogger(__name__)

CONTRASTIVE_TEMPERATURE = 0.07
HM_THRESHOLD = 0.5


@dataclass
class LossWeights:
    lambda_struc: float = 0.001
    lambda_hist: float = 0.8
    lambda_glob: float = 0.2
    lambda_adv: float = 0.003
    region_weights: Dict[str, float] = field(
        default_factory=lambda: {"lips": 1.0, "eyes": 1.0, "skin": 1.0})

    def __post_init__(self):
        vals = [self.lambda_struc, self.lambda_hist, self.lambda_glob, self.lambda_adv,
                *self.region_weights.values()]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be >= 0")
        unknown = set(self.region_weights) - set(REGIONS)
        if unknown:
            raise ValueError(f"unknown region weights {sorted(unknown)}")


@dataclass
class LossBreakdown:
    struc: float
    hist: float
    glob: float
    adv: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return {"struc": self.struc, "hist": self.hist, "glob": self.glob,
                "adv": self.adv, "total": self.total}


# ---------------------------------------------------------------------------
# structure


def self_similarity(keys: KeySet) -> torch.Tensor:
    """Pairwise cosine of patch keys (class token excluded); zero-norm keys give zero rows."""
    k = keys.patch_keys
    n = k.norm(dim=-1, keepdim=True)
    k_hat = k / n.clamp_min(1e-8)
    s = k_hat @ k_hat.transpose(-2, -1)
    return s.clamp(-1, 1)


def _contrastive(keys_p: torch.Tensor, keys_s: torch.Tensor, temperature: float) -> torch.Tensor:
    kp = F.normalize(keys_p, dim=-1)
    ks = F.normalize(keys_s, dim=-1)
    logits = kp @ ks.T / temperature
    target = torch.arange(logits.shape[0])
    return F.cross_entropy(logits, target)


def structure_loss(x_s: torch.Tensor, x_p: torch.Tensor, vit: ViTBackend,
                   mode: str = "frobenius", layer: Optional[int] = None,
                   source_keys: Optional[KeySet] = None,
                   temperature: float = CONTRASTIVE_TEMPERATURE) -> torch.Tensor:
    """Self-similarity distance between source and protected ViT keys.

    ``frobenius``: ||S(x_s) - S(x_p)||_F.  ``contrastive``: InfoNCE over key
    cosines where the key at the same patch position is the positive.
    """
    ks = source_keys if source_keys is not None else extract_keys(vit, x_s, layer)
    kp = extract_keys(vit, x_p, ks.layer_index)
    if mode == "frobenius":
        return torch.linalg.matrix_norm(self_similarity(ks) - self_similarity(kp))
    if mode == "contrastive":
        return _contrastive(kp.patch_keys, ks.patch_keys, temperature)
    raise ValueError(f"unknown structure-loss mode {mode!r}")


# ---------------------------------------------------------------------------
# histogram matching


def histogram_match(src_values, ref_values) -> np.ndarray:
    """Map each source value onto the reference quantile at its rank.

    Ranks use averaging for ties, so equal source values stay equal; the
    reference quantile function is linearly interpolated when the lists
    differ in length.
    """
    src = np.asarray(src_values, dtype=np.float64).ravel()
    ref = np.sort(np.asarray(ref_values, dtype=np.float64).ravel())
    if ref.size == 0:
        raise EmptyRegion("histogram", "reference")
    if src.size == 0:
        return src.copy()
    if src.size == 1:
        q = np.array([0.5])
    else:
        q = (rankdata(src, method="average") - 1) / (src.size - 1)
    return np.interp(q * (ref.size - 1), np.arange(ref.size), ref)


@dataclass
class HistogramTargets:
    """Per-region pseudo-targets, fixed for the whole run.

    ``targets[region]`` is a 3xHxW raster already multiplied by the source
    region mask.  ``match_calls`` counts region x channel matchings.
    """

    targets: Dict[str, torch.Tensor]
    masks: Dict[str, torch.Tensor]
    skipped: List[str]
    match_calls: int = 0


def build_histogram_targets(x_s: torch.Tensor, x_r: torch.Tensor,
                            masks_s: RegionMaskSet, masks_r: RegionMaskSet,
                            regions: Sequence[str] = REGIONS,
                            threshold: float = HM_THRESHOLD) -> HistogramTargets:
    targets, masks, skipped = {}, {}, []
    calls = 0
    xs = x_s.detach().cpu().double().numpy()
    xr = x_r.detach().cpu().double().numpy()
    for region in regions:
        ms = masks_s[region].detach().cpu().numpy()
        mr = masks_r[region].detach().cpu().numpy()
        sel_s = ms > threshold
        sel_r = mr > threshold
        if not sel_s.any() or not sel_r.any():
            skipped.append(region)
            continue
        matched = xs.copy()
        for c in range(3):
            matched[c][sel_s] = histogram_match(xs[c][sel_s], xr[c][sel_r])
            calls += 1
        targets[region] = torch.as_tensor(matched * ms[None], dtype=x_s.dtype)
        masks[region] = masks_s[region].to(x_s)
    if skipped:
        log.info("histogram targets skipped empty regions %s", skipped)
    return HistogramTargets(targets, masks, skipped, calls)


def histogram_loss(x_p: torch.Tensor, targets: HistogramTargets,
                   region_weights: Dict[str, float]) -> torch.Tensor:
    """Weighted sum over regions of the L1 distance ``sum |x_p * m_s - target|``.

    Gradients do not flow through the (cached) targets.
    """
    if not targets.targets:
        log.warning("histogram loss: every region is empty, returning 0")
        return x_p.sum() * 0
    total = x_p.new_zeros(())
    for region, tgt in targets.targets.items():
        w = region_weights.get(region, 1.0)
        total = total + w * (x_p * targets.masks[region] - tgt).abs().sum()
    return total


def histogram_loss_images(x_p, x_s, x_r, masks_s, masks_r, region_weights) -> torch.Tensor:
    """Convenience form that builds the targets on the fly."""
    t = build_histogram_targets(x_s, x_r, masks_s, masks_r, tuple(region_weights))
    return histogram_loss(x_p, t, region_weights)


# ---------------------------------------------------------------------------
# global patch loss


def _patches(feat: torch.Tensor, size: int, stride: int = 1) -> torch.Tensor:
    """CxHxW -> P x (C*size*size) patch matrix."""
    return F.unfold(feat[None], size, stride=stride)[0].T


def nearest_patches(query: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Index of the reference patch with highest normalized cross-correlation.

    Ties resolve to the lowest index.
    """
    q = F.normalize(query.detach(), dim=1)
    r = F.normalize(ref.detach(), dim=1)
    ncc = (q @ r.T).cpu().numpy()
    return torch.as_tensor(np.argmax(ncc, axis=1))


def global_loss(fused: torch.Tensor, feat_r: FeaturePyramid, patch_size: int = 3,
                stride: int = 1) -> torch.Tensor:
    """Sum over pyramid levels and query patches of ||patch - nearest reference patch||_F.

    ``fused`` is resampled to each level's resolution; levels whose channel
    count differs from ``fused`` are skipped.  Reference patches are always
    dense (stride 1); ``stride`` applies to the query patches.
    """
    total = fused.new_zeros(())
    used = 0
    for lvl in feat_r.levels:
        if lvl.shape[0] != fused.shape[0]:
            continue
        if patch_size > min(lvl.shape[-2:]):
            raise ValueError(f"patch_size {patch_size} exceeds feature map {tuple(lvl.shape[-2:])}")
        f = fused
        if f.shape[-2:] != lvl.shape[-2:]:
            f = F.interpolate(f[None], size=lvl.shape[-2:], mode="bilinear", align_corners=False)[0]
        q = _patches(f, patch_size, stride)
        r = _patches(lvl, patch_size, 1)
        nn_idx = nearest_patches(q, r)
        total = total + torch.linalg.vector_norm(q - r[nn_idx], dim=1).sum()
        used += 1
    if not used:
        raise ValueError("no pyramid level matches the fused channel count")
    return total


# ---------------------------------------------------------------------------
# adversarial


def cosine_distance(e1: torch.Tensor, e2: torch.Tensor, tol: float = 1e-3) -> torch.Tensor:
    """1 - cos(e1, e2) for unit vectors (broadcasts over leading dims)."""
    for e in (e1, e2):
        if (e.detach().norm(dim=-1) - 1).abs().max() > tol:
            raise ValueError("cosine_distance expects unit-norm embeddings")
    return 1 - (e1 * e2).sum(-1)


class AdversarialObjective:
    """Ensemble adversarial term with cached source/target embeddings.

    impersonate: mean_k [ min_t D_k(x_p, x_t) - D_k(x_p, x_s) ]
    dodge:       mean_k [ -D_k(x_p, x_s) ]
    """

    def __init__(self, surrogates: Sequence[EmbedderBackend], x_s: torch.Tensor,
                 targets: Optional[Sequence[torch.Tensor]] = None, mode: str = "impersonate"):
        if not surrogates:
            raise ValueError("adversarial loss needs at least one surrogate")
        if mode not in ("impersonate", "dodge"):
            raise ValueError(f"unknown attack mode {mode!r}")
        if mode == "impersonate" and not targets:
            raise ValueError("impersonation needs at least one target image")
        if mode == "dodge" and targets:
            log.warning("target images are ignored in dodge mode")
            targets = None
        self.surrogates = list(surrogates)
        self.mode = mode
        with torch.no_grad():
            self.source_emb = [embed_face(s, x_s) for s in self.surrogates]
            self.target_emb = None
            if targets:
                self.target_emb = [embed_face(s, torch.stack(list(targets))) for s in self.surrogates]

    def per_surrogate(self, x_p: torch.Tensor) -> List[torch.Tensor]:
        terms = []
        for k, s in enumerate(self.surrogates):
            e = embed_face(s, x_p)
            term = -cosine_distance(e, self.source_emb[k])
            if self.mode == "impersonate":
                term = term + cosine_distance(e[None], self.target_emb[k]).min()
            terms.append(term)
        return terms

    def distances(self, x_p: torch.Tensor) -> Dict[str, List[float]]:
        """Per-surrogate D(x_p, x_s) and (impersonation) min-target D, for logging."""
        out = {"source": [], "target": []}
        with torch.no_grad():
            for k, s in enumerate(self.surrogates):
                e = embed_face(s, x_p)
                out["source"].append(float(cosine_distance(e, self.source_emb[k])))
                if self.target_emb is not None:
                    out["target"].append(float(cosine_distance(e[None], self.target_emb[k]).min()))
        return out

    def __call__(self, x_p: torch.Tensor) -> torch.Tensor:
        terms = self.per_surrogate(x_p)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total / len(terms)


def adversarial_loss(x_p, x_s, x_t, surrogates, targets=None, mode="impersonate") -> torch.Tensor:
    """Uncached form; ``targets`` (a list) replaces ``x_t`` for multi-target runs."""
    tlist = list(targets) if targets else ([x_t] if x_t is not None else None)
    return AdversarialObjective(surrogates, x_s, tlist, mode)(x_p)


# ---------------------------------------------------------------------------
# total


def total_loss(components: Dict[str, torch.Tensor], weights: LossWeights):
    """Weighted sum of the four components.

    Returns ``(total_tensor, LossBreakdown)``; the breakdown stores the
    unweighted component values.
    """
    vals = {}
    for name in ("struc", "hist", "glob", "adv"):
        v = components[name]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise OptimizationFault(f"loss component {name!r} is not finite", component=name)
        vals[name] = v
    num = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for k, v in vals.items()}
    total = (weights.lambda_struc * vals["struc"] + weights.lambda_hist * vals["hist"]
             + weights.lambda_glob * vals["glob"] + weights.lambda_adv * vals["adv"])
    bd = LossBreakdown(num["struc"], num["hist"], num["glob"], num["adv"],
                       float(total.detach()) if isinstance(total, torch.Tensor) else float(total))
    return total, bd

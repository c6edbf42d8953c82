"""Pretrained-network adapters and deterministic toy stand-ins.

The pipeline only talks to four capabilities: a multi-scale feature encoder,
face-recognition embedders, a ViT key extractor and a face parser.  Real
weights plug in through :func:`register_backend`; the toy implementations here
are small frozen-random torch modules that keep the whole pipeline testable
without downloads.
"""

from __future__ import annotations

import logging
import math
import functools
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import BackendFault, ConfigurationError

log = logging.getLogger(__name__)

REGIONS = ("eyes", "lips", "skin")
MASK_LABELS = REGIONS + ("background",)
DEFAULT_DOWNSAMPLE = 16
WEIGHTS_ENV = "MAKEUP_PRIOR_WEIGHTS"

# 19-class face-parsing convention (CelebAMask-HQ ordering, as emitted by BiSeNet).
PARSER_CLASSES = (
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye", "eye_g",
    "l_ear", "r_ear", "ear_r", "nose", "mouth", "u_lip", "l_lip", "neck",
    "neck_l", "cloth", "hair", "hat",
)
LABEL_MAP = {
    PARSER_CLASSES.index("l_brow"): "eyes",
    PARSER_CLASSES.index("r_brow"): "eyes",
    PARSER_CLASSES.index("l_eye"): "eyes",
    PARSER_CLASSES.index("r_eye"): "eyes",
    PARSER_CLASSES.index("u_lip"): "lips",
    PARSER_CLASSES.index("l_lip"): "lips",
    PARSER_CLASSES.index("skin"): "skin",
    PARSER_CLASSES.index("nose"): "skin",
}


def check_image(img: torch.Tensor, factor: int = DEFAULT_DOWNSAMPLE) -> torch.Tensor:
    """Validate a 3xHxW (or Bx3xHxW) RGB raster in [0, 1]."""
    if not isinstance(img, torch.Tensor):
        raise ConfigurationError(f"image must be a torch.Tensor, got {type(img).__name__}")
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise ConfigurationError(f"image must have shape 3xHxW, got {tuple(img.shape)}")
    h, w = img.shape[-2:]
    if h < 32 or w < 32 or h % factor or w % factor:
        raise ConfigurationError(
            f"image size {h}x{w} must be >= 32 and divisible by {factor}")
    if not torch.isfinite(img).all():
        raise ConfigurationError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ConfigurationError("image values must lie in [0, 1]")
    return img


def _batched(img: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    return img, False


@dataclass
class FeaturePyramid:
    """Multi-scale feature maps, ordered coarse-to-fine.

    ``levels`` hold CxHxW tensors; ``scales`` the matching factor relative to
    the input raster.  ``resized_from`` records the original input size when
    the adapter had to resample.
    """

    levels: List[torch.Tensor]
    scales: List[float]
    resized_from: Optional[Tuple[int, int]] = None

    def __len__(self):
        return len(self.levels)

    def closest(self, size: Tuple[int, int]) -> int:
        """Index of the level whose spatial size is closest to ``size``."""
        target = math.log2(size[0] * size[1])
        dists = [abs(math.log2(l.shape[-2] * l.shape[-1]) - target) for l in self.levels]
        return int(np.argmin(dists))

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([l.detach() for l in self.levels], list(self.scales),
                              self.resized_from)


@dataclass
class KeySet:
    keys: torch.Tensor                 # N x C, class token (if any) in row 0
    layer_index: int
    patch_grid: Tuple[int, int]
    has_cls_token: bool

    @property
    def patch_keys(self) -> torch.Tensor:
        return self.keys[1:] if self.has_cls_token else self.keys


@dataclass
class RegionMaskSet:
    """Soft per-region masks for one image.

    ``metadata`` carries ``empty_regions`` (regions with no pixels) and
    ``warnings`` (e.g. unknown parser labels that were mapped to background).
    """

    masks: Dict[str, torch.Tensor]
    smoothing_sigma: float
    metadata: Dict[str, list] = field(default_factory=lambda: {"empty_regions": [], "warnings": []})

    def __post_init__(self):
        if "background" not in self.masks:
            fg = sum(self.masks[r] for r in REGIONS)
            self.masks["background"] = (1 - fg).clamp(0, 1)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.masks["skin"].shape)

    def __getitem__(self, region: str) -> torch.Tensor:
        return self.masks[region]

    def is_empty(self, region: str) -> bool:
        return bool(self.masks[region].sum() <= 0)

    def resized(self, size: Tuple[int, int]) -> Dict[str, torch.Tensor]:
        """Masks area-averaged (or bilinearly upsampled) to ``size``."""
        out = {}
        for name, m in self.masks.items():
            m4 = m[None, None]
            if size[0] <= m.shape[0] and size[1] <= m.shape[1]:
                out[name] = F.adaptive_avg_pool2d(m4, size)[0, 0]
            else:
                out[name] = F.interpolate(m4, size=size, mode="bilinear", align_corners=False)[0, 0]
        return out

    def overlap(self, a: str, b: str) -> float:
        return float((self.masks[a] * self.masks[b]).mean())


@dataclass(frozen=True)
class Preprocessing:
    """How an embedder wants its input: per-channel mean/std after scaling to value_range."""

    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    value_range: Tuple[float, float] = (0.0, 1.0)
    input_size: Optional[Tuple[int, int]] = None

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.value_range
        x = x * (hi - lo) + lo
        if self.input_size is not None and tuple(x.shape[-2:]) != tuple(self.input_size):
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        mean = x.new_tensor(self.mean).view(1, 3, 1, 1)
        std = x.new_tensor(self.std).view(1, 3, 1, 1)
        return (x - mean) / std


class EncoderBackend(ABC):
    name: str
    scales: Tuple[float, ...]          # coarse-to-fine
    channels: Tuple[int, ...]
    input_size: Optional[Tuple[int, int]] = None

    @abstractmethod
    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Bx3xHxW -> list of BxCxhxw maps, coarse-to-fine."""


class EmbedderBackend(ABC):
    name: str
    embed_dim: int
    preprocessing: Preprocessing

    @property
    def input_size(self):
        return self.preprocessing.input_size

    @abstractmethod
    def raw_embed(self, x: torch.Tensor) -> torch.Tensor:
        """Preprocessed Bx3xHxW -> Bxd unnormalized features."""


class ViTBackend(ABC):
    name: str
    depth: int
    patch_size: int
    has_cls_token: bool

    @abstractmethod
    def keys(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        """Bx3xHxW -> BxNxC keys of attention layer ``layer`` (1-based)."""


class ParserBackend(ABC):
    name: str

    @abstractmethod
    def label_map(self, img: torch.Tensor) -> np.ndarray:
        """3xHxW image -> HxW integer class map (PARSER_CLASSES convention)."""


# ---------------------------------------------------------------------------
# operations


def extract_content_features(backend: EncoderBackend, img: torch.Tensor,
                             factor: int = DEFAULT_DOWNSAMPLE) -> FeaturePyramid:
    check_image(img, factor)
    x, single = _batched(img)
    resized_from = None
    if backend.input_size is not None and tuple(x.shape[-2:]) != tuple(backend.input_size):
        resized_from = tuple(x.shape[-2:])
        x = F.interpolate(x, size=backend.input_size, mode="bilinear", align_corners=False)
    h, w = x.shape[-2:]
    levels = backend.encode(x)
    if len(levels) != len(backend.scales):
        raise ConfigurationError(
            f"{backend.name} returned {len(levels)} levels, declared {len(backend.scales)}")
    for lvl, s, c in zip(levels, backend.scales, backend.channels):
        expected = (c, round(h * s), round(w * s))
        if tuple(lvl.shape[1:]) != expected:
            raise ConfigurationError(
                f"{backend.name} level shape {tuple(lvl.shape[1:])} != declared {expected}")
        if not torch.isfinite(lvl).all():
            raise BackendFault(f"{backend.name} produced non-finite activations")
    if single:
        levels = [l[0] for l in levels]
    return FeaturePyramid(list(levels), list(backend.scales), resized_from)


def embed_face(backend: EmbedderBackend, img: torch.Tensor) -> torch.Tensor:
    """Unit-norm identity embedding(s) of a 3xHxW or Bx3xHxW image."""
    x, single = _batched(img)
    raw = backend.raw_embed(backend.preprocessing.apply(x))
    if raw.shape[-1] != backend.embed_dim:
        raise BackendFault(f"{backend.name} returned dim {raw.shape[-1]}, declared {backend.embed_dim}")
    if not torch.isfinite(raw).all():
        raise BackendFault(f"{backend.name} produced non-finite embedding")
    emb = F.normalize(raw, dim=-1, eps=1e-12)
    return emb[0] if single else emb


def extract_keys(backend: ViTBackend, img: torch.Tensor, layer: Optional[int] = None) -> KeySet:
    if layer is None:
        layer = backend.depth
    if not 1 <= layer <= backend.depth:
        raise ValueError(f"layer {layer} outside 1..{backend.depth}")
    x, single = _batched(img)
    rows, cols = x.shape[-2] // backend.patch_size, x.shape[-1] // backend.patch_size
    k = backend.keys(x, layer)
    n_expected = rows * cols + int(backend.has_cls_token)
    if k.shape[1] != n_expected:
        raise BackendFault(f"{backend.name} returned {k.shape[1]} keys, expected {n_expected}")
    return KeySet(k[0] if single else k, layer, (rows, cols), backend.has_cls_token)


def default_smoothing_sigma(width: int) -> float:
    """3 px at 256 px width, scaled linearly."""
    return 3.0 * width / 256


def collapse_labels(labels: np.ndarray) -> Tuple[Dict[str, np.ndarray], List[str]]:
    """Map raw parser classes to binary eyes/lips/skin masks."""
    warnings = []
    unknown = np.setdiff1d(np.unique(labels), np.arange(len(PARSER_CLASSES)))
    if unknown.size:
        msg = f"unknown parser labels {unknown.tolist()} mapped to background"
        log.warning(msg)
        warnings.append(msg)
    masks = {r: np.zeros(labels.shape, dtype=np.float64) for r in REGIONS}
    for cls, region in LABEL_MAP.items():
        masks[region][labels == cls] = 1.0
    return masks, warnings


def parse_face(backend: ParserBackend, img: torch.Tensor,
               smoothing_sigma: Optional[float] = None) -> RegionMaskSet:
    check_image(img, 1)
    if smoothing_sigma is None:
        smoothing_sigma = default_smoothing_sigma(img.shape[-1])
    if smoothing_sigma < 0:
        raise ValueError("smoothing_sigma must be >= 0")
    labels = np.asarray(backend.label_map(img))
    if labels.shape != tuple(img.shape[-2:]):
        raise BackendFault(f"{backend.name} label map shape {labels.shape} != image size")
    binary, warnings = collapse_labels(labels)
    meta = {"empty_regions": [], "warnings": warnings}
    masks = {}
    for region in REGIONS:
        m = binary[region]
        if m.sum() == 0:
            meta["empty_regions"].append(region)
        elif smoothing_sigma > 0:
            m = ndimage.gaussian_filter(m, smoothing_sigma, mode="nearest")
        masks[region] = torch.as_tensor(np.clip(m, 0, 1), dtype=img.dtype)
    return RegionMaskSet(masks, float(smoothing_sigma), meta)


# ---------------------------------------------------------------------------
# toy backends


def _fill_(module: nn.Module, gen: torch.Generator, bias_scale: float = 0.1):
    """Fan-in scaled normal weights, small normal biases, frozen."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = torch.randn(p.shape, generator=gen) * bias_scale
        elif p.dim() > 1:
            fan_in = p[0].numel()
            p.data = torch.randn(p.shape, generator=gen) / math.sqrt(fan_in)
        else:
            p.data = torch.randn(p.shape, generator=gen) * 0.02
    module.requires_grad_(False)
    module.eval()


class ToyEncoder(nn.Module, EncoderBackend):
    """Strided tanh conv stack; one pyramid level per stride-2 stage past 1/2."""

    def __init__(self, seed: int = 0, channels: int = 16, scales=(1 / 8, 1 / 4)):
        super().__init__()
        self.name = f"toy:encoder:{seed}"
        self.scales = tuple(sorted(scales))
        self.channels = (channels,) * len(self.scales)
        depth = int(round(-math.log2(min(self.scales))))
        convs = [nn.Conv2d(3, channels, 3, stride=2, padding=1)]
        convs += [nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(depth - 1)]
        self.convs = nn.ModuleList(convs)
        self._taps = {int(round(-math.log2(s))) for s in self.scales}
        gen = torch.Generator().manual_seed(10_000 + seed)
        _fill_(self, gen)

    def encode(self, x):
        out = []
        h = x
        for i, conv in enumerate(self.convs, start=1):
            h = torch.tanh(conv(h))
            if i in self._taps:
                out.append(h)
        return out[::-1]


class ToyEmbedder(nn.Module, EmbedderBackend):
    """Small conv embedder built from a shared trunk plus a private perturbation.

    Embedders from one suite share ``trunk_seed`` so adversarial directions
    partially transfer between them, the way real recognizers trained on
    similar data do.  :meth:`fit_head` stands in for training: it centers and
    whitens the raw features on a calibration set so identities spread over
    the sphere the way a trained recognizer's embeddings do.
    """

    def __init__(self, trunk_seed: int, private_seed: int, embed_dim: int = 128,
                 private_scale: float = 0.35, input_size=(32, 32), name: Optional[str] = None):
        super().__init__()
        self.name = name or f"toy:embedder:{trunk_seed}:{private_seed}"
        self.embed_dim = embed_dim
        self.preprocessing = Preprocessing(input_size=tuple(input_size))
        self.conv1 = nn.Conv2d(3, 16, 5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.fc = nn.Linear(32 * 4 * 4, embed_dim)
        shared = {}
        gen = torch.Generator().manual_seed(20_000 + trunk_seed)
        _fill_(self, gen)
        for n, p in self.named_parameters():
            shared[n] = p.data.clone()
        gen = torch.Generator().manual_seed(30_000 + 97 * trunk_seed + private_seed)
        _fill_(self, gen)
        for n, p in self.named_parameters():
            p.data = (shared[n] + private_scale * p.data) / math.sqrt(1 + private_scale ** 2)
        self.register_buffer("center", torch.zeros(embed_dim))
        self.register_buffer("whiten", torch.eye(embed_dim))

    def features(self, x):
        h = torch.tanh(self.conv1(x))
        h = torch.tanh(self.conv2(h))
        h = F.adaptive_avg_pool2d(h, 4)
        return self.fc(h.flatten(1))

    def fit_head(self, images: torch.Tensor, shrinkage: float = 1.0) -> "ToyEmbedder":
        """Center on the mean feature of ``images`` and whiten with a shrunk covariance."""
        with torch.no_grad():
            r = self.features(self.preprocessing.apply(images.to(self.center.dtype))).double()
            mu = r.mean(0)
            cov = torch.cov((r - mu).T)
            cov = cov + shrinkage * torch.linalg.eigvalsh(cov).mean() * torch.eye(cov.shape[0], dtype=cov.dtype)
            w, v = torch.linalg.eigh(cov)
            self.center.copy_(mu)
            self.whiten.copy_(v @ torch.diag(w.rsqrt()) @ v.T)
        return self

    def raw_embed(self, x):
        return (self.features(x) - self.center) @ self.whiten


class LinearEmbedder(nn.Module, EmbedderBackend):
    """normalize(W . mean_rgb(preprocessed x) + b); closed-form toy for tests."""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, name="toy:linear"):
        super().__init__()
        self.name = name
        self.embed_dim = weight.shape[0]
        self.preprocessing = Preprocessing(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        self.weight = nn.Parameter(weight.clone(), requires_grad=False)
        self.bias = nn.Parameter(bias.clone(), requires_grad=False)

    def raw_embed(self, x):
        return x.mean(dim=(-2, -1)) @ self.weight.T + self.bias


class _Block(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def qkv_split(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        return q, k, v

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = (t.view(b, n, self.heads, -1).transpose(1, 2) for t in self.qkv_split(x))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module, ViTBackend):
    """Patch-embedding transformer with a class token and separable positions."""

    def __init__(self, seed: int = 0, patch_size: int = 16, dim: int = 32, depth: int = 3,
                 heads: int = 2, max_grid: int = 64):
        super().__init__()
        self.name = f"toy:vit:{seed}" if patch_size == 16 else f"toy:vit{patch_size}:{seed}"
        self.patch_size = patch_size
        self.depth = depth
        self.has_cls_token = True
        self.patch = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.row_pos = nn.Parameter(torch.zeros(max_grid, dim))
        self.col_pos = nn.Parameter(torch.zeros(max_grid, dim))
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        gen = torch.Generator().manual_seed(40_000 + seed)
        _fill_(self, gen)
        with torch.no_grad():
            for blk in self.blocks:
                blk.norm1.weight.fill_(1.0)
                blk.norm2.weight.fill_(1.0)
            self.row_pos.mul_(25.0)
            self.col_pos.mul_(25.0)

    def keys(self, x, layer):
        x = (x - 0.5) / 0.5
        tok = self.patch(x)
        rows, cols = tok.shape[-2:]
        pos = (self.row_pos[:rows, None, :] + self.col_pos[None, :cols, :]).reshape(rows * cols, -1)
        tok = tok.flatten(2).transpose(1, 2) + pos
        tok = torch.cat([self.cls.expand(tok.shape[0], -1, -1), tok], dim=1)
        for blk in self.blocks[: layer - 1]:
            tok = blk(tok)
        return self.blocks[layer - 1].qkv_split(tok)[1]


# Normalized (x0, y0, x1, y1) rectangles of the canonical aligned-face layout.
FACE_LAYOUT = {
    "skin": [(0.22, 0.16, 0.78, 0.90)],
    "nose": [(0.44, 0.46, 0.56, 0.62)],
    "l_brow": [(0.30, 0.30, 0.45, 0.34)],
    "r_brow": [(0.55, 0.30, 0.70, 0.34)],
    "l_eye": [(0.31, 0.38, 0.44, 0.44)],
    "r_eye": [(0.56, 0.38, 0.69, 0.44)],
    "u_lip": [(0.38, 0.68, 0.62, 0.72)],
    "l_lip": [(0.38, 0.72, 0.62, 0.77)],
    "hair": [(0.18, 0.04, 0.82, 0.16)],
}


def rasterize_layout(layout: Dict[str, Sequence[Tuple[float, float, float, float]]],
                     size: Tuple[int, int]) -> np.ndarray:
    """Paint layout rectangles in insertion order onto an integer class map."""
    h, w = size
    labels = np.zeros((h, w), dtype=np.int64)
    for name, rects in layout.items():
        cls = PARSER_CLASSES.index(name) if isinstance(name, str) else int(name)
        for x0, y0, x1, y1 in rects:
            labels[int(round(y0 * h)):int(round(y1 * h)), int(round(x0 * w)):int(round(x1 * w))] = cls
    return labels


class SyntheticParser(ParserBackend):
    """Template parser for pre-aligned faces: paints a fixed rectangle layout.

    Inputs are assumed aligned, so the class map depends only on image size.
    Pass ``layout`` to override (keys are class names or raw integer labels).
    """

    def __init__(self, layout=None, name="toy:parser:0"):
        self.name = name
        self.layout = dict(FACE_LAYOUT if layout is None else layout)

    def label_map(self, img):
        return rasterize_layout(self.layout, tuple(img.shape[-2:]))


TOY_CALIBRATION_OFFSET = 50_000


@dataclass
class ToySuite:
    encoder: ToyEncoder
    embedders: Tuple[ToyEmbedder, ...]
    vit: ToyViT
    parser: SyntheticParser
    seed: int

    def to(self, dtype):
        self.encoder.to(dtype)
        self.vit.to(dtype)
        for e in self.embedders:
            e.to(dtype)
        return self

    def by_name(self) -> Dict[str, object]:
        out = {self.encoder.name: self.encoder, self.vit.name: self.vit, self.parser.name: self.parser}
        out.update({e.name: e for e in self.embedders})
        return out


def make_toy_suite(seed: int = 0, embed_dim: int = 128, vit_patch: int = 16,
                   embed_input: Tuple[int, int] = (32, 32)) -> ToySuite:
    """Encoder, four related-but-distinct embedders, ViT and parser, all from ``seed``."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    from .toyfaces import labeled_set

    # calibration identities sit far from the ones used by tests and experiments
    calib, _ = labeled_set(300, 1, embed_input[0], seed=seed, offset=TOY_CALIBRATION_OFFSET)
    embedders = tuple(
        ToyEmbedder(seed, k, embed_dim, input_size=embed_input,
                    name=f"toy:embedder{k}:{seed}").fit_head(calib)
        for k in range(1, 5))
    return ToySuite(ToyEncoder(seed), embedders, ToyViT(seed, patch_size=vit_patch),
                    SyntheticParser(name=f"toy:parser:{seed}"), seed)


# ---------------------------------------------------------------------------
# registry

_FACTORIES: Dict[str, Callable[[Optional[str]], object]] = {}


def register_backend(name: str, factory: Callable[[Optional[str]], object]) -> None:
    """Register an adapter factory taking an optional weight-file path."""
    _FACTORIES[name] = factory


def weights_dir() -> Optional[str]:
    return os.environ.get(WEIGHTS_ENV)


@functools.lru_cache(maxsize=8)
def _cached_embedders(seed: int, embed_dim: int):
    # fitting the whitening heads renders a calibration set; do it once per seed
    return make_toy_suite(seed, embed_dim).embedders


def resolve_backend(name: str, weights: Optional[str] = None, embed_dim: int = 128):
    """Build a backend from a registry name or ``toy:<kind>:<seed>``.

    Toy kinds: encoder, vit (or vit<patch>, e.g. vit8), parser,
    embedder1..embedder4.
    """
    if name.startswith("toy:"):
        parts = name.split(":")
        if len(parts) != 3 or not parts[2].isdigit():
            raise ConfigurationError(f"malformed toy backend name {name!r}")
        kind, seed = parts[1], int(parts[2])
        if kind == "encoder":
            return ToyEncoder(seed)
        if kind == "vit":
            return ToyViT(seed)
        if kind.startswith("vit") and kind[3:].isdigit():
            return ToyViT(seed, patch_size=int(kind[3:]))
        if kind == "parser":
            return SyntheticParser(name=name)
        if kind.startswith("embedder") and kind[8:] in ("1", "2", "3", "4"):
            return _cached_embedders(seed, embed_dim)[int(kind[8:]) - 1]
        raise ConfigurationError(f"unknown toy backend kind {kind!r}")
    if name not in _FACTORIES:
        raise ConfigurationError(f"unknown backend {name!r}")
    if weights and not os.path.isabs(weights) and weights_dir():
        weights = os.path.join(weights_dir(), weights)
    return _FACTORIES[name](weights)

"""Synthetic pre-aligned faces with identities, for toy experiments and fixtures.

Faces follow :data:`backends.FACE_LAYOUT`, so the template parser segments
them correctly.  An identity fixes the facial colors and a smooth skin
texture; background and hair are shared by everyone, so identity lives in
the face region only.  Individual images add lighting and sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from .backends import FACE_LAYOUT


@dataclass(frozen=True)
class Identity:
    label: str
    skin: Tuple[float, float, float]
    hair: Tuple[float, float, float]
    eye: Tuple[float, float, float]
    brow: Tuple[float, float, float]
    lip: Tuple[float, float, float]
    background: Tuple[float, float, float]
    texture_seed: int
    texture_amp: float


def make_identity(index: int, seed: int = 0) -> Identity:
    rng = np.random.default_rng([seed, index, 1])
    skin = np.clip(np.array([0.78, 0.58, 0.47]) + rng.normal(0, 0.09, 3), 0.15, 0.95)
    return Identity(
        label=f"id{index:03d}",
        skin=tuple(skin),
        hair=(0.22, 0.16, 0.12),
        eye=tuple(rng.uniform(0.05, 0.45, 3)),
        brow=tuple(rng.uniform(0.05, 0.35, 3)),
        lip=tuple(np.clip(skin * rng.uniform(0.6, 0.95) + rng.normal(0, 0.05, 3), 0.05, 0.95)),
        background=(0.55, 0.60, 0.65),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        texture_amp=float(rng.uniform(0.2, 0.35)),
    )


def _paint(canvas, rects, color, size, soft=None):
    h, w = size
    for x0, y0, x1, y1 in rects:
        sl = (slice(int(round(y0 * h)), int(round(y1 * h))), slice(int(round(x0 * w)), int(round(x1 * w))))
        canvas[sl] = color if soft is None else canvas[sl] * (1 - soft) + np.asarray(color) * soft


def render_face(ident: Identity, size: int = 64, variation: int = 0, seed: int = 0,
                lighting: float = 0.04, noise: float = 0.01,
                makeup: Optional[Dict[str, Tuple[float, float, float]]] = None) -> torch.Tensor:
    """3xHxW image of ``ident``; ``variation`` picks lighting/noise for this shot."""
    hw = (size, size)
    img = np.empty((size, size, 3))
    img[:] = ident.background
    layout = FACE_LAYOUT
    _paint(img, layout["hair"], ident.hair, hw)
    face = np.zeros((size, size, 3))
    face[:] = ident.skin
    tex_rng = np.random.default_rng(ident.texture_seed)
    tex = ndimage.gaussian_filter(tex_rng.normal(0, 1, (size, size, 3)), (size / 10, size / 10, 0))
    tex = tex / (np.abs(tex).max() + 1e-12) * ident.texture_amp
    face = face + tex
    skin_mask = np.zeros((size, size))
    _paint(skin_mask, layout["skin"], 1.0, hw)
    img = img * (1 - skin_mask[..., None]) + face * skin_mask[..., None]
    _paint(img, layout["nose"], np.clip(np.asarray(ident.skin) * 0.92, 0, 1), hw, soft=0.5)
    _paint(img, layout["l_brow"] + layout["r_brow"], ident.brow, hw)
    _paint(img, layout["l_eye"] + layout["r_eye"], ident.eye, hw)
    _paint(img, layout["u_lip"] + layout["l_lip"], ident.lip, hw)
    if makeup:
        if "lips" in makeup:
            _paint(img, layout["u_lip"] + layout["l_lip"], makeup["lips"], hw, soft=0.8)
        if "eyes" in makeup:
            _paint(img, layout["l_brow"] + layout["r_brow"], makeup["eyes"], hw, soft=0.6)
            _paint(img, layout["l_eye"] + layout["r_eye"], makeup["eyes"], hw, soft=0.5)
        if "skin" in makeup:
            blush = [(0.25, 0.50, 0.40, 0.62), (0.60, 0.50, 0.75, 0.62)]
            _paint(img, blush, makeup["skin"], hw, soft=0.35)
    rng = np.random.default_rng([seed, ident.texture_seed % 100_000, variation, 2])
    img = img * (1 + rng.uniform(-lighting, lighting)) + rng.normal(0, noise, img.shape)
    return torch.from_numpy(np.clip(img, 0, 1).transpose(2, 0, 1).copy()).float()


MAKEUP_STYLES = [
    {"lips": (0.70, 0.05, 0.20), "eyes": (0.35, 0.15, 0.45), "skin": (0.95, 0.45, 0.50)},
    {"lips": (0.55, 0.10, 0.10), "eyes": (0.20, 0.25, 0.40), "skin": (0.90, 0.55, 0.45)},
    {"lips": (0.85, 0.30, 0.40), "eyes": (0.50, 0.35, 0.20), "skin": (0.98, 0.60, 0.60)},
    {"lips": (0.40, 0.05, 0.25), "eyes": (0.10, 0.10, 0.10), "skin": (0.85, 0.40, 0.40)},
]


def makeup_reference(style: int = 0, size: int = 64, seed: int = 0) -> torch.Tensor:
    ident = make_identity(10_000 + style, seed)
    return render_face(ident, size, seed=seed, makeup=MAKEUP_STYLES[style % len(MAKEUP_STYLES)])


def labeled_set(n_identities: int, per_identity: int, size: int = 64, seed: int = 0,
                offset: int = 0) -> Tuple[torch.Tensor, List[str]]:
    """Stack of ``n_identities * per_identity`` images with identity labels."""
    imgs, labels = [], []
    for i in range(offset, offset + n_identities):
        ident = make_identity(i, seed)
        for v in range(per_identity):
            imgs.append(render_face(ident, size, variation=v, seed=seed))
            labels.append(ident.label)
    return torch.stack(imgs), labels

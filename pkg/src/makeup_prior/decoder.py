"""Untrained conditional decoder with spatially-adaptive modulation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backends import FeaturePyramid, RegionMaskSet
from .errors import ConfigurationError

CHECKPOINT_SCHEMA = "makeup-prior/checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class DecoderArch:
    num_blocks: int = 4
    base_channels: int = 64
    output_size: Tuple[int, int] = (256, 256)
    condition_channels: Tuple[int, ...] = (16, 16, 16, 16)
    input_channels: int = 16
    modulation_hidden: int = 32

    def __post_init__(self):
        self.output_size = tuple(self.output_size)
        self.condition_channels = tuple(self.condition_channels)
        if self.num_blocks < 1:
            raise ConfigurationError("arch.num_blocks must be >= 1")
        if len(self.condition_channels) != self.num_blocks:
            raise ConfigurationError(
                f"arch.condition_channels needs {self.num_blocks} entries, "
                f"got {len(self.condition_channels)}")
        f = 2 ** self.num_blocks
        if self.output_size[0] % f or self.output_size[1] % f:
            raise ConfigurationError(
                f"arch.output_size {self.output_size} not divisible by 2**num_blocks = {f}")
        if self.base_channels >> self.num_blocks < 1:
            raise ConfigurationError("arch.base_channels too small for num_blocks halvings")

    @property
    def input_size(self) -> Tuple[int, int]:
        f = 2 ** self.num_blocks
        return (self.output_size[0] // f, self.output_size[1] // f)

    def block_channels(self) -> List[Tuple[int, int]]:
        """(in, out) channels per block; width halves every block."""
        return [(self.base_channels >> b, self.base_channels >> (b + 1))
                for b in range(self.num_blocks)]

    def block_sizes(self) -> List[Tuple[int, int]]:
        h, w = self.input_size
        return [(h << (b + 1), w << (b + 1)) for b in range(self.num_blocks)]

    def parameter_count(self) -> int:
        """Closed-form count of every weight and bias in :class:`ConditionalDecoder`."""
        k = 9
        hid = self.modulation_hidden
        n = self.input_channels * self.base_channels * k + self.base_channels
        for (cin, cout), cond in zip(self.block_channels(), self.condition_channels):
            n += cin * cout * k + cout                        # block conv
            n += cond * hid * k + hid                         # modulation trunk
            n += 2 * (hid * cout * k + cout)                  # gamma and beta heads
        last = self.base_channels >> self.num_blocks
        n += last * 3 * k + 3
        return n


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def amc_modulate(activation: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                 eps: float = 1e-5) -> torch.Tensor:
    """normalize(activation) * (1 + gamma) + beta, normalized per channel over space."""
    return instance_norm(activation, eps) * (1 + gamma) + beta


class AMC(nn.Module):
    """Modulation layer: gamma/beta maps predicted from a spatial condition."""

    def __init__(self, channels: int, cond_channels: int, hidden: int):
        super().__init__()
        self.shared = nn.Conv2d(cond_channels, hidden, 3, padding=1)
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, cond):
        if cond.shape[-2:] != x.shape[-2:]:
            cond = F.interpolate(cond, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = F.leaky_relu(self.shared(cond), 0.2)
        return amc_modulate(x, self.gamma(h), self.beta(h))


class UpBlock(nn.Module):
    def __init__(self, cin, cout, cond, hidden):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.amc = AMC(cout, cond, hidden)

    def forward(self, x, cond):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.amc(self.conv(x), cond), 0.2)


class ConditionalDecoder(nn.Module):
    """G(makeup features, source pyramid) -> RGB image in [0, 1].

    Weights use fan-in scaled normals; the gamma/beta heads of every AMC layer
    start at zero, so at initialization each modulation is a plain instance
    normalization.
    """

    def __init__(self, arch: DecoderArch, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.stem = nn.Conv2d(arch.input_channels, arch.base_channels, 3, padding=1)
        self.blocks = nn.ModuleList(
            UpBlock(cin, cout, cond, arch.modulation_hidden)
            for (cin, cout), cond in zip(arch.block_channels(), arch.condition_channels))
        self.head = nn.Conv2d(arch.base_channels >> arch.num_blocks, 3, 3, padding=1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.split(".")[-2] in ("gamma", "beta"):
                    p.zero_()
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
        self.seed = seed

    def forward(self, makeup_feat: torch.Tensor, conditions: Sequence[torch.Tensor]) -> torch.Tensor:
        x, single = (makeup_feat[None], True) if makeup_feat.dim() == 3 else (makeup_feat, False)
        h = F.leaky_relu(self.stem(x), 0.2)
        for blk, cond in zip(self.blocks, conditions):
            if cond.dim() == 3:
                cond = cond[None]
            h = blk(h, cond)
        out = torch.sigmoid(self.head(h))
        return out[0] if single else out


def init_decoder(arch: DecoderArch, seed: int) -> ConditionalDecoder:
    return ConditionalDecoder(arch, seed)


def injection_plan(arch: DecoderArch, pyramid: FeaturePyramid) -> List[Dict]:
    """Which pyramid level conditions each block and whether it gets resampled."""
    plan = []
    for b, size in enumerate(arch.block_sizes()):
        idx = pyramid.closest(size)
        lvl = pyramid.levels[idx]
        if lvl.shape[-3] != arch.condition_channels[b]:
            raise ConfigurationError(
                f"block {b} expects {arch.condition_channels[b]} condition channels, "
                f"pyramid level {idx} has {lvl.shape[-3]}")
        plan.append({"block": b, "level": idx, "size": list(size),
                     "resampled": tuple(lvl.shape[-2:]) != tuple(size)})
    return plan


def block_conditions(arch: DecoderArch, pyramid: FeaturePyramid) -> List[torch.Tensor]:
    conds = []
    for step in injection_plan(arch, pyramid):
        lvl = pyramid.levels[step["level"]]
        if lvl.dim() == 3:
            lvl = lvl[None]
        if step["resampled"]:
            lvl = F.interpolate(lvl, size=tuple(step["size"]), mode="bilinear", align_corners=False)
        conds.append(lvl)
    return conds


def decode(params: ConditionalDecoder, makeup_feat: torch.Tensor,
           source_pyramid: FeaturePyramid) -> torch.Tensor:
    arch = params.arch
    if tuple(makeup_feat.shape[-2:]) != arch.input_size:
        raise ValueError(
            f"makeup features are {tuple(makeup_feat.shape[-2:])}, decoder expects {arch.input_size}")
    if makeup_feat.shape[-3] != arch.input_channels:
        raise ValueError(
            f"makeup features have {makeup_feat.shape[-3]} channels, decoder expects {arch.input_channels}")
    return params(makeup_feat, block_conditions(arch, source_pyramid))


def composite_background(x_p: torch.Tensor, x_s: torch.Tensor, masks_s: RegionMaskSet) -> torch.Tensor:
    """Keep source pixels where the background mask is on."""
    if x_p.shape != x_s.shape:
        raise ValueError(f"shape mismatch {tuple(x_p.shape)} vs {tuple(x_s.shape)}")
    bg = masks_s["background"].to(x_p)
    return bg * x_s + (1 - bg) * x_p


def save_checkpoint(path, decoder: ConditionalDecoder, extra: Optional[Dict[str, object]] = None,
                    meta: Optional[Dict] = None) -> None:
    """Versioned checkpoint: arch, seed and weight tensors.

    ``extra`` maps names to further modules (or their state dicts), e.g. the
    fusion projection optimized alongside the decoder.
    """
    from .io import atomic_write_bytes
    import io as _io
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(decoder.arch),
        "seed": decoder.seed,
        "decoder": {k: v.detach().clone() for k, v in decoder.state_dict().items()},
        "extra": {k: {n: t.detach().clone() for n, t in
                      (m.state_dict() if isinstance(m, nn.Module) else m).items()}
                  for k, m in (extra or {}).items()},
        "meta": meta or {},
    }
    buf = _io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Dict:
    """Returns dict with ``decoder`` (module), ``extra`` state dicts and ``meta``."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise ConfigurationError(f"{path}: not a decoder checkpoint")
    if int(payload.get("version", 0)) > CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"{path}: checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    arch = DecoderArch(**payload["arch"])
    dec = ConditionalDecoder(arch, payload["seed"])
    first = next(iter(payload["decoder"].values()))
    dec.to(first.dtype)
    dec.load_state_dict(payload["decoder"])
    return {"decoder": dec, "extra": payload["extra"], "meta": payload["meta"]}

"""Test-time optimization of the decoder for single images and video frames."""

from __future__ import annotations

import contextlib
import copy
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from . import __version__
from .backends import (EmbedderBackend, EncoderBackend, FeaturePyramid, ParserBackend,
                       RegionMaskSet, ToySuite, ViTBackend, check_image,
                       extract_content_features, extract_keys, parse_face)
from .correspondence import (FusionProjection, WarpConfig, centralize, region_correlation,
                             warp)
from .decoder import (ConditionalDecoder, DecoderArch, composite_background, decode,
                      injection_plan, save_checkpoint)
from .errors import ConfigurationError, EmptyRegion, MakeupPriorError, OptimizationFault
from .io import to_dict
from .losses import (AdversarialObjective, LossBreakdown, LossWeights, build_histogram_targets,
                     global_loss, histogram_loss, structure_loss, total_loss)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "makeup-prior/run-manifest"
MANIFEST_VERSION = 1


@dataclass
class OptimizerConfig:
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 2e-4

    def __post_init__(self):
        if self.name.lower() != "adam":
            raise ConfigurationError(f"optimizer.name must be 'adam', got {self.name!r}")
        if self.lr <= 0:
            raise ConfigurationError("optimizer.lr must be > 0")


@dataclass
class RunConfig:
    """Everything one protection run depends on.

    The ``H(x_p, x_s) <= eps`` perturbation budget of the noise-based
    formulation has no counterpart here: the decoder prior stands in for it.
    """

    iterations: int = 450
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    warp: WarpConfig = field(default_factory=WarpConfig)
    arch: DecoderArch = field(default_factory=DecoderArch)
    seed: int = 0
    surrogate_names: List[str] = field(default_factory=list)
    attack_mode: str = "impersonate"
    background_composite: bool = True
    structure_mode: str = "frobenius"
    vit_layer: Optional[int] = None
    glob_patch_size: int = 3
    smoothing_sigma: Optional[float] = None
    grad_clip: float = 10.0
    per_frame_iterations: Optional[int] = None
    keyframe_interval: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.attack_mode not in ("impersonate", "dodge"):
            raise ConfigurationError(f"attack_mode must be impersonate or dodge, got {self.attack_mode!r}")
        if self.structure_mode not in ("frobenius", "contrastive"):
            raise ConfigurationError(f"unknown structure_mode {self.structure_mode!r}")
        if self.per_frame_iterations is not None and self.per_frame_iterations < 1:
            raise ConfigurationError("per_frame_iterations must be >= 1")
        if self.keyframe_interval < 0:
            raise ConfigurationError("keyframe_interval must be >= 0")

    def validate_surrogates(self):
        if not self.surrogate_names:
            raise ConfigurationError("at least one surrogate is required (surrogate_names)")


def desk_config(image_size: int = 64, channels: int = 16, num_blocks: int = 2,
                base_channels: int = 32, **overrides) -> RunConfig:
    """RunConfig with a decoder sized for the toy backends at ``image_size``."""
    arch = DecoderArch(num_blocks=num_blocks, base_channels=base_channels,
                       output_size=(image_size, image_size),
                       condition_channels=(channels,) * num_blocks,
                       input_channels=channels, modulation_hidden=16)
    warp_cfg = overrides.pop("warp", WarpConfig(projection_dim=channels))
    return RunConfig(arch=arch, warp=warp_cfg, **overrides)


TOY_LR = 5e-3
TOY_LAMBDA_ADV = 50.0


def toy_run_config(image_size: int = 32, iterations: int = 100, seed: int = 0,
                   backend_seed: int = 0, **overrides) -> RunConfig:
    """Desk-scale run against toy surrogates 1-3 (embedder 4 is left for black-box tests).

    The toy losses sit on different scales from the pretrained networks', so
    the learning rate and adversarial weight are raised (``TOY_LR``,
    ``TOY_LAMBDA_ADV``); the other weights keep their defaults.
    """
    overrides.setdefault("optimizer", OptimizerConfig(lr=TOY_LR))
    overrides.setdefault("weights", LossWeights(lambda_adv=TOY_LAMBDA_ADV))
    overrides.setdefault("surrogate_names", [f"toy:embedder{k}:{backend_seed}" for k in (1, 2, 3)])
    return desk_config(image_size, iterations=iterations, seed=seed, **overrides)


@dataclass
class Backends:
    encoder: EncoderBackend
    parser: ParserBackend
    vit: ViTBackend
    surrogates: Dict[str, EmbedderBackend]

    @classmethod
    def from_toy(cls, suite: ToySuite, surrogate_indices: Sequence[int] = (0, 1, 2)) -> "Backends":
        return cls(suite.encoder, suite.parser, suite.vit,
                   {suite.embedders[i].name: suite.embedders[i] for i in surrogate_indices})

    def select(self, names: Sequence[str]) -> List[EmbedderBackend]:
        missing = [n for n in names if n not in self.surrogates]
        if missing:
            raise ConfigurationError(f"unknown surrogate(s): {', '.join(missing)}")
        return [self.surrogates[n] for n in names]

    def identifiers(self) -> Dict[str, object]:
        return {"encoder": self.encoder.name, "parser": self.parser.name, "vit": self.vit.name,
                "surrogates": sorted(self.surrogates)}


@dataclass
class ProtectionRecord:
    source_id: str
    reference_id: str
    target_id: Optional[str]
    protected: torch.Tensor
    loss_trajectory: List[LossBreakdown]
    final_params_ref: Optional[str]
    config_snapshot: RunConfig
    wall_time: float
    init: Dict[str, object] = field(default_factory=dict)
    call_counts: Dict[str, int] = field(default_factory=dict)
    notes: Dict[str, object] = field(default_factory=dict)
    state: Optional[Dict[str, Dict[str, torch.Tensor]]] = field(default=None, repr=False)
    final_loss: Optional[LossBreakdown] = None

    def manifest(self, backends: Optional[Dict] = None) -> Dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "package_version": __version__,
            "source_id": self.source_id,
            "reference_id": self.reference_id,
            "target_id": self.target_id,
            "config": to_dict(self.config_snapshot),
            "seeds": {"decoder": self.init.get("seed"), "config": self.config_snapshot.seed},
            "init": self.init,
            "backends": backends or {},
            "call_counts": self.call_counts,
            "notes": self.notes,
            "checkpoint": self.final_params_ref,
            "loss_trajectory": [b.as_dict() for b in self.loss_trajectory],
            "final_loss": self.final_loss.as_dict() if self.final_loss else None,
            "timing": {"wall_time_s": self.wall_time},
        }


@contextlib.contextmanager
def _deterministic(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)
        torch.set_num_threads(threads)


class ProtectionProblem:
    """Per-run constants plus the differentiable forward pass.

    Everything that does not depend on the decoder weights (pyramids, masks,
    warped region features, histogram targets, source keys, source/target
    embeddings) is computed once in the constructor.
    """

    def __init__(self, x_s, x_r, x_t, cfg: RunConfig, backends: Backends,
                 targets: Optional[Sequence[torch.Tensor]] = None):
        cfg.validate_surrogates()
        self.cfg = cfg
        self.counts = {"encoder": 0, "parser": 0, "histogram_match": 0}
        self.notes: Dict[str, object] = {}
        for img in (x_s, x_r):
            check_image(img)
        if tuple(x_s.shape[-2:]) != cfg.arch.output_size:
            raise ConfigurationError(
                f"source is {tuple(x_s.shape[-2:])}, decoder output_size is {cfg.arch.output_size}")
        surrogates = backends.select(cfg.surrogate_names)
        if cfg.attack_mode == "impersonate":
            tlist = list(targets) if targets else ([x_t] if x_t is not None else [])
            if not tlist:
                raise ConfigurationError("impersonation requires a target image")
            for t in tlist:
                check_image(t)
        else:
            if x_t is not None or targets:
                log.warning("target image supplied in dodge mode; ignored")
                self.notes["ignored_target"] = True
            tlist = None

        self.x_s = x_s
        self.backends = backends
        self.pyr_s = self._encode(x_s)
        self.pyr_r = self._encode(x_r)
        self.masks_s = self._parse(x_s)
        self.masks_r = self._parse(x_r)

        lvl = cfg.warp.level
        if not -len(self.pyr_s) <= lvl < len(self.pyr_s):
            raise ConfigurationError(f"warp.level {lvl} outside the {len(self.pyr_s)}-level pyramid")
        fs = centralize(self.pyr_s.levels[lvl])
        fr = centralize(self.pyr_r.levels[lvl])
        self.warped: Dict[str, torch.Tensor] = {}
        skipped = []
        for region in cfg.warp.regions:
            try:
                a = region_correlation(fs, fr, self.masks_s, self.masks_r, region,
                                       cfg.warp.max_positions)
            except EmptyRegion as exc:
                skipped.append({"region": region, "side": exc.side})
                continue
            self.warped[region] = warp(a, centralize(fr * self.masks_r.resized(
                tuple(fr.shape[-2:]))[region].to(fr)), cfg.warp.temperature)
        if not self.warped:
            raise ConfigurationError("every correspondence region is empty")
        self.notes["skipped_regions"] = skipped
        self.corr_size = tuple(fs.shape[-2:])
        self.notes["fused_resampled"] = self.corr_size != cfg.arch.input_size
        self.notes["injection"] = injection_plan(cfg.arch, self.pyr_s)
        self.ref_central = FeaturePyramid([centralize(l) for l in self.pyr_r.levels],
                                          list(self.pyr_r.scales))

        self.hist = build_histogram_targets(x_s, x_r, self.masks_s, self.masks_r,
                                            tuple(cfg.weights.region_weights))
        self.counts["histogram_match"] = self.hist.match_calls
        if len(self.hist.skipped) == len(cfg.weights.region_weights):
            log.warning("no histogram region has support in both images")
        self.notes["histogram_skipped"] = list(self.hist.skipped)

        with torch.no_grad():
            self.source_keys = extract_keys(backends.vit, x_s, cfg.vit_layer)
        self.adv = AdversarialObjective(surrogates, x_s, tlist, cfg.attack_mode)

    def _encode(self, img) -> FeaturePyramid:
        self.counts["encoder"] += 1
        with torch.no_grad():
            return extract_content_features(self.backends.encoder, img)

    def _parse(self, img) -> RegionMaskSet:
        self.counts["parser"] += 1
        return parse_face(self.backends.parser, img, self.cfg.smoothing_sigma)

    def build_modules(self, seed: int) -> Tuple[ConditionalDecoder, FusionProjection]:
        channels = next(iter(self.warped.values())).shape[0]
        dec = ConditionalDecoder(self.cfg.arch, seed).to(self.x_s.dtype)
        proj = FusionProjection(self.cfg.warp.regions, channels, self.cfg.warp.projection_dim,
                                seed + 1).to(self.x_s.dtype)
        return dec, proj

    def forward(self, dec: ConditionalDecoder, proj: FusionProjection):
        fused = proj(self.warped)
        feat = fused
        if self.corr_size != self.cfg.arch.input_size:
            feat = F.interpolate(fused[None], size=self.cfg.arch.input_size, mode="bilinear",
                                 align_corners=False)[0]
        x_p = decode(dec, feat, self.pyr_s)
        if self.cfg.background_composite:
            x_p = composite_background(x_p, self.x_s, self.masks_s)
        return x_p, fused

    def losses(self, x_p, fused) -> Dict[str, torch.Tensor]:
        cfg = self.cfg
        return {
            "struc": structure_loss(self.x_s, x_p, self.backends.vit, cfg.structure_mode,
                                    source_keys=self.source_keys),
            "hist": histogram_loss(x_p, self.hist, cfg.weights.region_weights),
            "glob": global_loss(fused, self.ref_central, cfg.glob_patch_size),
            "adv": self.adv(x_p),
        }

    def evaluate(self, dec, proj) -> LossBreakdown:
        with torch.no_grad():
            x_p, fused = self.forward(dec, proj)
            return total_loss(self.losses(x_p, fused), self.cfg.weights)[1]


def optimize(problem: ProtectionProblem, dec: ConditionalDecoder, proj: FusionProjection,
             iterations: int, opt_state: Optional[Dict] = None
             ) -> Tuple[torch.Tensor, List[LossBreakdown], LossBreakdown, Dict]:
    """Run Adam on decoder + projection.

    ``opt_state`` resumes Adam's moment estimates (video warm starts).
    Returns the final image, the per-iteration breakdowns (each measured
    before that iteration's update), the breakdown at the final weights and
    the optimizer state.
    """
    cfg = problem.cfg
    params = [p for m in (dec, proj) for p in m.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.optimizer.lr,
                           betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    trajectory: List[LossBreakdown] = []
    for _ in range(iterations):
        opt.zero_grad(set_to_none=True)
        x_p, fused = problem.forward(dec, proj)
        try:
            total, bd = total_loss(problem.losses(x_p, fused), cfg.weights)
        except OptimizationFault as exc:
            exc.trajectory = list(trajectory)
            raise
        trajectory.append(bd)
        total.backward()
        if cfg.grad_clip and cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
    with torch.no_grad():
        x_p, fused = problem.forward(dec, proj)
        final = total_loss(problem.losses(x_p, fused), cfg.weights)[1]
    return x_p.detach().clamp(0, 1), trajectory, final, copy.deepcopy(opt.state_dict())


def _state(dec, proj):
    return {"decoder": {k: v.detach().clone() for k, v in dec.state_dict().items()},
            "projection": {k: v.detach().clone() for k, v in proj.state_dict().items()}}


def protect_image(x_s, x_r, x_t, cfg: RunConfig, backends: Backends,
                  ids: Tuple[str, str, Optional[str]] = ("source", "reference", "target"),
                  targets: Optional[Sequence[torch.Tensor]] = None,
                  init_state: Optional[Dict] = None, seed: Optional[int] = None,
                  iterations: Optional[int] = None,
                  problem: Optional[ProtectionProblem] = None) -> ProtectionRecord:
    """Optimize a fresh (or warm-started) decoder to protect ``x_s``.

    ``init_state`` (from a previous record's ``state``) warm-starts the
    decoder and projection, and Adam's moment estimates when present;
    otherwise the modules are drawn from ``seed`` (default ``cfg.seed``).
    """
    start = time.perf_counter()
    iterations = cfg.iterations if iterations is None else iterations
    seed = cfg.seed if seed is None else seed
    with _deterministic(cfg.deterministic):
        torch.manual_seed(seed)
        if problem is None:
            problem = ProtectionProblem(x_s, x_r, x_t, cfg, backends, targets)
        dec, proj = problem.build_modules(seed)
        init = {"mode": "cold", "seed": seed}
        opt_state = None
        if init_state is not None:
            opt_state = init_state.get("optimizer")
            dec.load_state_dict(init_state["decoder"])
            proj.load_state_dict(init_state["projection"])
            init = {"mode": "warm", "seed": init_state.get("seed", seed),
                    "from": init_state.get("from")}
        protected, trajectory, final, opt_final = optimize(problem, dec, proj, iterations, opt_state)
    state = _state(dec, proj)
    state["optimizer"] = opt_final
    state["seed"] = init["seed"]
    state["from"] = ids[0]
    snapshot = replace(cfg, iterations=iterations)
    return ProtectionRecord(ids[0], ids[1], ids[2] if cfg.attack_mode == "impersonate" else None,
                            protected, trajectory, None, snapshot,
                            time.perf_counter() - start, init, dict(problem.counts),
                            dict(problem.notes), state, final)


def save_record_checkpoint(record: ProtectionRecord, path) -> None:
    """Persist the record's final decoder and fusion projection."""
    if record.state is None:
        raise ConfigurationError("record carries no parameter state")
    dec_state = record.state["decoder"]
    dec = ConditionalDecoder(record.config_snapshot.arch, int(record.state.get("seed") or 0))
    dec.to(next(iter(dec_state.values())).dtype)
    dec.load_state_dict(dec_state)
    save_checkpoint(path, dec, {"projection": record.state["projection"]},
                    meta={"source_id": record.source_id, "reference_id": record.reference_id,
                          "target_id": record.target_id, "init": dict(record.init)})


@dataclass
class VideoRun:
    frames: List[torch.Tensor]
    per_frame_iterations: Optional[int] = None
    keyframe_interval: Optional[int] = None

    def __post_init__(self):
        if not self.frames:
            raise ConfigurationError("video needs at least one frame")
        if self.per_frame_iterations is not None and self.per_frame_iterations < 1:
            raise ConfigurationError("per_frame_iterations must be >= 1")
        if self.keyframe_interval is not None and self.keyframe_interval < 0:
            raise ConfigurationError("keyframe_interval must be >= 0")


def protect_video(run: VideoRun, x_r, x_t, cfg: RunConfig, backends: Backends,
                  frame_ids: Optional[Sequence[str]] = None,
                  reference_id: str = "reference", target_id: str = "target") -> List[ProtectionRecord]:
    """Protect frames in order, warm-starting each from its predecessor.

    Frame 0 and every ``keyframe_interval``-th frame start cold (seed
    ``cfg.seed + t``) with ``cfg.iterations``; the rest reuse the previous
    frame's parameters for ``per_frame_iterations``.  A failing frame stops
    the run; completed records are returned.
    """
    per_frame = (run.per_frame_iterations or cfg.per_frame_iterations
                 or max(1, cfg.iterations // 10))
    keyframe = cfg.keyframe_interval if run.keyframe_interval is None else run.keyframe_interval
    ids = list(frame_ids) if frame_ids else [f"frame{t:04d}" for t in range(len(run.frames))]
    records: List[ProtectionRecord] = []
    prev = None
    for t, frame in enumerate(run.frames):
        cold = prev is None or (keyframe > 0 and t % keyframe == 0)
        try:
            if cold:
                rec = protect_image(frame, x_r, x_t, cfg, backends, (ids[t], reference_id, target_id),
                                    seed=cfg.seed + t, iterations=cfg.iterations)
            else:
                rec = protect_image(frame, x_r, x_t, cfg, backends, (ids[t], reference_id, target_id),
                                    init_state=prev, iterations=per_frame)
        except MakeupPriorError as exc:
            log.error("frame %s failed: %s; stopping video run", ids[t], exc)
            break
        rec.init["frame_index"] = t
        records.append(rec)
        prev = rec.state
    return records


def dodge_objective_adapter(cfg: RunConfig) -> RunConfig:
    """Copy of ``cfg`` whose adversarial term is -D(x_p, x_s) only."""
    if cfg.attack_mode != "dodge":
        log.info("switching attack_mode %r -> 'dodge'", cfg.attack_mode)
    return replace(cfg, attack_mode="dodge")


def iterations_to_reach(trajectory: Sequence[LossBreakdown], level: float) -> Optional[int]:
    """First iteration whose total loss is <= ``level`` (None if never)."""
    for i, bd in enumerate(trajectory):
        if bd.total <= level:
            return i
    return None

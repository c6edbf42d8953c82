"""Experiment configs, dataset manifests and the on-disk output layout.

Both file types are YAML carrying a ``schema`` tag and ``version``; unknown
keys are rejected by name.  Relative paths inside a config resolve against
the config file's directory, and every output path is derived from the
config alone::

    <output_dir>/protect/runs/<run_id>/protected.png | manifest.json | checkpoint.pt
    <output_dir>/protect/summary.csv | summary.json | loss_curves.png
    <output_dir>/video/<reference>__<target>/<frame_id>/...  (same files per frame)
    <output_dir>/video/<reference>__<target>/summary.csv | loss_curves.png
    <output_dir>/evaluate/report.json | per_item.csv | psr.png | rank_n.png
    <output_dir>/calibrate/thresholds.yaml
    <output_dir>/fid/images/*.png | files.txt | manifest.json

``run_id`` is ``<source>__<reference>__<target>`` (``dodge`` in place of the
target in dodge mode), built from manifest entry ids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .errors import ConfigurationError
from .io import atomic_write_text, check_schema, dump_yaml, from_dict, load_yaml, to_dict
from .pipeline import RunConfig

DATASET_SCHEMA = "makeup-prior/dataset"
EXPERIMENT_SCHEMA = "makeup-prior/experiment"
SCHEMA_VERSION = 1
ROLES = ("source", "reference", "target", "gallery", "probe")


@dataclass
class DatasetEntry:
    path: str
    identity: str
    role: str
    id: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigurationError(f"entry {self.path!r}: role must be one of {ROLES}, got {self.role!r}")
        if not self.identity:
            raise ConfigurationError(f"entry {self.path!r}: identity label must be non-empty")
        if not self.id:
            self.id = Path(self.path).stem


@dataclass
class DatasetManifest:
    entries: List[DatasetEntry] = field(default_factory=list)
    pre_aligned: bool = True

    def by_role(self, role: str) -> List[DatasetEntry]:
        return [e for e in self.entries if e.role == role]

    def check_paths(self, base: Path) -> None:
        missing = [e.path for e in self.entries if not (base / e.path).is_file()]
        if missing:
            raise ConfigurationError(f"dataset files not found: {', '.join(missing[:5])}"
                                     + (" ..." if len(missing) > 5 else ""))


@dataclass
class BackendsConfig:
    encoder: str = "toy:encoder:0"
    parser: str = "toy:parser:0"
    vit: str = "toy:vit:0"
    evaluators: List[str] = field(default_factory=lambda: ["toy:embedder4:0"])
    weights: Dict[str, str] = field(default_factory=dict)


@dataclass
class EvaluationConfig:
    protocols: List[str] = field(default_factory=lambda: ["verification", "identification"])
    ranks: List[int] = field(default_factory=lambda: [1, 5])
    fmr: float = 0.01
    thresholds: Dict[str, float] = field(default_factory=dict)
    threshold_file: Optional[str] = None

    def __post_init__(self):
        bad = [p for p in self.protocols if p not in ("verification", "identification")]
        if bad:
            raise ConfigurationError(f"evaluation.protocols: unknown protocol(s) {bad}")
        if not self.ranks or any(r < 1 for r in self.ranks):
            raise ConfigurationError("evaluation.ranks must be positive integers")


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    dataset: str = "dataset.yaml"
    output_dir: str = "out"
    video_frames: List[str] = field(default_factory=list)


def _load_tagged(path, schema: str) -> Dict:
    data = load_yaml(path)
    check_schema(data, schema, SCHEMA_VERSION, f"{path}: ")
    data = dict(data)
    data.pop("schema")
    data.pop("version", None)
    return data


def load_config(path) -> ExperimentConfig:
    return from_dict(ExperimentConfig, _load_tagged(path, EXPERIMENT_SCHEMA))


def save_config(path, cfg: ExperimentConfig) -> None:
    atomic_write_text(path, dump_yaml({"schema": EXPERIMENT_SCHEMA, "version": SCHEMA_VERSION,
                                       **to_dict(cfg)}))


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    man = from_dict(DatasetManifest, _load_tagged(path, DATASET_SCHEMA))
    if check_paths:
        man.check_paths(Path(path).parent)
    return man


def save_manifest(path, manifest: DatasetManifest) -> None:
    atomic_write_text(path, dump_yaml({"schema": DATASET_SCHEMA, "version": SCHEMA_VERSION,
                                       **to_dict(manifest)}))


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    source: DatasetEntry
    reference: DatasetEntry
    target: Optional[DatasetEntry]


class Layout:
    """Output paths for one experiment (a pure function of the config location and contents)."""

    def __init__(self, cfg: ExperimentConfig, config_path):
        self.base = Path(config_path).resolve().parent
        self.root = self.resolve(cfg.output_dir)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def run_dir(self, run_id: str) -> Path:
        return self.root / "protect" / "runs" / run_id

    def video_dir(self, reference_id: str, target_id: Optional[str]) -> Path:
        return self.root / "video" / f"{reference_id}__{target_id or 'dodge'}"

    @property
    def protect_dir(self) -> Path:
        return self.root / "protect"

    @property
    def evaluate_dir(self) -> Path:
        return self.root / "evaluate"

    @property
    def calibrate_file(self) -> Path:
        return self.root / "calibrate" / "thresholds.yaml"

    @property
    def fid_dir(self) -> Path:
        return self.root / "fid"


def plan_runs(cfg: ExperimentConfig, manifest: DatasetManifest) -> List[RunSpec]:
    """Every (source, reference, target) triple in manifest order."""
    sources = manifest.by_role("source")
    refs = manifest.by_role("reference")
    if not sources:
        raise ConfigurationError("dataset has no source entries")
    if not refs:
        raise ConfigurationError("dataset has no reference entries")
    if cfg.run.attack_mode == "impersonate":
        targets = manifest.by_role("target")
        if not targets:
            raise ConfigurationError("impersonation needs at least one target entry")
    else:
        targets = [None]
    specs, seen = [], set()
    for s, r, t in itertools.product(sources, refs, targets):
        run_id = f"{s.id}__{r.id}__{t.id if t else 'dodge'}"
        if run_id in seen:
            raise ConfigurationError(f"duplicate run id {run_id!r}; give entries unique ids")
        seen.add(run_id)
        specs.append(RunSpec(run_id, s, r, t))
    return specs


# ---------------------------------------------------------------------------
# toy fixture


def write_toy_experiment(out_dir, n_sources: int = 4, n_references: int = 1, n_targets: int = 1,
                         n_distractors: int = 20, n_frames: int = 0, size: int = 32,
                         iterations: int = 100, attack_mode: str = "impersonate",
                         seed: int = 0) -> Path:
    """Render a synthetic dataset plus a desk-scale experiment config; returns the config path.

    Sources get a second shot as probes; the gallery holds a third shot of
    every source, the targets, and a few distractor identities.  Frames
    (if any) are noise-only re-renders of the first source.
    """
    from .io import save_image
    from .pipeline import toy_run_config
    from .toyfaces import make_identity, makeup_reference, render_face

    out = Path(out_dir)
    entries: List[DatasetEntry] = []

    def put(img, name, ident, role):
        save_image(out / "images" / f"{name}.png", img)
        entries.append(DatasetEntry(f"images/{name}.png", ident, role, name))

    for i in range(n_sources):
        ident = make_identity(i, seed)
        put(render_face(ident, size, variation=0, seed=seed), f"src{i:03d}", ident.label, "source")
        put(render_face(ident, size, variation=1, seed=seed), f"probe{i:03d}", ident.label, "probe")
        put(render_face(ident, size, variation=2, seed=seed), f"gal{i:03d}", ident.label, "gallery")
    for k in range(n_references):
        put(makeup_reference(k, size, seed), f"ref{k:02d}", f"makeup{k:02d}", "reference")
    for j in range(n_targets):
        ident = make_identity(500 + j, seed)
        put(render_face(ident, size, variation=0, seed=seed), f"tgt{j:02d}", ident.label, "target")
        put(render_face(ident, size, variation=1, seed=seed), f"galtgt{j:02d}", ident.label, "gallery")
    for j in range(n_distractors):
        ident = make_identity(600 + j, seed)
        put(render_face(ident, size, variation=2, seed=seed), f"gald{j:02d}", ident.label, "gallery")
    frames = []
    for t in range(n_frames):
        img = render_face(make_identity(0, seed), size, variation=10 + t, seed=seed, lighting=0.0)
        save_image(out / "frames" / f"frame{t:03d}.png", img)
        frames.append(f"frames/frame{t:03d}.png")

    save_manifest(out / "dataset.yaml", DatasetManifest(entries))
    run = toy_run_config(size, iterations, attack_mode=attack_mode)
    cfg = ExperimentConfig(run=run,
                           backends=BackendsConfig(vit=f"toy:vit{max(4, size // 4)}:0"),
                           dataset="dataset.yaml", output_dir="out", video_frames=frames)
    save_config(out / "experiment.yaml", cfg)
    return out / "experiment.yaml"

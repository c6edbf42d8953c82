"""Verification and identification protocols, PSR / Rank-N metrics, thresholds, FID export.

Distances are cosine distances between unit embeddings, ``D = 1 - cos``.
Verification accepts a pair when ``D <= tau`` (the boundary counts as a
match).  Identification is closed-set: every gallery identity is scored by
its closest entry and identities are ranked by that score, ties broken by
ascending label.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from .backends import EmbedderBackend, embed_face
from .errors import ConfigurationError, ExportError
from .io import atomic_write_bytes, atomic_write_text, check_schema, dump_json, image_to_png_bytes

log = logging.getLogger(__name__)

THRESHOLD_SCHEMA = "makeup-prior/thresholds"
THRESHOLD_VERSION = 1
EXPORT_SCHEMA = "makeup-prior/fid-export"
REPORT_SCHEMA = "makeup-prior/evaluation-report"
MODES = ("impersonate", "dodge")


@dataclass(frozen=True)
class VerificationThreshold:
    backend_name: str
    tau: float
    source: str = "preset"

    def __post_init__(self):
        if not (0.0 < self.tau < 2.0) or not math.isfinite(self.tau):
            raise ConfigurationError(f"tau must lie in (0, 2), got {self.tau!r}")


def load_threshold_presets(path=None) -> Dict[str, VerificationThreshold]:
    """Read the versioned preset file (the bundled one by default)."""
    if path is None:
        text = resources.files("makeup_prior").joinpath("presets/thresholds.yaml").read_text()
        where = "bundled thresholds: "
    else:
        text = Path(path).read_text()
        where = f"{path}: "
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}top level must be a mapping")
    check_schema(data, THRESHOLD_SCHEMA, THRESHOLD_VERSION, where)
    return {name: VerificationThreshold(name, float(tau), source=f"preset v{data['version']}")
            for name, tau in data.get("presets", {}).items()}


def _distance(e1: torch.Tensor, e2: torch.Tensor) -> float:
    e1 = torch.as_tensor(e1, dtype=torch.float64)
    e2 = torch.as_tensor(e2, dtype=torch.float64)
    for e in (e1, e2):
        if abs(float(e.norm()) - 1.0) > 1e-3:
            raise ValueError("verify expects unit-norm embeddings")
    return float(1.0 - (e1 * e2).sum())


def verify(e1: torch.Tensor, e2: torch.Tensor, thr: VerificationThreshold) -> bool:
    return _distance(e1, e2) <= thr.tau


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvaluationReport:
    protocol: str
    mode: str
    psr: float
    per_item: List[Dict] = field(default_factory=list)
    rank_n: Dict[int, float] = field(default_factory=dict)
    threshold_used: Optional[VerificationThreshold] = None
    backend_name: str = ""

    def __post_init__(self):
        if self.protocol not in ("verification", "identification"):
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.per_item:
            mean = sum(bool(it["success"]) for it in self.per_item) / len(self.per_item)
            if abs(mean - self.psr) > 1e-12:
                raise ValueError("psr must equal the mean of per-item success flags")

    def to_dict(self) -> Dict:
        thr = None
        if self.threshold_used is not None:
            thr = {"backend_name": self.threshold_used.backend_name,
                   "tau": self.threshold_used.tau, "source": self.threshold_used.source}
        return {"schema": REPORT_SCHEMA, "version": 1, "protocol": self.protocol,
                "mode": self.mode, "backend": self.backend_name, "psr": self.psr,
                "rank_n": {str(k): v for k, v in sorted(self.rank_n.items())},
                "threshold": thr, "per_item": self.per_item}


def _embed_all(backend: EmbedderBackend, items) -> torch.Tensor:
    imgs = [getattr(it, "protected", it) for it in items]
    with torch.no_grad():
        return embed_face(backend, torch.stack([torch.as_tensor(im) for im in imgs]))


def verification_report(protected_emb: torch.Tensor, probe_emb: torch.Tensor,
                        thr: VerificationThreshold, mode: str,
                        item_ids: Optional[Sequence[str]] = None,
                        backend_name: str = "") -> EvaluationReport:
    """PSR from paired embeddings.

    impersonate: success when the protected face verifies against the target.
    dodge: success when it no longer verifies against the same-person probe.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if len(protected_emb) == 0:
        raise ValueError("no records to evaluate")
    if len(protected_emb) != len(probe_emb):
        raise ValueError(f"{len(protected_emb)} protected images but {len(probe_emb)} probes")
    ids = list(item_ids) if item_ids is not None else [f"item{i:04d}" for i in range(len(protected_emb))]
    items = []
    for i, (ep, eq) in enumerate(zip(protected_emb, probe_emb)):
        d = _distance(ep, eq)
        match = d <= thr.tau
        items.append({"item": ids[i], "distance": d, "match": match,
                      "success": match if mode == "impersonate" else not match})
    psr = sum(it["success"] for it in items) / len(items)
    return EvaluationReport("verification", mode, psr, items, threshold_used=thr,
                            backend_name=backend_name or thr.backend_name)


def psr_verification(records: Sequence, probes: Sequence[torch.Tensor], backend: EmbedderBackend,
                     thr: VerificationThreshold, mode: str = "impersonate") -> EvaluationReport:
    """Protection success rate under 1:1 verification.

    ``records`` are ProtectionRecords or bare images; ``probes`` are the
    target images (impersonate) or same-person clean images (dodge).
    """
    if len(records) == 0:
        raise ValueError("no records to evaluate")
    ids = [getattr(r, "source_id", f"item{i:04d}") for i, r in enumerate(records)]
    return verification_report(_embed_all(backend, records), _embed_all(backend, probes), thr,
                               mode, ids, backend_name=backend.name)


# ---------------------------------------------------------------------------
# identification


@dataclass
class Gallery:
    labels: List[str]
    embeddings: torch.Tensor
    probe_disjoint: bool = True

    def __post_init__(self):
        self.embeddings = torch.as_tensor(self.embeddings, dtype=torch.float64)
        if self.embeddings.ndim != 2 or len(self.labels) != self.embeddings.shape[0]:
            raise ConfigurationError("gallery needs one embedding row per label")
        if not self.labels:
            raise ConfigurationError("gallery is empty")
        if any(not lab for lab in self.labels):
            raise ConfigurationError("gallery identity labels must be non-empty")

    @classmethod
    def from_images(cls, backend: EmbedderBackend, images: torch.Tensor, labels: Sequence[str],
                    probe_disjoint: bool = True) -> "Gallery":
        with torch.no_grad():
            return cls(list(labels), embed_face(backend, images), probe_disjoint)

    @property
    def identities(self) -> List[str]:
        return sorted(set(self.labels))

    def identity_distances(self, probe: torch.Tensor) -> Dict[str, float]:
        d = 1.0 - self.embeddings @ torch.as_tensor(probe, dtype=torch.float64)
        out: Dict[str, float] = {}
        for lab, v in zip(self.labels, d.tolist()):
            out[lab] = min(v, out.get(lab, math.inf))
        return out


def identify(probe_embedding: torch.Tensor, gallery: Gallery, n: int) -> List[str]:
    """Top-``n`` identities by ascending distance; ties go to the lower label."""
    if n < 1 or n > len(gallery.identities):
        raise ValueError(f"N={n} outside 1..{len(gallery.identities)} gallery identities")
    scores = gallery.identity_distances(probe_embedding)
    return [lab for lab, _ in sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))[:n]]


def rank_n_rates(probe_embeddings: torch.Tensor, gallery: Gallery, ns: Sequence[int] = (1, 5),
                 mode: str = "impersonate", true_labels: Optional[Sequence[str]] = None,
                 target_labels: Optional[Sequence[str]] = None,
                 item_ids: Optional[Sequence[str]] = None,
                 backend_name: str = "") -> EvaluationReport:
    """Rank-N-T (impersonate) or Rank-N-U (dodge) rates for every N in ``ns``.

    The report's ``psr`` and per-item ``success`` refer to the first N.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    ns = list(ns)
    if not ns:
        raise ValueError("need at least one N")
    n_probe = len(probe_embeddings)
    if n_probe == 0:
        raise ValueError("no probes to evaluate")
    wanted = target_labels if mode == "impersonate" else true_labels
    if wanted is None or len(wanted) != n_probe:
        which = "target_labels" if mode == "impersonate" else "true_labels"
        raise ConfigurationError(f"{mode} identification needs one entry of {which} per probe")
    if mode == "impersonate":
        missing = sorted(set(wanted) - set(gallery.labels))
        if missing:
            raise ConfigurationError(f"target identities missing from gallery: {', '.join(missing)}")
    ids = list(item_ids) if item_ids is not None else [f"probe{i:04d}" for i in range(n_probe)]
    top = max(ns)
    hits = {n: 0 for n in ns}
    items = []
    for i, emb in enumerate(probe_embeddings):
        ranked = identify(emb, gallery, top)
        flags = {}
        for n in ns:
            inside = wanted[i] in ranked[:n]
            flags[n] = inside if mode == "impersonate" else not inside
            hits[n] += flags[n]
        items.append({"item": ids[i], "label": wanted[i], "ranked": ranked,
                      "success_at": {str(n): flags[n] for n in ns}, "success": flags[ns[0]]})
    rates = {n: hits[n] / n_probe for n in ns}
    return EvaluationReport("identification", mode, rates[ns[0]], items, rank_n=rates,
                            backend_name=backend_name)


def average_reports(reports: Sequence[EvaluationReport]) -> Dict:
    """Mean PSR and Rank-N over reports (e.g. one per reference or target)."""
    if not reports:
        raise ValueError("nothing to average")
    out = {"count": len(reports), "psr": float(np.mean([r.psr for r in reports]))}
    keys = sorted(set().union(*[r.rank_n.keys() for r in reports]))
    if keys:
        out["rank_n"] = {str(k): float(np.mean([r.rank_n[k] for r in reports if k in r.rank_n]))
                         for k in keys}
    return out


# ---------------------------------------------------------------------------
# thresholds


def calibrate_threshold_from_embeddings(embeddings: torch.Tensor, labels: Sequence[str],
                                        fmr: float = 0.01, backend_name: str = "") -> VerificationThreshold:
    """Largest tau whose empirical false match rate over all impostor pairs is <= ``fmr``.

    Every unordered pair with different labels is an impostor pair.  The
    threshold is placed on an observed impostor distance so the accepted
    count never exceeds ``floor(fmr * n_pairs)``, ties included.
    """
    if not 0 < fmr < 1:
        raise ConfigurationError("fmr must lie in (0, 1)")
    e = torch.as_tensor(embeddings, dtype=torch.float64)
    lab = np.asarray(labels)
    d = (1.0 - e @ e.T).numpy()
    iu = np.triu_indices(len(lab), 1)
    imp = np.sort(d[iu][lab[iu[0]] != lab[iu[1]]])
    if imp.size == 0:
        raise ConfigurationError("calibration needs at least two identities")
    budget = int(math.floor(fmr * imp.size + 1e-9))
    if budget == 0:
        raise ConfigurationError(f"{imp.size} impostor pairs are too few to resolve FMR {fmr}")
    # accepted(v) = #imp <= v; walk down until ties no longer push us over budget
    k = budget - 1
    while k >= 0 and np.searchsorted(imp, imp[k], side="right") > budget:
        k -= 1
    if k < 0:
        raise ConfigurationError("impostor distances are too heavily tied to calibrate")
    tau = float(imp[k])
    source = f"calibrated fmr={fmr} on {imp.size} impostor pairs"
    return VerificationThreshold(backend_name, tau, source=source)


def calibrate_threshold(backend: EmbedderBackend, images: torch.Tensor, labels: Sequence[str],
                        fmr: float = 0.01) -> VerificationThreshold:
    with torch.no_grad():
        emb = embed_face(backend, images)
    return calibrate_threshold_from_embeddings(emb, labels, fmr, backend.name)


# ---------------------------------------------------------------------------
# FID export


def _image_problem(img) -> Optional[str]:
    if img is None:
        return "missing image"
    if not isinstance(img, torch.Tensor):
        return "not a tensor"
    if img.ndim != 3 or img.shape[0] != 3:
        return f"shape {tuple(img.shape)} is not 3xHxW"
    if not torch.isfinite(img).all():
        return "non-finite pixels"
    if img.min() < 0 or img.max() > 1:
        return "pixels outside [0, 1]"
    return None


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", str(text)).strip("-") or "x"


def export_image_set(records: Sequence, out_dir) -> Dict:
    """Write protected images as PNG plus a listing an external FID tool can read.

    Layout: ``<out_dir>/images/<index>_<source>.png``, ``<out_dir>/files.txt``
    (one relative path per exported image) and ``<out_dir>/manifest.json``.
    Invalid images are skipped and flagged; write failures are recorded per
    file and raised as :class:`ExportError` after the manifest is written.
    """
    out_dir = Path(out_dir)
    entries, failures = [], {}
    for i, rec in enumerate(records):
        img = getattr(rec, "protected", rec)
        src = getattr(rec, "source_id", f"item{i:04d}")
        rel = f"images/{i:04d}_{_slug(src)}.png"
        entry = {"index": i, "source_id": src,
                 "reference_id": getattr(rec, "reference_id", None),
                 "target_id": getattr(rec, "target_id", None)}
        problem = _image_problem(img)
        if problem is not None:
            entry.update(status="skipped", reason=problem)
            log.warning("export: skipping record %d (%s)", i, problem)
        else:
            try:
                atomic_write_bytes(out_dir / rel, image_to_png_bytes(img))
                entry.update(status="ok", path=rel)
            except OSError as exc:
                entry.update(status="io-error", reason=str(exc))
                failures[str(out_dir / rel)] = str(exc)
        entries.append(entry)
    listing = [e["path"] for e in entries if e["status"] == "ok"]
    manifest = {"schema": EXPORT_SCHEMA, "version": 1, "format": "png",
                "count": len(listing), "entries": entries}
    atomic_write_text(out_dir / "files.txt", "".join(p + "\n" for p in listing))
    atomic_write_text(out_dir / "manifest.json", dump_json(manifest))
    if failures:
        raise ExportError(f"{len(failures)} file(s) failed to export", failures)
    return manifest

"""Command-line entry point.

    makeup-prior protect             --config experiment.yaml [--seed N] [--workers N] [--deterministic] [--dry-run]
    makeup-prior protect-video       --config experiment.yaml
    makeup-prior evaluate            --config experiment.yaml
    makeup-prior calibrate-threshold --config experiment.yaml
    makeup-prior export-fid          --config experiment.yaml
    makeup-prior dry-run             --config experiment.yaml
    makeup-prior make-toy-data       --out DIR

Exit status: 0 success, 1 I/O failure, 2 configuration error (nothing was
optimized), 3 one or more runs aborted.  Pretrained backend adapters read
their weight files relative to ``$MAKEUP_PRIOR_WEIGHTS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import torch
import yaml

from .backends import WEIGHTS_ENV, EmbedderBackend, embed_face, resolve_backend
from .errors import ConfigurationError, ExportError, MakeupPriorError
from .evaluation import (THRESHOLD_SCHEMA, THRESHOLD_VERSION, Gallery, VerificationThreshold,
                         average_reports, calibrate_threshold_from_embeddings, export_image_set,
                         load_threshold_presets, rank_n_rates, verification_report)
from .experiment import (DatasetEntry, DatasetManifest, ExperimentConfig, Layout, RunSpec,
                         load_config, load_manifest, plan_runs, write_toy_experiment)
from .io import atomic_write_text, dump_json, load_image, save_image
from .pipeline import Backends, ProtectionRecord, VideoRun, protect_image, protect_video, save_record_checkpoint
from .reporting import plot_loss_curves, plot_psr, plot_rank_n, write_csv

log = logging.getLogger("makeup_prior")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3
SUMMARY_COLUMNS = ("run_id", "source_id", "reference_id", "target_id", "status", "iterations",
                   "total", "struc", "hist", "glob", "adv", "wall_time", "error")


@dataclass
class Context:
    cfg: ExperimentConfig
    layout: Layout
    manifest: DatasetManifest
    manifest_dir: Path
    workers: int
    dry_run: bool

    def image(self, entry: DatasetEntry) -> torch.Tensor:
        return load_image(self.manifest_dir / entry.path)


def load_context(args) -> Context:
    cfg = load_config(args.config)
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.deterministic:
        run = replace(run, deterministic=True)
    cfg = replace(cfg, run=run)
    layout = Layout(cfg, args.config)
    man_path = layout.resolve(cfg.dataset)
    if not man_path.is_file():
        raise ConfigurationError(f"dataset manifest {man_path} not found")
    manifest = load_manifest(man_path)
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    return Context(cfg, layout, manifest, man_path.parent, args.workers, args.dry_run)


def _resolve(cfg: ExperimentConfig, name: str):
    return resolve_backend(name, cfg.backends.weights.get(name))


def build_backends(cfg: ExperimentConfig) -> Backends:
    cfg.run.validate_surrogates()
    surrogates = {}
    for name in cfg.run.surrogate_names:
        be = _resolve(cfg, name)
        if not isinstance(be, EmbedderBackend):
            raise ConfigurationError(f"surrogate {name!r} is not a face embedder")
        surrogates[name] = be
    return Backends(_resolve(cfg, cfg.backends.encoder), _resolve(cfg, cfg.backends.parser),
                    _resolve(cfg, cfg.backends.vit), surrogates)


def build_evaluators(cfg: ExperimentConfig) -> Dict[str, EmbedderBackend]:
    if not cfg.backends.evaluators:
        raise ConfigurationError("backends.evaluators is empty")
    out = {}
    for name in cfg.backends.evaluators:
        be = _resolve(cfg, name)
        if not isinstance(be, EmbedderBackend):
            raise ConfigurationError(f"evaluator {name!r} is not a face embedder")
        out[name] = be
    return out


def _pool_map(fn: Callable, items: Sequence, workers: int, deterministic: bool) -> List:
    # deterministic mode pins global torch state, so it runs one job at a time
    if workers <= 1 or deterministic or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _check_size(ctx: Context, img: torch.Tensor, what: str) -> None:
    want = tuple(ctx.cfg.run.arch.output_size)
    if tuple(img.shape[-2:]) != want:
        raise ConfigurationError(f"{what} is {tuple(img.shape[-2:])}, run.arch.output_size is {want}")


def _write_record(d: Path, rec: ProtectionRecord, backend_ids: Dict) -> None:
    save_image(d / "protected.png", rec.protected)
    save_record_checkpoint(rec, d / "checkpoint.pt")
    rec.final_params_ref = "checkpoint.pt"
    atomic_write_text(d / "manifest.json", dump_json(rec.manifest(backend_ids)))


def _summary_row(run_id: str, rec: Optional[ProtectionRecord], ids, error: Optional[str]) -> Dict:
    row = {"run_id": run_id, "source_id": ids[0], "reference_id": ids[1], "target_id": ids[2],
           "status": "ok" if rec is not None else "aborted", "error": error}
    if rec is not None:
        row.update(iterations=len(rec.loss_trajectory), wall_time=round(rec.wall_time, 3),
                   **rec.final_loss.as_dict())
    return row


def _print_plan(verb: str, ctx: Context, runs: List[Dict], backends: Dict) -> int:
    plan = {"verb": verb, "output_dir": str(ctx.layout.root), "backends": backends,
            "run": {"iterations": ctx.cfg.run.iterations, "seed": ctx.cfg.run.seed,
                    "attack_mode": ctx.cfg.run.attack_mode,
                    "deterministic": ctx.cfg.run.deterministic},
            "workers": ctx.workers, "runs": runs}
    print(json.dumps(plan, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# verbs


def cmd_protect(ctx: Context) -> int:
    if ctx.cfg.video_frames:
        return cmd_protect_video(ctx)
    cfg = ctx.cfg
    specs = plan_runs(cfg, ctx.manifest)
    backends = build_backends(cfg)
    images: Dict[str, torch.Tensor] = {}
    for spec in specs:
        for role, entry in (("source", spec.source), ("reference", spec.reference), ("target", spec.target)):
            if entry is not None and entry.id not in images:
                images[entry.id] = ctx.image(entry)
                _check_size(ctx, images[entry.id], f"{role} {entry.id}")
    if ctx.dry_run:
        return _print_plan("protect", ctx, [
            {"run_id": s.run_id, "writes": [str(ctx.layout.run_dir(s.run_id) / f)
                                            for f in ("protected.png", "manifest.json", "checkpoint.pt")]}
            for s in specs], backends.identifiers())

    def run(spec: RunSpec):
        x_t = images[spec.target.id] if spec.target is not None else None
        ids = (spec.source.id, spec.reference.id, spec.target.id if spec.target else None)
        try:
            return protect_image(images[spec.source.id], images[spec.reference.id], x_t,
                                 cfg.run, backends, ids), None
        except MakeupPriorError as exc:
            log.error("run %s aborted: %s", spec.run_id, exc)
            return None, f"{type(exc).__name__}: {exc}"

    outcomes = _pool_map(run, specs, ctx.workers, cfg.run.deterministic)
    rows, curves = [], {}
    for spec, (rec, err) in zip(specs, outcomes):
        ids = (spec.source.id, spec.reference.id, spec.target.id if spec.target else None)
        if rec is not None:
            _write_record(ctx.layout.run_dir(spec.run_id), rec, backends.identifiers())
            curves[spec.run_id] = [b.as_dict() for b in rec.loss_trajectory]
        rows.append(_summary_row(spec.run_id, rec, ids, err))
    _write_summary(ctx.layout.protect_dir, rows, curves)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"protect: {len(rows) - failed}/{len(rows)} runs completed -> {ctx.layout.protect_dir}")
    return EXIT_ABORTED if failed else EXIT_OK


def _write_summary(d: Path, rows: List[Dict], curves: Dict) -> None:
    write_csv(d / "summary.csv", rows, SUMMARY_COLUMNS)
    atomic_write_text(d / "summary.json", dump_json({"schema": "makeup-prior/protect-summary",
                                                     "version": 1, "runs": rows}))
    if curves:
        plot_loss_curves(curves, d / "loss_curves.png")


def cmd_protect_video(ctx: Context) -> int:
    cfg = ctx.cfg
    if not cfg.video_frames:
        raise ConfigurationError("protect-video needs video_frames in the config")
    refs = ctx.manifest.by_role("reference")
    if not refs:
        raise ConfigurationError("dataset has no reference entries")
    targets = ctx.manifest.by_role("target") if cfg.run.attack_mode == "impersonate" else [None]
    if not targets:
        raise ConfigurationError("impersonation needs at least one target entry")
    backends = build_backends(cfg)
    frame_paths = [ctx.layout.resolve(p) for p in cfg.video_frames]
    missing = [str(p) for p in frame_paths if not p.is_file()]
    if missing:
        raise ConfigurationError(f"video frames not found: {', '.join(missing)}")
    frames = [load_image(p) for p in frame_paths]
    for p, f in zip(frame_paths, frames):
        _check_size(ctx, f, f"frame {p.name}")
    frame_ids = [p.stem for p in frame_paths]
    jobs = [(r, t) for r in refs for t in targets]
    if ctx.dry_run:
        return _print_plan("protect-video", ctx, [
            {"video": ctx.layout.video_dir(r.id, t.id if t else None).name, "frames": frame_ids}
            for r, t in jobs], backends.identifiers())
    status = EXIT_OK
    for r, t in jobs:
        x_r = ctx.image(r)
        x_t = ctx.image(t) if t is not None else None
        recs = protect_video(VideoRun(frames), x_r, x_t, cfg.run, backends, frame_ids,
                             reference_id=r.id, target_id=t.id if t else "target")
        vdir = ctx.layout.video_dir(r.id, t.id if t else None)
        rows, curves = [], {}
        for k, fid in enumerate(frame_ids):
            ids = (fid, r.id, t.id if t else None)
            rec = recs[k] if k < len(recs) else None
            if rec is not None:
                _write_record(vdir / fid, rec, backends.identifiers())
                curves[fid] = [b.as_dict() for b in rec.loss_trajectory]
            rows.append(_summary_row(fid, rec, ids, None if rec else "not run (earlier frame failed)"))
        _write_summary(vdir, rows, curves)
        if len(recs) < len(frames):
            status = EXIT_ABORTED
        print(f"protect-video: {len(recs)}/{len(frames)} frames -> {vdir}")
    return status


def _labelled_clean(ctx: Context) -> List[DatasetEntry]:
    return ctx.manifest.by_role("gallery") + ctx.manifest.by_role("probe")


def _thresholds(ctx: Context, evaluators: Dict[str, EmbedderBackend]) -> Dict[str, VerificationThreshold]:
    """Config value, then configured threshold file, then bundled preset, then on-the-fly calibration."""
    ecfg = ctx.cfg.evaluation
    file_presets = load_threshold_presets(ctx.layout.resolve(ecfg.threshold_file)) if ecfg.threshold_file else {}
    bundled = load_threshold_presets()
    out = {}
    for name, be in evaluators.items():
        if name in ecfg.thresholds:
            out[name] = VerificationThreshold(name, ecfg.thresholds[name], "config")
        elif name in file_presets:
            out[name] = file_presets[name]
        elif name in bundled:
            out[name] = bundled[name]
        else:
            out[name] = _calibrate(ctx, name, be)
    return out


def _calibrate(ctx: Context, name: str, be: EmbedderBackend) -> VerificationThreshold:
    entries = _labelled_clean(ctx)
    if len({e.identity for e in entries}) < 2:
        raise ConfigurationError(f"no threshold for {name!r} and too few labelled gallery/probe images to calibrate")
    with torch.no_grad():
        emb = embed_face(be, torch.stack([ctx.image(e) for e in entries]))
    return calibrate_threshold_from_embeddings(emb, [e.identity for e in entries], ctx.cfg.evaluation.fmr, name)


def _probe_for(ctx: Context, source: DatasetEntry) -> DatasetEntry:
    for e in ctx.manifest.by_role("probe"):
        if e.identity == source.identity and e.id != source.id:
            return e
    raise ConfigurationError(f"dodge verification needs a probe image of identity {source.identity!r}")


def cmd_evaluate(ctx: Context) -> int:
    cfg = ctx.cfg
    mode = cfg.run.attack_mode
    specs = plan_runs(cfg, ctx.manifest)
    evaluators = build_evaluators(cfg)
    missing = [s.run_id for s in specs if not (ctx.layout.run_dir(s.run_id) / "protected.png").is_file()]
    if missing:
        raise ConfigurationError(f"protected images missing for {len(missing)} run(s) "
                                 f"(first: {missing[0]}); run `protect` first")
    gallery_entries = ctx.manifest.by_role("gallery")
    if "identification" in cfg.evaluation.protocols:
        if len({e.identity for e in gallery_entries}) < 2:
            raise ConfigurationError("identification needs a gallery with at least two identities")
        if mode == "impersonate":
            absent = sorted({s.target.identity for s in specs} - {e.identity for e in gallery_entries})
            if absent:
                raise ConfigurationError(f"target identities missing from gallery: {', '.join(absent)}")
        n_ids = len({e.identity for e in gallery_entries})
        if max(cfg.evaluation.ranks) > n_ids:
            raise ConfigurationError(f"rank {max(cfg.evaluation.ranks)} exceeds the {n_ids} gallery identities")
    if ctx.dry_run:
        return _print_plan("evaluate", ctx, [{"writes": [str(ctx.layout.evaluate_dir / f) for f in
                                                         ("report.json", "per_item.csv", "psr.png", "rank_n.png")]}],
                           {"evaluators": list(evaluators)})
    thresholds = _thresholds(ctx, evaluators)
    refs = [r for r in ctx.manifest.by_role("reference") if any(s.reference.id == r.id for s in specs)]
    protected = {s.run_id: load_image(ctx.layout.run_dir(s.run_id) / "protected.png") for s in specs}
    clean_specs = [s for s in specs if s.reference.id == refs[0].id]

    report = {"schema": "makeup-prior/evaluation", "version": 1, "mode": mode, "backends": {}}
    csv_rows, psr_rows, rank_series = [], [], {}
    for name, be in evaluators.items():
        thr = thresholds[name]
        with torch.no_grad():
            def emb(imgs):
                return embed_face(be, torch.stack(imgs))
            block = {"threshold": {"tau": thr.tau, "source": thr.source}}
            groups = {r.id: [s for s in specs if s.reference.id == r.id] for r in refs}
            if "verification" in cfg.evaluation.protocols:
                def probe(s):
                    return ctx.image(s.target) if mode == "impersonate" else ctx.image(_probe_for(ctx, s.source))

                per_ref, reps = {}, []
                for rid, ss in groups.items():
                    rep = verification_report(emb([protected[s.run_id] for s in ss]), emb([probe(s) for s in ss]),
                                              thr, mode, [s.run_id for s in ss], name)
                    per_ref[rid] = rep.to_dict()
                    reps.append(rep)
                    _collect(csv_rows, psr_rows, name, rep, rid)
                clean = verification_report(emb([ctx.image(s.source) for s in clean_specs]),
                                            emb([probe(s) for s in clean_specs]), thr, mode,
                                            [f"{s.source.id}__clean" for s in clean_specs], name)
                _collect(csv_rows, psr_rows, name, clean, "clean")
                avg = average_reports(reps)
                psr_rows.append({"backend": name, "protocol": "verification", "group": "average", "psr": avg["psr"]})
                block["verification"] = {"per_reference": per_ref, "average": avg, "clean": clean.to_dict()}
            if "identification" in cfg.evaluation.protocols:
                gallery = Gallery([e.identity for e in gallery_entries],
                                  emb([ctx.image(e) for e in gallery_entries]))

                def rank(embs, ss, ids):
                    return rank_n_rates(embs, gallery, cfg.evaluation.ranks, mode,
                                        true_labels=[s.source.identity for s in ss],
                                        target_labels=[s.target.identity for s in ss] if mode == "impersonate" else None,
                                        item_ids=ids, backend_name=name)

                per_ref, reps = {}, []
                for rid, ss in groups.items():
                    rep = rank(emb([protected[s.run_id] for s in ss]), ss, [s.run_id for s in ss])
                    per_ref[rid] = rep.to_dict()
                    reps.append(rep)
                    _collect(csv_rows, psr_rows, name, rep, rid)
                    rank_series[f"{name} {rid}"] = rep.rank_n
                clean = rank(emb([ctx.image(s.source) for s in clean_specs]), clean_specs,
                             [f"{s.source.id}__clean" for s in clean_specs])
                _collect(csv_rows, psr_rows, name, clean, "clean")
                rank_series[f"{name} clean"] = clean.rank_n
                avg = average_reports(reps)
                psr_rows.append({"backend": name, "protocol": "identification", "group": "average",
                                 "psr": avg["psr"]})
                block["identification"] = {"per_reference": per_ref, "average": avg, "clean": clean.to_dict()}
        report["backends"][name] = block

    d = ctx.layout.evaluate_dir
    atomic_write_text(d / "report.json", dump_json(report))
    write_csv(d / "per_item.csv", csv_rows,
              ("backend", "protocol", "mode", "group", "item", "distance", "match", "ranked", "success"))
    plot_psr(psr_rows, d / "psr.png")
    if rank_series:
        plot_rank_n(rank_series, d / "rank_n.png", mode)
    for r in psr_rows:
        print(f"{r['backend']:<24} {r['protocol']:<15} {r['group']:<16} PSR {r['psr']:.3f}")
    return EXIT_OK


def _collect(csv_rows: List, psr_rows: List, backend: str, rep, group: str) -> None:
    psr_rows.append({"backend": backend, "protocol": rep.protocol, "group": group, "psr": rep.psr})
    for it in rep.per_item:
        csv_rows.append({"backend": backend, "protocol": rep.protocol, "mode": rep.mode, "group": group,
                         **it})


def cmd_calibrate(ctx: Context) -> int:
    evaluators = build_evaluators(ctx.cfg)
    entries = _labelled_clean(ctx)
    if ctx.dry_run:
        return _print_plan("calibrate-threshold", ctx, [{"images": len(entries),
                                                         "writes": [str(ctx.layout.calibrate_file)]}],
                           {"evaluators": list(evaluators)})
    presets, sources = {}, {}
    for name, be in evaluators.items():
        thr = _calibrate(ctx, name, be)
        presets[name] = thr.tau
        sources[name] = thr.source
        print(f"{name:<24} tau {thr.tau:.4f}  ({thr.source})")
    atomic_write_text(ctx.layout.calibrate_file, yaml.safe_dump(
        {"schema": THRESHOLD_SCHEMA, "version": THRESHOLD_VERSION, "fmr": ctx.cfg.evaluation.fmr,
         "presets": presets, "sources": sources}, sort_keys=True))
    return EXIT_OK


@dataclass
class _ExportItem:
    protected: Optional[torch.Tensor]
    source_id: str
    reference_id: str
    target_id: Optional[str]


def cmd_export_fid(ctx: Context) -> int:
    specs = plan_runs(ctx.cfg, ctx.manifest)
    if ctx.dry_run:
        return _print_plan("export-fid", ctx, [{"images": len(specs), "writes": str(ctx.layout.fid_dir)}], {})
    items = []
    for s in specs:
        p = ctx.layout.run_dir(s.run_id) / "protected.png"
        items.append(_ExportItem(load_image(p) if p.is_file() else None, s.run_id, s.reference.id,
                                 s.target.id if s.target else None))
    try:
        man = export_image_set(items, ctx.layout.fid_dir)
    except ExportError as exc:
        for path, msg in exc.failures.items():
            print(f"export failed: {path}: {msg}", file=sys.stderr)
        return EXIT_IO
    skipped = len(items) - man["count"]
    print(f"export-fid: {man['count']} images -> {ctx.layout.fid_dir}" + (f" ({skipped} skipped)" if skipped else ""))
    return EXIT_OK


VERBS = {
    "protect": (cmd_protect, "protect every (source, reference, target) triple"),
    "protect-video": (cmd_protect_video, "protect the configured video frames with warm starts"),
    "evaluate": (cmd_evaluate, "verification / identification reports with figures"),
    "calibrate-threshold": (cmd_calibrate, "fit tau at the configured FMR for each evaluator"),
    "export-fid": (cmd_export_fid, "export protected images for an external FID tool"),
    "dry-run": (cmd_protect, "validate the config and print the protect plan"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML")
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--workers", type=int, default=1, help="concurrent protection runs")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels, single thread, bit-exact reruns")
    common.add_argument("--dry-run", action="store_true", help="validate and print the plan; write nothing")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="makeup-prior",
        description="Adversarial makeup transfer by test-time optimization of an untrained decoder.",
        epilog=f"Pretrained backend weights are looked up under ${WEIGHTS_ENV}.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, (_, help_text) in VERBS.items():
        sub.add_parser(verb, parents=[common], help=help_text)
    toy = sub.add_parser("make-toy-data", help="write a synthetic dataset and desk-scale config")
    toy.add_argument("--out", required=True)
    toy.add_argument("--sources", type=int, default=4)
    toy.add_argument("--references", type=int, default=1)
    toy.add_argument("--targets", type=int, default=1)
    toy.add_argument("--frames", type=int, default=0)
    toy.add_argument("--size", type=int, default=32)
    toy.add_argument("--iterations", type=int, default=100)
    toy.add_argument("--mode", choices=("impersonate", "dodge"), default="impersonate")
    toy.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "make-toy-data":
            path = write_toy_experiment(args.out, args.sources, args.references, args.targets,
                                        n_frames=args.frames, size=args.size,
                                        iterations=args.iterations, attack_mode=args.mode)
            print(f"wrote {path}")
            return EXIT_OK
        ctx = load_context(args)
        if args.verb == "dry-run":
            ctx.dry_run = True
        return VERBS[args.verb][0](ctx)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MakeupPriorError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

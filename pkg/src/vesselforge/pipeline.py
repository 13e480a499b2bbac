"""Manifest-driven batch commands.

Each command reads a manifest, fans independent per-case (or per-variant)
tasks out to a process pool, writes one file per task and assembles the
output manifest in deterministic input order. Output bytes therefore do
not depend on the worker count.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import classeval
from .elastic import random_deform
from .errors import IoError, InvalidParam, MissingGraph, NonOriginalInput
from .manifest import (
    LABELS,
    AugmentationSpec,
    CaseRecord,
    Manifest,
    derive_seed,
    swap_label,
    validate,
)
from .maskgrid import (
    VoxelMask,
    compression_ratio,
    connected_components,
    mirror_sagittal,
    read_vmsk,
    save_vmsk,
    write_vmsk,
)
from .parallel import pmap
from .synthgen import SynthParams, generate_case
from .treeprune import carve_mask, geodesic_distances, prune_graph, read_graph, write_graph

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
# none / left / right counts of the reference cohort, renormalized
COHORT_MIX = (59 / 165, 54 / 165, 52 / 165)


def _read_mask(path) -> VoxelMask:
    try:
        return read_vmsk(path)
    except FileNotFoundError as exc:
        raise IoError(f"missing file {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from exc


def _write_bytes(path: Path, data: bytes):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from exc


def _load_manifest(manifest) -> Manifest:
    return manifest if isinstance(manifest, Manifest) else Manifest.read(manifest)


def _finish(records, out_dir: Path) -> Manifest:
    out = Manifest(records, out_dir)
    validate(out)
    out.write(out_dir / MANIFEST_NAME)
    return out


# -- synth -------------------------------------------------------------------------


def parse_mix(mix) -> tuple:
    if isinstance(mix, str):
        mix = [float(v) for v in mix.split(",")]
    mix = tuple(float(v) for v in mix)
    if len(mix) != 3 or min(mix) < 0 or not math.isclose(sum(mix), 1.0, abs_tol=1e-6):
        raise InvalidParam(f"class mix must be 3 non-negative probabilities summing to 1, got {mix}")
    return mix


def draw_labels(n_cases: int, class_mix, seed: int = 0) -> list:
    """Case labels drawn i.i.d. from ``class_mix`` (none, left, right)."""
    mix = parse_mix(class_mix)
    if n_cases < 0:
        raise InvalidParam("n_cases must be >= 0")
    if not n_cases:
        return []
    rng = np.random.default_rng(derive_seed(seed, "labels"))
    return [LABELS[i] for i in rng.choice(3, size=n_cases, p=mix)]


def _synth_task(job):
    out_dir, case_id, params = job
    case = generate_case(params)
    _write_bytes(out_dir / "masks" / f"{case_id}.vmsk", save_vmsk(case.mask))
    gpath = out_dir / "graphs" / f"{case_id}.json"
    gpath.parent.mkdir(parents=True, exist_ok=True)
    write_graph(gpath, case.graph)
    return case.label


def cmd_synth(
    n_cases: int,
    class_mix,
    out_dir,
    seed: int = 0,
    params: Optional[SynthParams] = None,
    workers: Optional[int] = None,
) -> Manifest:
    """Generate ``n_cases`` labelled synthetic cases under ``out_dir``."""
    labels = draw_labels(n_cases, class_mix, seed)
    out_dir = Path(out_dir)
    template = params or SynthParams()
    jobs, records = [], []
    for i, label in enumerate(labels):
        cid = f"case{i:04d}"
        cseed = derive_seed(seed, cid)
        jobs.append((out_dir, cid, replace(template, lvo_class=label, seed=cseed)))
        records.append(
            CaseRecord(
                id=cid,
                path=f"masks/{cid}.vmsk",
                graph_path=f"graphs/{cid}.json",
                label=label,
                seed=cseed,
            )
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    pmap(_synth_task, jobs, workers)
    log.info("synthesized %d cases into %s", n_cases, out_dir)
    return _finish(records, out_dir)


# -- prune ---------------------------------------------------------------------------


def _prune_task(job):
    mask_path, graph_path, out_mask, out_graph, threshold = job
    mask = _read_mask(mask_path)
    try:
        graph = read_graph(graph_path)
    except OSError as exc:
        raise IoError(f"missing file {graph_path}") from exc
    kept = prune_graph(graph, geodesic_distances(graph), threshold)
    pruned = carve_mask(mask, kept)
    _write_bytes(out_mask, save_vmsk(pruned))
    write_graph(out_graph, kept)


def cmd_prune(manifest, out_dir, threshold_mm: float = 150.0, workers: Optional[int] = None) -> Manifest:
    """Carve every mask down to vessels within ``threshold_mm`` walking distance."""
    src = _load_manifest(manifest)
    out_dir = Path(out_dir)
    (out_dir / "graphs").mkdir(parents=True, exist_ok=True)
    jobs, records = [], []
    for r in src:
        if r.graph_path is None:
            raise MissingGraph(f"case {r.id!r} has no graph_path")
        mask_rel, graph_rel = f"masks/{r.id}.vmsk", f"graphs/{r.id}.json"
        jobs.append(
            (src.resolve(r.path), src.resolve(r.graph_path), out_dir / mask_rel, out_dir / graph_rel, threshold_mm)
        )
        records.append(replace(r, path=mask_rel, graph_path=graph_rel))
    pmap(_prune_task, jobs, workers)
    return _finish(records, out_dir)


# -- augment ------------------------------------------------------------------------


def _augment_task(job):
    src_path, out_path, seed, anchors, max_disp, mirrored = job
    mask = _read_mask(src_path)
    if mirrored:
        mask = mirror_sagittal(mask)
    _write_bytes(out_path, save_vmsk(random_deform(mask, seed, anchors, max_disp)))


def plan_augmentation(manifest, out_dir, spec: AugmentationSpec = AugmentationSpec()):
    """Variant tasks and output records, without touching any mask."""
    src = _load_manifest(manifest)
    bad = [r.id for r in src if r.origin != "original"]
    if bad:
        raise NonOriginalInput(f"augment expects original cases only; got variants {bad[:3]}")
    out_dir = Path(out_dir)
    jobs, variants = [], []
    for r in src:
        for idx, mirrored, anchors in spec.plan():
            vid = f"{r.id}_v{idx:02d}"
            rel = f"masks/{vid}.vmsk"
            seed = derive_seed(spec.master_seed, r.id, idx)
            jobs.append((src.resolve(r.path), out_dir / rel, seed, anchors, spec.max_disp, mirrored))
            variants.append(
                CaseRecord(
                    id=vid,
                    path=rel,
                    label=swap_label(r.label) if mirrored else r.label,
                    origin="mirrored_deformed" if mirrored else "deformed",
                    parent=r.id,
                    seed=seed,
                    anchors=anchors,
                    max_disp=float(spec.max_disp),
                    mirrored=mirrored,
                )
            )
    return jobs, src.rebased(out_dir).records + variants


def cmd_augment(manifest, out_dir, spec: AugmentationSpec = AugmentationSpec(), workers: Optional[int] = None) -> Manifest:
    """Precompute deformed (and mirrored) variants of every original case.

    Originals are kept in the output manifest; their paths are rewritten
    relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    jobs, records = plan_augmentation(manifest, out_dir, spec)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    pmap(_augment_task, jobs, workers)
    log.info("wrote %d variants", len(jobs))
    return _finish(records, out_dir)


# -- stats ------------------------------------------------------------------------------


def _stats_task(job):
    path, connectivity = job
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"missing file {path}") from exc
    from .maskgrid import load_vmsk

    mask = load_vmsk(data)
    st = connected_components(mask, connectivity)
    return {
        **st.to_dict(),
        "dims": list(mask.dims),
        "occupancy": st.foreground_count / mask.size,
        "file_bytes": len(data),
        "compression_ratio": mask.size / len(data),
    }


def cmd_stats(manifest, connectivity: int = 6, workers: Optional[int] = None) -> dict:
    src = _load_manifest(manifest)
    for r in src:
        if not src.resolve(r.path).is_file():
            raise IoError(f"missing file {src.resolve(r.path)}")
    per = pmap(_stats_task, [(str(src.resolve(r.path)), connectivity) for r in src], workers)
    cases = [{"id": r.id, "label": r.label, "origin": r.origin, **s} for r, s in zip(src, per)]
    return {
        "n_cases": len(cases),
        "label_counts": {lab: sum(r.label == lab for r in src) for lab in LABELS},
        "origin_counts": {o: n for o, n in _count(r.origin for r in src).items()},
        "cases": cases,
    }


def _count(items):
    out = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return out


# -- train / eval ------------------------------------------------------------------------


def cmd_train(
    manifest,
    regime: str = "deformed_mirrored",
    folds: int = 5,
    pool: int = 8,
    seed: int = 0,
    model_out=None,
    config: Optional[classeval.TrainConfig] = None,
    epoch_scale: float = 1.0,
    n_bootstrap: int = 2000,
    workers: Optional[int] = None,
) -> dict:
    """Cross-validate under ``regime``; optionally also fit and save a final model.

    The final model trains on every fold but the first and selects its
    epoch on the first fold's original cases.
    """
    src = _load_manifest(manifest)
    report = classeval.crossval(
        src, regime, folds, pool, seed, config, epoch_scale, n_bootstrap, workers
    )
    if model_out is not None:
        model = fit_final_model(src, report["fold_plan"], regime, pool, seed, config, epoch_scale, workers)
        _write_bytes(Path(model_out), model.to_json().encode("utf-8"))
    return report


def fit_final_model(src: Manifest, plan, regime, pool, seed, config, epoch_scale, workers):
    ids = src.by_id()

    def root(r):
        while r.parent is not None:
            r = ids[r.parent]
        return r.id

    allowed = classeval.REGIME_ORIGINS[regime]
    rows = [r for r in src if r.origin in allowed]
    X = np.asarray(
        pmap(classeval._load_features, [(str(src.resolve(r.path)), pool) for r in rows], workers)
    )
    y = np.array([classeval.CLASSES.index(r.label) for r in rows])
    fold = np.array([plan[root(r)] for r in rows])
    orig = np.array([r.origin == "original" for r in rows])
    val = (fold == 0) & orig
    train = fold != 0
    base = config or classeval.TrainConfig()
    epochs = max(1, int(round(classeval.REGIME_EPOCHS[regime] * epoch_scale)))
    cfg = classeval.TrainConfig(**{**asdict(base), "epochs": epochs, "seed": int(seed)})
    model = classeval.train_softmax(X[train], y[train], X[val], y[val], cfg, pool)
    model.meta = {
        k: v for k, v in model.meta.items() if k not in ("train_loss", "val_loss")
    }
    model.meta.update({"regime": regime, "validation_fold": 0, "n_train": int(train.sum())})
    return model


def cmd_eval(model_path, manifest, n_bootstrap: int = 2000, seed: int = 0, workers: Optional[int] = None) -> dict:
    """Score a saved model on the manifest's original (never augmented) cases."""
    try:
        model = classeval.SoftmaxModel.from_json(Path(model_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read model {model_path}") from exc
    src = _load_manifest(manifest)
    rows = src.originals()
    X = np.asarray(
        pmap(classeval._load_features, [(str(src.resolve(r.path)), model.pool) for r in rows], workers)
    )
    if not rows:
        raise classeval.InsufficientCases("manifest has no original cases")
    probs = classeval.predict_proba(model, X)
    res = classeval.evaluate_probs(probs, [r.label for r in rows], n_bootstrap, seed)
    return {
        "n_cases": len(rows),
        "label_counts": {lab: sum(r.label == lab for r in rows) for lab in LABELS},
        "auc": {k: (v.to_dict() if v else None) for k, v in res.items()},
        "predictions": [
            {"id": r.id, "label": r.label, "p": [float(x) for x in p]} for r, p in zip(rows, probs)
        ],
    }


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2) + "\n"
    if path is not None:
        _write_bytes(Path(path), text.encode("utf-8"))
    return text


def run_pipeline(
    out_root,
    n_cases: int,
    class_mix=COHORT_MIX,
    seed: int = 0,
    synth_params: Optional[SynthParams] = None,
    threshold_mm: float = 150.0,
    spec: Optional[AugmentationSpec] = None,
    regime: str = "deformed_mirrored",
    folds: int = 5,
    pool: int = 8,
    config: Optional[classeval.TrainConfig] = None,
    epoch_scale: float = 1.0,
    n_bootstrap: int = 2000,
    workers: Optional[int] = None,
) -> dict:
    """synth -> prune -> augment -> train -> eval under one master seed."""
    out_root = Path(out_root)
    spec = spec or AugmentationSpec(master_seed=seed)
    m = cmd_synth(n_cases, class_mix, out_root / "synth", seed, synth_params, workers)
    m = cmd_prune(m, out_root / "pruned", threshold_mm, workers)
    need_aug = regime != "none"
    if need_aug:
        m = cmd_augment(m, out_root / "augmented", spec, workers)
    report = cmd_train(
        m, regime, folds, pool, seed, out_root / "model.json", config, epoch_scale, n_bootstrap, workers
    )
    dump_json(report, out_root / "metrics.json")
    ev = cmd_eval(out_root / "model.json", m, n_bootstrap, seed, workers)
    dump_json(ev, out_root / "eval.json")
    return {"manifest": m, "report": report, "eval": ev}

"""Command-line entry point.

Usage::

    vesselforge synth   --cases 30 --mix 0.36,0.33,0.31 --out data/synth --seed 1
    vesselforge prune   --manifest data/synth/manifest.jsonl --threshold-mm 150 --out data/pruned
    vesselforge augment --manifest data/pruned/manifest.jsonl --out data/aug --seed 1
    vesselforge stats   --manifest data/aug/manifest.jsonl
    vesselforge train   --manifest data/aug/manifest.jsonl --regime deformed_mirrored --out model.json
    vesselforge eval    --model model.json --manifest data/pruned/manifest.jsonl

Failures exit nonzero and print one JSON line ``{"error": ..., "message": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import classeval, pipeline
from .errors import VesselForgeError
from .manifest import AugmentationSpec, Manifest, validate
from .maskgrid import ATLAS_DIMS, ATLAS_SPACING, from_dense_bytes, write_vmsk
from .synthgen import SynthParams

log = logging.getLogger("vesselforge")


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def _triple(cast):
    def parse(text):
        vals = [cast(v) for v in text.split(",")]
        if len(vals) != 3:
            raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
        return tuple(vals)

    return parse


def _synth_params(args) -> SynthParams:
    return SynthParams(dims=args.dims, spacing=args.spacing, branch_depth=args.branch_depth)


def cmd_synth(args):
    m = pipeline.cmd_synth(args.cases, args.mix, args.out, args.seed, _synth_params(args), args.workers)
    print(json.dumps({"manifest": str(m.base_dir / pipeline.MANIFEST_NAME), "cases": len(m)}))


def cmd_prune(args):
    m = pipeline.cmd_prune(args.manifest, args.out, args.threshold_mm, args.workers)
    print(json.dumps({"manifest": str(m.base_dir / pipeline.MANIFEST_NAME), "cases": len(m)}))


def cmd_augment(args):
    spec = AugmentationSpec(
        per_anchor_count=args.per_anchor_count,
        anchor_counts=tuple(args.anchors),
        max_disp=args.max_disp,
        mirror=args.mirror,
        master_seed=args.seed,
    )
    m = pipeline.cmd_augment(args.manifest, args.out, spec, args.workers)
    print(json.dumps({"manifest": str(m.base_dir / pipeline.MANIFEST_NAME), "cases": len(m)}))


def cmd_stats(args):
    sys.stdout.write(pipeline.dump_json(pipeline.cmd_stats(args.manifest, args.connectivity, args.workers)))


def _train_config(args):
    return classeval.TrainConfig(
        learning_rate=args.lr, l2=args.l2, optimizer=args.optimizer
    )


def cmd_train(args):
    report = pipeline.cmd_train(
        args.manifest,
        args.regime,
        args.folds,
        args.pool,
        args.seed,
        args.out,
        _train_config(args),
        args.epoch_scale,
        args.bootstrap,
        args.workers,
    )
    text = pipeline.dump_json(report, args.report)
    if args.report is None:
        sys.stdout.write(text)


def cmd_eval(args):
    res = pipeline.cmd_eval(args.model, args.manifest, args.bootstrap, args.seed, args.workers)
    text = pipeline.dump_json(res, args.report)
    if args.report is None:
        sys.stdout.write(text)


def cmd_validate(args):
    m = Manifest.read(args.manifest)
    validate(m, check_files=not args.no_files)
    print(json.dumps({"manifest": args.manifest, "cases": len(m), "valid": True}))


def cmd_import(args):
    with open(args.raw, "rb") as fh:
        mask = from_dense_bytes(fh.read(), args.dims, args.spacing)
    write_vmsk(args.out, mask)
    print(json.dumps({"out": args.out, "foreground": mask.foreground_count}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vesselforge", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workers", type=int, default=None, help="worker processes (capped by VESSELFORGE_THREADS)")
        return sp

    sp = common(sub.add_parser("synth", help="generate labelled synthetic vessel trees"))
    sp.add_argument("--cases", type=int, required=True)
    sp.add_argument("--mix", default=",".join(repr(v) for v in pipeline.COHORT_MIX),
                    help="none,left,right probabilities")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", type=_triple(int), default=ATLAS_DIMS)
    sp.add_argument("--spacing", type=_triple(float), default=ATLAS_SPACING)
    sp.add_argument("--branch-depth", type=int, default=SynthParams.branch_depth)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("prune", help="carve masks to vessels near the seed region"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--threshold-mm", type=float, default=150.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prune)

    sp = common(sub.add_parser("augment", help="precompute elastic/mirrored variants"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-anchor-count", type=int, default=10)
    sp.add_argument("--anchors", type=_ints, default=[4, 5])
    sp.add_argument("--max-disp", type=float, default=90.0)
    sp.add_argument("--mirror", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_augment)

    sp = common(sub.add_parser("stats", help="per-case mask statistics as JSON"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
    sp.set_defaults(func=cmd_stats)

    sp = common(sub.add_parser("train", help="cross-validate and fit a softmax model"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--regime", choices=classeval.REGIMES, default="deformed_mirrored")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--pool", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="model JSON path")
    sp.add_argument("--report", default=None, help="metrics JSON path (default: stdout)")
    sp.add_argument("--epoch-scale", type=float, default=1.0)
    sp.add_argument("--lr", type=float, default=classeval.TrainConfig.learning_rate)
    sp.add_argument("--l2", type=float, default=classeval.TrainConfig.l2)
    sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    sp.add_argument("--bootstrap", type=int, default=2000)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="score a model on original cases"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--bootstrap", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--report", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("validate", help="check manifest invariants")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--no-files", action="store_true")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("import", help="convert a raw u8 0/1 volume to VMSK")
    sp.add_argument("raw")
    sp.add_argument("--dims", type=_triple(int), required=True)
    sp.add_argument("--spacing", type=_triple(float), default=ATLAS_SPACING)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_import)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s [%(levelname)s] %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except VesselForgeError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return 1
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "IoError", "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

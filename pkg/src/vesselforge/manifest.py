"""Dataset catalog: case records, JSON Lines manifests and seed derivation."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .errors import InvalidManifest, IoError

LABELS = ("none", "left", "right")
ORIGINS = ("original", "deformed", "mirrored", "mirrored_deformed")
_SWAP = {"none": "none", "left": "right", "right": "left"}


def swap_label(label: str) -> str:
    return _SWAP[label]


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 64-bit seed from a master seed and any identifying parts."""
    key = ":".join(str(p) for p in (int(master_seed), *parts)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class CaseRecord:
    id: str
    path: str
    label: str
    origin: str = "original"
    graph_path: Optional[str] = None
    parent: Optional[str] = None
    seed: int = 0
    anchors: Optional[int] = None
    max_disp: Optional[float] = None
    mirrored: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "CaseRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidManifest(f"unknown manifest fields {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InvalidManifest(str(exc)) from exc


@dataclass(frozen=True)
class AugmentationSpec:
    """Offline augmentation plan; the defaults give 40 variants per case."""

    per_anchor_count: int = 10
    anchor_counts: Sequence[int] = (4, 5)
    max_disp: float = 90.0
    mirror: bool = True
    master_seed: int = 0

    @property
    def variants_per_case(self) -> int:
        return len(self.anchor_counts) * self.per_anchor_count * (2 if self.mirror else 1)

    def plan(self):
        """Yield ``(variant_index, mirrored, anchors)`` in output order."""
        idx = 0
        for mirrored in ((False, True) if self.mirror else (False,)):
            for anchors in self.anchor_counts:
                for _ in range(self.per_anchor_count):
                    yield idx, mirrored, int(anchors)
                    idx += 1


class Manifest:
    """Ordered case records plus the directory relative paths resolve against."""

    def __init__(self, records: Iterable[CaseRecord], base_dir="."):
        self.records: List[CaseRecord] = list(records)
        self.base_dir = Path(base_dir)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}

    def originals(self) -> List[CaseRecord]:
        return [r for r in self.records if r.origin == "original"]

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc.strerror}") from exc
        records = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidManifest(f"{path}:{lineno}: {exc.msg}") from exc
            records.append(CaseRecord.from_dict(doc))
        return cls(records, path.parent)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(r.to_json() + "\n" for r in self.records)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)

    def rebased(self, new_base) -> "Manifest":
        """Same records with paths rewritten relative to ``new_base``."""
        new_base = Path(new_base)

        def rel(p):
            if p is None:
                return None
            return Path(os.path.relpath(self.resolve(p), new_base)).as_posix()

        out = [
            CaseRecord(**{**asdict(r), "path": rel(r.path), "graph_path": rel(r.graph_path)})
            for r in self.records
        ]
        return Manifest(out, new_base)


def validate(manifest: Manifest, check_files: bool = True) -> None:
    """Raise :class:`InvalidManifest` unless every record satisfies the catalog rules."""
    seen = {}
    for r in manifest.records:
        if r.id in seen:
            raise InvalidManifest(f"duplicate case id {r.id!r}")
        seen[r.id] = r
    for r in manifest.records:
        where = f"case {r.id!r}"
        if r.label not in LABELS:
            raise InvalidManifest(f"{where}: label {r.label!r} not in {LABELS}")
        if r.origin not in ORIGINS:
            raise InvalidManifest(f"{where}: origin {r.origin!r} not in {ORIGINS}")
        if (r.origin == "original") != (r.parent is None):
            raise InvalidManifest(f"{where}: origin 'original' iff no parent")
        if r.mirrored != r.origin.startswith("mirrored"):
            raise InvalidManifest(f"{where}: mirrored flag disagrees with origin {r.origin!r}")
        if r.parent is not None:
            parent = seen.get(r.parent)
            if parent is None:
                raise InvalidManifest(f"{where}: parent {r.parent!r} not in manifest")
            want = swap_label(parent.label) if r.mirrored else parent.label
            if r.label != want:
                raise InvalidManifest(f"{where}: label {r.label!r}, expected {want!r}")
        if check_files:
            for p in (r.path, r.graph_path):
                if p is not None and not manifest.resolve(p).is_file():
                    raise InvalidManifest(f"{where}: missing file {manifest.resolve(p)}")

"""Synthetic labelled vessel trees.

A trunk rises from the bottom-center of the volume to a root bifurcation;
from there one principal subtree grows into each hemisphere (left is
``x < midline``). Each branch splits into a *continuation* child that stays
close to the parent direction and a *side* child at a wider angle. An LVO
is simulated by cutting the continuation stem of one principal subtree and
dropping everything distal to the cut.

A disconnected midline sinus tube is added by default. It never reaches
the seed region, so walking-distance pruning removes it, much like venous
structures in real data.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidParam, OutOfExtent, TooShallow
from .maskgrid import ATLAS_DIMS, ATLAS_SPACING, VoxelMask
from .treeprune import CenterlineGraph, Edge, node_in_extent, tube_union

# artifact geometry constants (mm / degrees), not anatomical measurements
TRUNK_BASE_Z_MM = 22.0
TRUNK_LENGTH_MM = 42.0
ROOT_JITTER_MM = 4.0
PRINCIPAL_LENGTH_MM = 40.0
LENGTH_DECAY = 0.82
LENGTH_SPREAD = 0.3
CONTINUATION_CONE_DEG = (8.0, 25.0)
SIDE_CONE_DEG = (35.0, 65.0)
TORTUOSITY = 0.18
SEED_RADIUS_MM = 10.0
LVO_MAX_STEM_BIFURCATIONS = 3
SINUS_RADIUS_MM = 3.0

_SIDES = ("left", "right")


@dataclass(frozen=True)
class SynthParams:
    dims: Tuple[int, int, int] = ATLAS_DIMS
    spacing: Tuple[float, float, float] = ATLAS_SPACING
    branch_depth: int = 7
    segment_len_mm: float = 4.0
    root_radius_mm: float = 3.6
    radius_decay: float = 0.88
    lvo_class: str = "none"
    seed: int = 0
    include_sinus: bool = True

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidParam(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidParam(f"spacing must be positive, got {self.spacing}")
        if int(self.branch_depth) != self.branch_depth or self.branch_depth < 0:
            raise InvalidParam(f"branch_depth must be a non-negative integer, got {self.branch_depth}")
        if not 0 < self.segment_len_mm <= 5:
            raise InvalidParam(f"segment_len_mm must be in (0, 5], got {self.segment_len_mm}")
        if not self.root_radius_mm > 0:
            raise InvalidParam(f"root_radius_mm must be positive, got {self.root_radius_mm}")
        if not 0 < self.radius_decay < 1:
            raise InvalidParam(f"radius_decay must be in (0, 1), got {self.radius_decay}")
        if self.lvo_class not in ("none",) + _SIDES:
            raise InvalidParam(f"lvo_class must be none/left/right, got {self.lvo_class!r}")

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def midline_mm(self) -> float:
        return float(self.extent_mm[0] / 2)


@dataclass(frozen=True, eq=False)
class LabeledCase:
    graph: CenterlineGraph
    mask: VoxelMask
    label: str


def _unit(v):
    return v / np.linalg.norm(v)


def _perp_basis(d):
    helper = np.eye(3)[int(np.argmin(np.abs(d)))]
    u = _unit(np.cross(d, helper))
    return u, np.cross(d, u)


def _tilt(d, theta, phi):
    u, v = _perp_basis(d)
    return _unit(math.cos(theta) * d + math.sin(theta) * (math.cos(phi) * u + math.sin(phi) * v))


class _Builder:
    def __init__(self, params: SynthParams, rng: np.random.Generator):
        self.p = params
        self.rng = rng
        self.nodes: Dict[int, Tuple[float, float, float]] = {}
        self.edges: List[Edge] = []
        self.hi = params.extent_mm
        self.mid = params.midline_mm
        # keeps every tube voxel inside the volume
        self.step = params.segment_len_mm * (1 - 1e-9)

    def add_node(self, pos) -> int:
        nid = len(self.nodes)
        self.nodes[nid] = tuple(float(c) for c in pos)
        return nid

    def _inside(self, pos, radius):
        margin = radius + 1.0
        return bool(np.all(pos >= margin) and np.all(pos <= self.hi - margin))

    def _confined(self, pos, radius, side):
        if side is None:
            return True
        gap = radius + 1.0
        return pos[0] <= self.mid - gap if side == "left" else pos[0] >= self.mid + gap

    def grow(self, start: int, direction, length, radius, side=None, cleared=True):
        """Walk a tortuous branch; returns (end node, end direction, completed)."""
        n_seg = max(1, math.ceil(length / self.p.segment_len_mm))
        step = min(length / n_seg, self.step)
        cur = start
        pos = np.asarray(self.nodes[start])
        d = direction
        for _ in range(n_seg):
            d = _unit(direction + TORTUOSITY * self.rng.standard_normal(3) + 0.5 * (d - direction))
            nxt = pos + step * d
            if not self._inside(nxt, radius):
                return cur, d, False
            ok = self._confined(nxt, radius, side)
            if cleared and not ok:
                return cur, d, False
            cleared = cleared or ok
            nid = self.add_node(nxt)
            self.edges.append(Edge(cur, nid, float(radius)))
            cur, pos = nid, nxt
        return cur, d, cleared

    def subtree(self, start, direction, gen, side, cleared=False):
        p = self.p
        length = PRINCIPAL_LENGTH_MM * LENGTH_DECAY ** (gen - 1)
        length *= 1 + LENGTH_SPREAD * self.rng.uniform(-1, 1)
        radius = p.root_radius_mm * p.radius_decay ** gen
        end, d, completed = self.grow(start, direction, length, radius, side, cleared)
        if not completed or gen >= p.branch_depth:
            return
        phi = self.rng.uniform(0, 2 * math.pi)
        cont = _tilt(d, math.radians(self.rng.uniform(*CONTINUATION_CONE_DEG)), phi)
        side_dir = _tilt(d, math.radians(self.rng.uniform(*SIDE_CONE_DEG)), phi + math.pi)
        self.subtree(end, cont, gen + 1, side, True)
        self.subtree(end, side_dir, gen + 1, side, True)

    def sinus(self):
        # midline arc near the vertex running front to back
        cy, top = self.hi[1] / 2, self.hi[2]
        r = SINUS_RADIUS_MM
        z0 = top - r - 12.0
        span = 0.36 * self.hi[1]
        t = np.linspace(-1.0, 1.0, 2001)
        curve = np.stack(
            [np.full_like(t, self.mid), cy + span * t, z0 - 0.18 * self.hi[2] * t * t], axis=1
        )
        arc = np.concatenate(([0.0], np.cumsum(np.linalg.norm(np.diff(curve, axis=0), axis=1))))
        n_seg = math.ceil(arc[-1] / self.step)
        # equal arc-length samples along the polyline: chord <= arc <= step
        at = np.linspace(0.0, arc[-1], n_seg + 1)
        picks = np.stack([np.interp(at, arc, curve[:, k]) for k in range(3)], axis=1)
        prev = None
        for pt in picks:
            if not self._inside(pt, r):
                prev = None
                continue
            nid = self.add_node(pt)
            if prev is not None:
                self.edges.append(Edge(prev, nid, r))
            prev = nid


def generate_tree(params: SynthParams) -> CenterlineGraph:
    """Deterministic random vessel tree; node 0 is the trunk base."""
    params.validate()
    rng = np.random.default_rng(int(params.seed) & ((1 << 64) - 1))
    b = _Builder(params, rng)
    hi = params.extent_mm
    jitter = rng.uniform(-ROOT_JITTER_MM, ROOT_JITTER_MM, 3)
    base = np.array([params.midline_mm, 0.45 * hi[1], min(TRUNK_BASE_Z_MM, 0.3 * hi[2])]) + jitter
    root = b.add_node(base)
    trunk_dir = _unit(np.array([0.0, 0.15, 1.0]))
    trunk_len = min(TRUNK_LENGTH_MM, 0.25 * hi[2])
    bif, _, _ = b.grow(root, trunk_dir, trunk_len, params.root_radius_mm)
    if params.branch_depth > 0:
        for side, sign in (("left", -1.0), ("right", 1.0)):
            lateral = np.array([1.0, rng.normal(0, 0.25), 0.45 + rng.normal(0, 0.1)])
            lateral[0] *= sign
            b.subtree(bif, _unit(lateral), 1, side)
    arterial = len(b.nodes)
    if params.include_sinus:
        b.sinus()
    anchor = np.asarray(b.nodes[bif])
    seeds = {
        n
        for n in range(arterial)
        if np.linalg.norm(np.asarray(b.nodes[n]) - anchor) <= SEED_RADIUS_MM
    }
    return CenterlineGraph(b.nodes, tuple(b.edges), frozenset(seeds))


def _rooted(graph: CenterlineGraph):
    root = min(graph.nodes)
    adj = {n: [] for n in graph.nodes}
    for e in graph.edges:
        adj[e.a].append(e.b)
        adj[e.b].append(e.a)
    parent = {root: None}
    children: Dict[int, List[int]] = {n: [] for n in graph.nodes}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(adj[u]):
            if v not in parent:
                parent[v] = u
                children[u].append(v)
                queue.append(v)
    return root, parent, children


def _descendants(children, start) -> List[int]:
    out, stack = [], [start]
    while stack:
        u = stack.pop()
        out.append(u)
        stack.extend(children[u])
    return out


def principal_stem(graph: CenterlineGraph, side: str):
    """Stem of one hemisphere's principal subtree.

    Returns ``(stem, bifurcations, children)`` where ``stem`` is the node path
    from the first node past the root bifurcation, always following the
    child best aligned with the incoming direction, and ``bifurcations[i]``
    counts branch points passed before ``stem[i]``.
    """
    if side not in _SIDES:
        raise InvalidParam(f"side must be left or right, got {side!r}")
    root, parent, children = _rooted(graph)
    bif = root
    while len(children[bif]) == 1:
        bif = children[bif][0]
    if len(children[bif]) < 2:
        raise TooShallow("tree has no root bifurcation")
    xs = {c: graph.nodes[c][0] for c in children[bif]}
    first = min(xs, key=xs.get) if side == "left" else max(xs, key=xs.get)
    pos = lambda n: np.asarray(graph.nodes[n])
    stem, forks = [first], [0]
    n_forks = 0
    u = first
    while children[u]:
        if len(children[u]) > 1:
            n_forks += 1
        incoming = _unit(pos(u) - pos(parent[u]))
        u = max(children[u], key=lambda c: float(_unit(pos(c) - pos(u)) @ incoming))
        stem.append(u)
        forks.append(n_forks)
    return stem, forks, children


def apply_lvo(
    graph: CenterlineGraph,
    side: str,
    rng_seed: int,
    midline_mm: Optional[float] = None,
) -> CenterlineGraph:
    """Occlude one hemisphere: drop everything distal to a random stem node.

    Cut candidates lie on the principal stem before its third branch point.
    When ``midline_mm`` is given, candidates must also sit at least
    ``radius + 1`` mm inside their hemisphere so the removed tubes never
    touch the other half of the volume.
    """
    stem, forks, children = principal_stem(graph, side)
    subtree = set(_descendants(children, stem[0]))
    if not any(len(children[n]) > 1 for n in subtree):
        raise TooShallow(f"{side} principal subtree has fewer than 2 generations")
    radius = {}
    for e in graph.edges:
        radius[e.a] = max(radius.get(e.a, 0.0), e.radius_mm)
        radius[e.b] = max(radius.get(e.b, 0.0), e.radius_mm)
    candidates = []
    for n, k in zip(stem[:-1], forks[:-1]):
        if k >= LVO_MAX_STEM_BIFURCATIONS:
            break
        if midline_mm is not None:
            x, gap = graph.nodes[n][0], radius[n] + 1.0
            if (side == "left" and x > midline_mm - gap) or (side == "right" and x < midline_mm + gap):
                continue
        candidates.append(n)
    if not candidates:
        raise TooShallow(f"no valid occlusion site on the {side} stem")
    rng = np.random.default_rng(int(rng_seed) & ((1 << 64) - 1))
    cut = candidates[int(rng.integers(len(candidates)))]
    drop = set(_descendants(children, cut)) - {cut}
    return graph.subgraph(set(graph.nodes) - drop)


def rasterize_tree(graph: CenterlineGraph, dims, spacing=ATLAS_SPACING) -> VoxelMask:
    """Foreground = voxel centers within the edge radius of some edge segment."""
    dims = tuple(int(d) for d in dims)
    for n, p in graph.nodes.items():
        if not node_in_extent(p, dims, spacing):
            raise OutOfExtent(f"node {n} at {p} lies outside the {dims} volume")
    return VoxelMask(tube_union(graph, dims, spacing), spacing)


def generate_case(params: SynthParams, max_attempts: int = 16) -> LabeledCase:
    """Tree, optional LVO, rasterized mask.

    A tree whose occluded side turns out too shallow is regrown from a
    derived seed; the result stays a deterministic function of ``params``.
    """
    from .manifest import derive_seed

    params.validate()
    for attempt in range(max_attempts):
        seed = params.seed if attempt == 0 else derive_seed(params.seed, "regrow", attempt)
        graph = generate_tree(replace(params, seed=seed))
        if params.lvo_class == "none":
            break
        try:
            graph = apply_lvo(graph, params.lvo_class, derive_seed(seed, "lvo"), params.midline_mm)
            break
        except TooShallow:
            continue
    else:
        raise TooShallow(f"could not grow an occludable tree in {max_attempts} attempts")
    return LabeledCase(graph, rasterize_tree(graph, params.dims, params.spacing), params.lvo_class)

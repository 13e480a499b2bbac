"""Vessel centerline graphs and walking-distance pruning.

Positions are in mm in atlas space; voxel ``(i, j, k)`` has its center at
``(i, j, k) * spacing``.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Tuple

import numpy as np

from .errors import EmptySeeds, InvalidGraph, InvalidParam, OutOfExtent
from .maskgrid import VoxelMask

PRUNE_THRESHOLD_MM = 150.0

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Edge:
    a: int
    b: int
    radius_mm: float


@dataclass(frozen=True)
class CenterlineGraph:
    nodes: Mapping[int, Vec3]
    edges: Tuple[Edge, ...]
    seeds: FrozenSet[int]

    def __post_init__(self):
        nodes = {int(k): tuple(float(c) for c in v) for k, v in self.nodes.items()}
        edges = tuple(
            e if isinstance(e, Edge) else Edge(int(e[0]), int(e[1]), float(e[2]))
            for e in self.edges
        )
        seeds = frozenset(int(s) for s in self.seeds)
        for e in edges:
            if e.a not in nodes or e.b not in nodes:
                raise InvalidGraph(f"edge ({e.a}, {e.b}) references a missing node")
            if e.a == e.b:
                raise InvalidGraph(f"self-loop at node {e.a}")
            if not e.radius_mm > 0:
                raise InvalidGraph(f"edge ({e.a}, {e.b}) has radius {e.radius_mm}")
            if not _dist(nodes[e.a], nodes[e.b]) > 0:
                raise InvalidGraph(f"edge ({e.a}, {e.b}) has zero length")
        if not seeds <= nodes.keys():
            raise InvalidGraph(f"seeds {sorted(seeds - nodes.keys())} are not nodes")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "seeds", seeds)

    def edge_length(self, e: Edge) -> float:
        return _dist(self.nodes[e.a], self.nodes[e.b])

    def adjacency(self) -> Dict[int, List[Tuple[int, float]]]:
        adj: Dict[int, List[Tuple[int, float]]] = {n: [] for n in self.nodes}
        for e in self.edges:
            w = self.edge_length(e)
            adj[e.a].append((e.b, w))
            adj[e.b].append((e.a, w))
        return adj

    def subgraph(self, keep: Iterable[int]) -> "CenterlineGraph":
        keep = set(keep)
        return CenterlineGraph(
            {n: p for n, p in self.nodes.items() if n in keep},
            tuple(e for e in self.edges if e.a in keep and e.b in keep),
            self.seeds & keep,
        )

    # -- JSON --

    def to_json(self) -> str:
        doc = {
            "nodes": [{"id": n, "pos": list(self.nodes[n])} for n in sorted(self.nodes)],
            "edges": [{"a": e.a, "b": e.b, "radius_mm": e.radius_mm} for e in self.edges],
            "seeds": sorted(self.seeds),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "CenterlineGraph":
        try:
            doc = json.loads(text)
            nodes = {int(n["id"]): tuple(n["pos"]) for n in doc["nodes"]}
            edges = tuple(Edge(int(e["a"]), int(e["b"]), float(e["radius_mm"])) for e in doc["edges"])
            seeds = frozenset(int(s) for s in doc["seeds"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidGraph(f"malformed graph document: {exc}") from exc
        if any(len(p) != 3 for p in nodes.values()):
            raise InvalidGraph("node positions must have 3 coordinates")
        return cls(nodes, edges, seeds)


def _dist(p, q) -> float:
    return math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)


def read_graph(path) -> CenterlineGraph:
    with open(path, encoding="utf-8") as fh:
        return CenterlineGraph.from_json(fh.read())


def write_graph(path, graph: CenterlineGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(graph.to_json())


def geodesic_distances(graph: CenterlineGraph) -> Dict[int, float]:
    """Multi-source Dijkstra from the seed set along Euclidean edge lengths.

    Unreachable nodes map to ``inf``.
    """
    if not graph.seeds:
        raise EmptySeeds("graph has no seed nodes")
    adj = graph.adjacency()
    dist = {n: math.inf for n in graph.nodes}
    heap = []
    for s in sorted(graph.seeds):
        dist[s] = 0.0
        heap.append((0.0, s))
    heapq.heapify(heap)
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def prune_graph(
    graph: CenterlineGraph, dist: Mapping[int, float], threshold_mm: float = PRUNE_THRESHOLD_MM
) -> CenterlineGraph:
    """Keep nodes within ``threshold_mm`` walking distance; seeds always stay."""
    missing = graph.nodes.keys() - dist.keys()
    if missing:
        raise InvalidParam(f"distances missing for nodes {sorted(missing)[:5]}")
    keep = {n for n in graph.nodes if dist[n] <= threshold_mm} | set(graph.seeds)
    return graph.subgraph(keep)


def node_in_extent(pos, dims, spacing) -> bool:
    return all(
        -0.5 * s <= p <= (d - 0.5) * s for p, d, s in zip(pos, dims, spacing)
    )


def _check_extent(graph: CenterlineGraph, dims, spacing):
    for n, p in graph.nodes.items():
        if not node_in_extent(p, dims, spacing):
            raise OutOfExtent(f"node {n} at {p} lies outside the {dims} volume")


def segment_distance(points: np.ndarray, a, b) -> np.ndarray:
    """Euclidean distance from each row of ``points`` to segment ``ab``."""
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    ap = points - a
    t = np.clip(ap @ ab / (ab @ ab), 0.0, 1.0)
    d = ap - t[:, None] * ab
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def tube_union(graph: CenterlineGraph, dims, spacing, tolerance_mm: float = 0.0) -> np.ndarray:
    """Boolean grid of voxel centers within ``radius + tolerance`` of some edge."""
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=np.float64)
    out = np.zeros(dims, dtype=bool)
    upper = np.asarray(dims) - 1
    for e in graph.edges:
        pa = np.asarray(graph.nodes[e.a])
        pb = np.asarray(graph.nodes[e.b])
        reach = e.radius_mm + tolerance_mm
        lo = np.maximum(np.floor((np.minimum(pa, pb) - reach) / spacing), 0).astype(int)
        hi = np.minimum(np.ceil((np.maximum(pa, pb) + reach) / spacing), upper).astype(int)
        if np.any(hi < lo):
            continue
        axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) * spacing
        hit = segment_distance(pts, pa, pb) <= reach
        if hit.any():
            block = out[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
            block |= hit.reshape(gx.shape)
    return out


def carve_tolerance_mm(spacing) -> float:
    return 0.5 * max(spacing)


def carve_mask(mask: VoxelMask, kept: CenterlineGraph) -> VoxelMask:
    """Drop foreground voxels farther than radius + half a voxel from every kept edge."""
    _check_extent(kept, mask.dims, mask.spacing)
    near = tube_union(kept, mask.dims, mask.spacing, carve_tolerance_mm(mask.spacing))
    return VoxelMask(mask.voxels & near, mask.spacing)


def prune_mask(
    mask: VoxelMask, graph: CenterlineGraph, threshold_mm: float = PRUNE_THRESHOLD_MM
) -> VoxelMask:
    kept = prune_graph(graph, geodesic_distances(graph), threshold_mm)
    return carve_mask(mask, kept)

"""Planar geometry and road-network graph primitives.

Locations live in a local planar frame (meters east / meters north around a
dataset origin). Road networks are undirected graphs with straight-line edges;
the shortest-path metric and the nearest-point projection defined here are the
spatial prior consumed by the attack's mapping step and by the graph noise
mechanisms. Everything is immutable after construction and safe to share
across workers.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

EARTH_RADIUS_M = 6_371_000.0
COORDINATE_LIMIT_M = 1.0e7
DEG = math.pi / 180.0


@dataclass(frozen=True)
class Location:
    """A point in the local planar frame, in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InputError(f"location coordinates must be finite, got ({self.x}, {self.y})")
        if abs(self.x) > COORDINATE_LIMIT_M or abs(self.y) > COORDINATE_LIMIT_M:
            raise InputError(
                f"location ({self.x}, {self.y}) outside the +/-{COORDINATE_LIMIT_M:g} m planar frame"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class ProjectionSpec:
    """Origin of the equirectangular projection, in degrees."""

    origin_lat: float
    origin_lon: float

    def __post_init__(self):
        if not -90.0 <= self.origin_lat <= 90.0:
            raise InputError(f"origin_lat {self.origin_lat} outside [-90, 90]")
        if not -180.0 <= self.origin_lon <= 180.0:
            raise InputError(f"origin_lon {self.origin_lon} outside [-180, 180]")


def to_planar(lat: float, lon: float, proj: ProjectionSpec) -> Location:
    """Equirectangular projection of (lat, lon) degrees to planar meters.

    City-scale extents keep the projection error far below the distances that
    matter downstream, and all later math becomes exact Euclidean geometry.
    """
    if not -90.0 <= lat <= 90.0:
        raise InputError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise InputError(f"longitude {lon} outside [-180, 180]")
    x = EARTH_RADIUS_M * (lon - proj.origin_lon) * math.cos(proj.origin_lat * DEG) * DEG
    y = EARTH_RADIUS_M * (lat - proj.origin_lat) * DEG
    return Location(x, y)


def to_latlon(loc: Location, proj: ProjectionSpec) -> tuple[float, float]:
    """Inverse of :func:`to_planar`. Undefined for origins at the poles."""
    c = math.cos(proj.origin_lat * DEG)
    if c < 1e-12:
        raise InputError("projection origin at a pole cannot be inverted")
    lat = proj.origin_lat + loc.y / (EARTH_RADIUS_M * DEG)
    lon = proj.origin_lon + loc.x / (EARTH_RADIUS_M * c * DEG)
    return lat, lon


class RoadNetwork:
    """Undirected planar graph with straight-line edges.

    Node ids are dense 0..n-1. Edge lengths are the Euclidean distances of
    their endpoints, computed at construction time. Arrays are read-only.
    """

    __slots__ = ("node_xy", "edge_nodes", "edge_len", "_adj")

    def __init__(self, nodes: Sequence[tuple[int, Location]], edges: Sequence[tuple[int, int]]):
        if not nodes:
            raise ConfigurationError("road network needs at least one node")
        n = len(nodes)
        ids = sorted(nid for nid, _ in nodes)
        if ids != list(range(n)):
            raise ConfigurationError("node ids must be dense 0..n-1 without duplicates")
        xy = np.zeros((n, 2), dtype=np.float64)
        for nid, loc in nodes:
            xy[nid, 0] = loc.x
            xy[nid, 1] = loc.y
        edge_arr = np.zeros((len(edges), 2), dtype=np.int64)
        for i, (a, b) in enumerate(edges):
            if a == b:
                raise ConfigurationError(f"self-loop on node {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise ConfigurationError(f"edge ({a}, {b}) references a missing node")
            edge_arr[i, 0] = a
            edge_arr[i, 1] = b
        d = xy[edge_arr[:, 0]] - xy[edge_arr[:, 1]] if len(edges) else np.zeros((0, 2))
        lengths = np.sqrt((d * d).sum(axis=1))
        if len(edges) and not np.all(lengths > 0):
            bad = int(np.argmin(lengths))
            raise ConfigurationError(f"edge {bad} has zero length (coincident endpoints)")
        adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for i in range(len(edges)):
            a, b = int(edge_arr[i, 0]), int(edge_arr[i, 1])
            w = float(lengths[i])
            adj[a].append((b, w))
            adj[b].append((a, w))
        xy.setflags(write=False)
        edge_arr.setflags(write=False)
        lengths.setflags(write=False)
        self.node_xy = xy
        self.edge_nodes = edge_arr
        self.edge_len = lengths
        self._adj = tuple(tuple(nbrs) for nbrs in adj)

    @property
    def num_nodes(self) -> int:
        return self.node_xy.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_nodes.shape[0]

    def location(self, node_id: int) -> Location:
        return Location(float(self.node_xy[node_id, 0]), float(self.node_xy[node_id, 1]))

    def neighbors(self, node_id: int) -> tuple[tuple[int, float], ...]:
        return self._adj[node_id]

    def degree(self, node_id: int) -> int:
        return len(self._adj[node_id])

    def bounding_box(self) -> tuple[float, float, float, float]:
        xs, ys = self.node_xy[:, 0], self.node_xy[:, 1]
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())

    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounding_box()
        return math.hypot(x1 - x0, y1 - y0)


@dataclass(frozen=True)
class ConstrainedDomain:
    """Nonempty set of network nodes a user considers feasible."""

    node_ids: frozenset[int]

    def __post_init__(self):
        if not self.node_ids:
            raise InputError("constrained domain must be nonempty")
        object.__setattr__(self, "node_ids", frozenset(int(i) for i in self.node_ids))

    def ordered(self) -> tuple[int, ...]:
        """Deterministic node ordering used by inverse-CDF sampling."""
        return tuple(sorted(self.node_ids))

    def check_subset_of(self, net: RoadNetwork) -> None:
        bad = [i for i in self.node_ids if not 0 <= i < net.num_nodes]
        if bad:
            raise InputError(f"domain nodes {sorted(bad)} not in the network")


def generate_grid_network(rows: int, cols: int, spacing: float) -> RoadNetwork:
    """rows x cols lattice; node (r, c) sits at (c * spacing, r * spacing)."""
    if rows < 2 or cols < 2:
        raise InputError("grid needs rows >= 2 and cols >= 2")
    if not spacing > 0:
        raise InputError("grid spacing must be positive")
    nodes = [
        (r * cols + c, Location(c * spacing, r * spacing))
        for r in range(rows)
        for c in range(cols)
    ]
    edges: list[tuple[int, int]] = []
    for r in range(rows):
        for c in range(cols):
            nid = r * cols + c
            if c + 1 < cols:
                edges.append((nid, nid + 1))
            if r + 1 < rows:
                edges.append((nid, nid + cols))
    return RoadNetwork(nodes, edges)


def random_connected_network(
    num_nodes: int, rng: np.random.Generator, extent: float = 1000.0, extra_edge_frac: float = 0.4
) -> RoadNetwork:
    """Random connected graph: uniform points, random tree, plus extra chords."""
    if num_nodes < 1:
        raise InputError("num_nodes must be >= 1")
    pts = rng.uniform(0.0, extent, size=(num_nodes, 2))
    nodes = [(i, Location(float(pts[i, 0]), float(pts[i, 1]))) for i in range(num_nodes)]
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for i in range(1, num_nodes):
        j = int(rng.integers(0, i))
        edges.append((j, i))
        seen.add((j, i))
    n_extra = int(extra_edge_frac * num_nodes)
    for _ in range(n_extra):
        a = int(rng.integers(0, num_nodes))
        b = int(rng.integers(0, num_nodes))
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            continue
        seen.add(key)
        edges.append(key)
    return RoadNetwork(nodes, edges)


def nearest_points_on_network(points: np.ndarray, net: RoadNetwork) -> np.ndarray:
    """Project each row of ``points`` (m, 2) onto the closest edge segment.

    Ties on distance resolve to the lowest edge index; within an edge the
    projection parameter is unique, so results are deterministic.
    """
    if net.num_edges == 0:
        raise ConfigurationError("network has no edges to project onto")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    a = net.node_xy[net.edge_nodes[:, 0]]  # (E, 2)
    d = net.node_xy[net.edge_nodes[:, 1]] - a  # (E, 2)
    l2 = (d * d).sum(axis=1)
    l2safe = np.where(l2 > 0, l2, 1.0)
    rel = pts[:, None, :] - a[None, :, :]  # (m, E, 2)
    t = np.clip((rel * d[None, :, :]).sum(axis=2) / l2safe, 0.0, 1.0)  # (m, E)
    foot = a[None, :, :] + t[:, :, None] * d[None, :, :]  # (m, E, 2)
    d2 = ((pts[:, None, :] - foot) ** 2).sum(axis=2)  # (m, E)
    best = np.argmin(d2, axis=1)  # first minimum = lowest edge index
    out = foot[np.arange(pts.shape[0]), best]
    return out[0] if single else out


def nearest_on_network(loc: Location, net: RoadNetwork) -> Location:
    """The point of the network (union of edge segments) closest to ``loc``."""
    x, y = nearest_points_on_network(np.array([loc.x, loc.y]), net)
    return Location(float(x), float(y))


def nearest_node(x: float, y: float, net: RoadNetwork) -> int:
    """Closest node by Euclidean distance; ties go to the lowest node id."""
    d2 = (net.node_xy[:, 0] - x) ** 2 + (net.node_xy[:, 1] - y) ** 2
    return int(np.argmin(d2))


def shortest_path_distances(
    net: RoadNetwork, source: int, allowed: Iterable[int] | None = None
) -> np.ndarray:
    """Single-source Dijkstra over edge lengths.

    Returns an array of length num_nodes with ``inf`` marking unreachable (or
    disallowed) nodes. ``allowed`` restricts the walk to the induced subgraph.
    """
    n = net.num_nodes
    if not 0 <= source < n:
        raise InputError(f"node {source} not in the network")
    mask = None
    if allowed is not None:
        mask = np.zeros(n, dtype=bool)
        for i in allowed:
            if not 0 <= i < n:
                raise InputError(f"allowed node {i} not in the network")
            mask[i] = True
        if not mask[source]:
            raise InputError(f"source {source} not in the allowed set")
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    done = np.zeros(n, dtype=bool)
    heap: list[tuple[float, int]] = [(0.0, source)]
    while heap:
        du, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, w in net.neighbors(u):
            if mask is not None and not mask[v]:
                continue
            dv = du + w
            if dv < dist[v]:
                dist[v] = dv
                heapq.heappush(heap, (dv, v))
    dist.setflags(write=False)
    return dist


def shortest_path_distance(net: RoadNetwork, a: int, b: int) -> float:
    """Shortest-path length between nodes; ``inf`` when unreachable."""
    n = net.num_nodes
    if not (0 <= a < n and 0 <= b < n):
        raise InputError(f"node pair ({a}, {b}) not in the network")
    if a == b:
        return 0.0
    return float(shortest_path_distances(net, a)[b])


def dump_network(net: RoadNetwork, fh) -> None:
    """JSON file format: nodes with coordinates, edges by node ids."""
    doc = {
        "nodes": [
            {"id": i, "x": float(net.node_xy[i, 0]), "y": float(net.node_xy[i, 1])}
            for i in range(net.num_nodes)
        ],
        "edges": [
            {"a": int(net.edge_nodes[i, 0]), "b": int(net.edge_nodes[i, 1])}
            for i in range(net.num_edges)
        ],
    }
    json.dump(doc, fh)


def write_network(net: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_network(net, fh)


def read_network(path) -> RoadNetwork:
    """Load the JSON network format; edge lengths are recomputed on load."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"network file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"network file {path} is not valid JSON: {exc}") from exc
    try:
        nodes = [(int(n["id"]), Location(float(n["x"]), float(n["y"]))) for n in doc["nodes"]]
        edges = [(int(e["a"]), int(e["b"])) for e in doc["edges"]]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed network file {path}: {exc}") from exc
    return RoadNetwork(nodes, edges)

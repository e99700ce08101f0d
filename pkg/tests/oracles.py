"""Independent oracles used by the test suite.

Each oracle deliberately recomputes a quantity by a different method than the
implementation under test: all-pairs Floyd-Warshall vs Dijkstra, millimeter
dense sampling vs closed-form projection, central finite differences vs
analytic gradients, and a loop-based forward pass vs the vectorized one.
"""

from __future__ import annotations

import math

import numpy as np

from stgia.geo import Location, RoadNetwork
from stgia.model import ModelSpec, TrainingWindow, gradient_distance, loss


def floyd_warshall(net: RoadNetwork) -> np.ndarray:
    """All-pairs shortest paths by dynamic programming over node triples."""
    n = net.num_nodes
    d = np.full((n, n), math.inf)
    np.fill_diagonal(d, 0.0)
    for i in range(net.num_edges):
        a, b = int(net.edge_nodes[i, 0]), int(net.edge_nodes[i, 1])
        w = float(net.edge_len[i])
        if w < d[a, b]:
            d[a, b] = w
            d[b, a] = w
    for k in range(n):
        for i in range(n):
            dik = d[i, k]
            if not math.isfinite(dik):
                continue
            for j in range(n):
                alt = dik + d[k, j]
                if alt < d[i, j]:
                    d[i, j] = alt
    return d


def integer_lattice_network(rng: np.random.Generator, max_nodes: int = 15) -> RoadNetwork:
    """Random connected axis-aligned graph with exactly representable lengths.

    Nodes sit on an irregular integer lattice and edges are axis-aligned, so
    every edge length is an integer and path sums are exact in float64. That
    lets shortest-path implementations be compared for strict equality.
    """
    while True:
        rows = int(rng.integers(2, 4))
        cols = int(rng.integers(2, 6))
        if rows * cols <= max_nodes:
            break
    xs = np.cumsum(rng.integers(1, 60, size=cols))
    ys = np.cumsum(rng.integers(1, 60, size=rows))
    nodes = [
        (r * cols + c, Location(float(xs[c]), float(ys[r])))
        for r in range(rows)
        for c in range(cols)
    ]
    lattice = []
    for r in range(rows):
        for c in range(cols):
            nid = r * cols + c
            if c + 1 < cols:
                lattice.append((nid, nid + 1))
            if r + 1 < rows:
                lattice.append((nid, nid + cols))
    # random spanning tree of the lattice plus a random subset of the rest
    n = rows * cols
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in lattice:
        adj[a].append(b)
        adj[b].append(a)
    tree: set[tuple[int, int]] = set()
    seen = {0}
    frontier = [0]
    while frontier:
        u = frontier.pop(int(rng.integers(0, len(frontier))))
        nbrs = [v for v in adj[u] if v not in seen]
        if nbrs:
            frontier.append(u)
            v = nbrs[int(rng.integers(0, len(nbrs)))]
            seen.add(v)
            frontier.append(v)
            tree.add((min(u, v), max(u, v)))
    extras = [e for e in lattice if (min(e), max(e)) not in tree and rng.random() < 0.5]
    edges = sorted(tree) + extras
    return RoadNetwork(nodes, edges)


def dense_nearest_point(px: float, py: float, net: RoadNetwork, step_m: float = 1e-3) -> np.ndarray:
    """Brute-force nearest network point by sampling every edge at step_m."""
    best = None
    best_d2 = math.inf
    p = np.array([px, py])
    for i in range(net.num_edges):
        a = net.node_xy[net.edge_nodes[i, 0]]
        b = net.node_xy[net.edge_nodes[i, 1]]
        length = float(net.edge_len[i])
        ts = np.linspace(0.0, 1.0, max(2, int(length / step_m) + 1))
        pts = a[None, :] + ts[:, None] * (b - a)[None, :]
        d2 = ((pts - p) ** 2).sum(axis=1)
        j = int(np.argmin(d2))
        if d2[j] < best_d2:
            best_d2 = float(d2[j])
            best = pts[j]
    return best


def fd_param_gradient(spec: ModelSpec, params: np.ndarray, window: TrainingWindow,
                      h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss over every parameter."""
    out = np.zeros_like(params)
    for i in range(len(params)):
        up = params.copy()
        up[i] += h
        down = params.copy()
        down[i] -= h
        out[i] = (loss(spec, up, window) - loss(spec, down, window)) / (2 * h)
    return out


def fd_attack_gradient(spec: ModelSpec, params: np.ndarray, dummy: TrainingWindow,
                       true_grad: np.ndarray, h_norm: float = 1e-5):
    """Central finite differences of the matching objective over dummy data."""
    h_m = h_norm * spec.coordinate_scale
    d_inputs = np.zeros_like(dummy.inputs)
    for i in range(dummy.inputs.shape[0]):
        for j in range(2):
            up = dummy.inputs.copy()
            up[i, j] += h_m
            down = dummy.inputs.copy()
            down[i, j] -= h_m
            d_inputs[i, j] = (
                gradient_distance(spec, params, TrainingWindow(up, dummy.label), true_grad)
                - gradient_distance(spec, params, TrainingWindow(down, dummy.label), true_grad)
            ) / (2 * h_m)
    d_label = np.zeros_like(dummy.label)
    for i in range(len(dummy.label)):
        up = dummy.label.copy()
        up[i] += h_norm
        down = dummy.label.copy()
        down[i] -= h_norm
        d_label[i] = (
            gradient_distance(spec, params, TrainingWindow(dummy.inputs, up), true_grad)
            - gradient_distance(spec, params, TrainingWindow(dummy.inputs, down), true_grad)
        ) / (2 * h_norm)
    return d_inputs, d_label


def loop_forward(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Plain-loop reimplementation of the forward pass (no shared code paths)."""
    k, hdim, g = spec.window_len, spec.hidden_units, spec.num_cells
    d = 2 * k
    z = [float(inputs[i // 2, i % 2]) / spec.coordinate_scale for i in range(d)]
    idx = 0
    w1 = [[params[idx + r * d + c] for c in range(d)] for r in range(hdim)]
    idx += hdim * d
    b1 = [params[idx + r] for r in range(hdim)]
    idx += hdim
    w2 = [[params[idx + r * hdim + c] for c in range(hdim)] for r in range(g)]
    idx += g * hdim
    b2 = [params[idx + r] for r in range(g)]
    hval = [math.tanh(sum(w1[r][c] * z[c] for c in range(d)) + b1[r]) for r in range(hdim)]
    logits = [sum(w2[r][c] * hval[c] for c in range(hdim)) + b2[r] for r in range(g)]
    return np.array(logits)


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    def rank(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            mask = v == val
            r[mask] = r[mask].mean()
        return r

    rx, ry = rank(x), rank(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float((rx**2).sum()) * float((ry**2).sum()))
    return 0.0 if den == 0 else float((rx * ry).sum() / den)

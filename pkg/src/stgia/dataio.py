"""Check-in ingestion, temporal resampling, and synthetic trajectories.

Real check-ins arrive as a CSV of (user_id, ISO-8601 timestamp, lat, lon);
they are binned to a fixed interval, projected to the planar frame, and
snapped onto the road network. The synthetic generator random-walks the
network directly, which keeps the test corpus reproducible without any
external downloads.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import InputError
from .geo import (
    ConstrainedDomain,
    ProjectionSpec,
    RoadNetwork,
    nearest_node,
    nearest_points_on_network,
    shortest_path_distances,
    to_planar,
)

log = logging.getLogger("stgia.dataio")

DEFAULT_INTERVAL_S = 600.0
_SEED_TAG_DATA = 2


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: float  # seconds since epoch, UTC
    lat: float
    lon: float


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered on-network points of one user."""

    user_id: str
    times: np.ndarray  # (n,) seconds
    points: np.ndarray  # (n, 2) planar meters, each within 1e-6 m of the network

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64)
        points = np.array(self.points, dtype=np.float64)
        if times.ndim != 1 or points.shape != (times.shape[0], 2):
            raise InputError("trajectory needs times (n,) and points (n, 2)")
        if len(times) >= 2 and not np.all(np.diff(times) > 0):
            raise InputError(f"trajectory of {self.user_id} has non-increasing timestamps")
        times.setflags(write=False)
        points.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.times)


def _parse_iso(value: str) -> float:
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_checkins(path, proj: ProjectionSpec) -> list[CheckIn]:
    """Parse a check-in CSV, validating coordinates against the planar frame.

    Expects a header ``user_id,timestamp,lat,lon`` with ISO-8601 timestamps.
    Rows are returned sorted by (user_id, timestamp); malformed rows raise
    with their line number.
    """
    out: list[CheckIn] = []
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise InputError(f"check-in file not found: {path}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty check-in file")
        if [h.strip() for h in header] != ["user_id", "timestamp", "lat", "lon"]:
            raise InputError(f"{path}: expected header user_id,timestamp,lat,lon, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path} line {lineno}: expected 4 fields, got {len(row)}")
            user_id = row[0].strip()
            if not user_id:
                raise InputError(f"{path} line {lineno}: empty user_id")
            try:
                ts = _parse_iso(row[1])
                lat = float(row[2])
                lon = float(row[3])
            except (ValueError, OverflowError) as exc:
                raise InputError(f"{path} line {lineno}: {exc}") from exc
            try:
                to_planar(lat, lon, proj)  # range check plus planar-frame bound
            except InputError as exc:
                raise InputError(f"{path} line {lineno}: {exc}") from exc
            out.append(CheckIn(user_id, ts, lat, lon))
    if not out:
        raise InputError(f"{path}: no check-in rows")
    out.sort(key=lambda c: (c.user_id, c.timestamp))
    return out


def resample_trajectory(
    checkins: list[CheckIn],
    net: RoadNetwork,
    proj: ProjectionSpec,
    interval_s: float = DEFAULT_INTERVAL_S,
    min_segment_len: int = 5,
) -> list[Trajectory]:
    """Bin one user's check-ins to the interval and snap them to the network.

    Each bin keeps the check-in nearest its center (original timestamp
    preserved, so resampling is idempotent). Nothing is interpolated: a gap
    of two or more empty bins splits the trajectory, and only segments with
    at least ``min_segment_len`` points survive. Returns the surviving
    segments, oldest first; an empty list means the user was dropped.
    """
    if len(checkins) < 2:
        raise InputError("resampling needs at least two check-ins")
    users = {c.user_id for c in checkins}
    if len(users) != 1:
        raise InputError(f"resample_trajectory expects one user, got {sorted(users)}")
    user_id = checkins[0].user_id
    if not interval_s > 0:
        raise InputError("interval must be positive")

    ordered = sorted(checkins, key=lambda c: c.timestamp)
    kept: dict[int, CheckIn] = {}
    for c in ordered:
        b = int(c.timestamp // interval_s)
        center = (b + 0.5) * interval_s
        cur = kept.get(b)
        if cur is None or abs(c.timestamp - center) < abs(cur.timestamp - center):
            kept[b] = c

    bins = sorted(kept)
    segments: list[list[CheckIn]] = [[]]
    prev_bin = None
    for b in bins:
        if prev_bin is not None and b - prev_bin > 2:  # more than one empty bin
            segments.append([])
        segments[-1].append(kept[b])
        prev_bin = b

    out = []
    for seg in segments:
        if len(seg) < min_segment_len:
            continue
        raw = np.array(
            [to_planar(c.lat, c.lon, proj).as_array() for c in seg], dtype=np.float64
        )
        snapped = nearest_points_on_network(raw, net)
        times = np.array([c.timestamp for c in seg], dtype=np.float64)
        out.append(Trajectory(user_id, times, snapped))
    if not out:
        log.info(
            "user %s dropped: no resampled segment reached %d points", user_id, min_segment_len
        )
    return out


def synthesize_trajectories(
    net: RoadNetwork,
    n_users: int,
    length: int,
    seed: int,
    step_budget_m: float = 1000.0,
    interval_s: float = DEFAULT_INTERVAL_S,
) -> list[Trajectory]:
    """Random walks on the network, one emitted point per interval.

    Each step walks along uniformly random incident edges (crossing nodes as
    needed) for a uniform distance in [step_budget/2, step_budget), so
    consecutive points are at most step_budget apart in the path metric and
    always on the network. Deterministic per seed.
    """
    if n_users < 1 or length < 2:
        raise InputError("need n_users >= 1 and length >= 2")
    if not step_budget_m > 0:
        raise InputError("step_budget_m must be positive")
    if net.num_edges == 0:
        raise InputError("synthesis needs a network with edges")
    out = []
    for u in range(n_users):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _SEED_TAG_DATA, u]))
        start = int(rng.integers(0, net.num_nodes))
        while net.degree(start) == 0:
            start = int(rng.integers(0, net.num_nodes))
        # walk state: on the edge node_a -> node_b, offset meters past node_a
        node_a = start
        node_b, edge_len = net.neighbors(node_a)[int(rng.integers(0, net.degree(node_a)))]
        offset = 0.0
        times = np.arange(length, dtype=np.float64) * interval_s
        pts = np.zeros((length, 2))
        pts[0] = net.node_xy[node_a]
        for i in range(1, length):
            remaining = float(rng.uniform(0.5, 1.0)) * step_budget_m
            while remaining > 0:
                to_b = edge_len - offset
                if remaining < to_b:
                    offset += remaining
                    remaining = 0.0
                else:
                    remaining -= to_b
                    node_a = node_b
                    nbrs = net.neighbors(node_a)
                    node_b, edge_len = nbrs[int(rng.integers(0, len(nbrs)))]
                    offset = 0.0
            frac = offset / edge_len
            pts[i] = (1.0 - frac) * net.node_xy[node_a] + frac * net.node_xy[node_b]
        out.append(Trajectory(f"u{u:03d}", times, pts))
    return out


def constrained_domain_for(
    trajectory: Trajectory, net: RoadNetwork, radius_m: float
) -> ConstrainedDomain:
    """Nodes within path distance radius_m of any node the user visited.

    Visited nodes are the nearest nodes of the trajectory points and are
    always included, so the domain is never empty and grows with the radius.
    """
    if len(trajectory) == 0:
        raise InputError("trajectory is empty")
    if radius_m < 0:
        raise InputError("radius must be nonnegative")
    visited = {nearest_node(float(x), float(y), net) for x, y in trajectory.points}
    members = set(visited)
    if radius_m > 0:
        for src in sorted(visited):
            d = shortest_path_distances(net, src)
            members.update(int(i) for i in np.flatnonzero(d <= radius_m))
    return ConstrainedDomain(frozenset(members))


def dump_trajectories(trajectories: list[Trajectory], fh) -> None:
    """JSON-lines: {"user_id": ..., "points": [[t, x, y], ...]} per user."""
    for tr in trajectories:
        doc = {
            "user_id": tr.user_id,
            "points": [
                [float(t), float(x), float(y)]
                for t, (x, y) in zip(tr.times, tr.points)
            ],
        }
        fh.write(json.dumps(doc) + "\n")


def write_trajectories(trajectories: list[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_trajectories(trajectories, fh)


def read_trajectories(path) -> list[Trajectory]:
    out = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"trajectory file not found: {path}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                pts = np.array(doc["points"], dtype=np.float64)
                out.append(Trajectory(str(doc["user_id"]), pts[:, 0], pts[:, 1:3]))
            except (KeyError, ValueError, IndexError) as exc:
                raise InputError(f"{path} line {lineno}: {exc}") from exc
    return out

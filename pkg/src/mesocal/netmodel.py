"""Road network model: links, nodes, paths, zones, time-of-day schedule and the
sparse incidence matrices used by the flow estimator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

# saturation flow heuristic used when a link carries no explicit capacity
DEFAULT_SATURATION_VPH = 1800.0

EARTH_RADIUS_M = 6371000.0


class NetworkError(ValueError):
    """Malformed or inconsistent network input."""


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    is_junction: bool = False


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    length: float          # meters
    speed_limit: float     # m/s
    lanes: int = 1
    capacity_bound: float | None = None  # vehicles per TOD interval; None -> heuristic

    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


@dataclass(frozen=True)
class Path:
    id: str
    od_pair: tuple[int, int]   # (origin zone id, destination zone id)
    links: tuple[str, ...]

    def length(self, network: "Network") -> float:
        return sum(network.links[e].length for e in self.links)


@dataclass
class Zone:
    id: int
    member_links: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class TODInterval:
    index: int
    label: str
    start_hour: float
    end_hour: float

    @property
    def hours(self) -> float:
        return self.end_hour - self.start_hour

    @property
    def seconds(self) -> float:
        return self.hours * 3600.0

    @property
    def start_s(self) -> float:
        return self.start_hour * 3600.0

    @property
    def end_s(self) -> float:
        return self.end_hour * 3600.0

    def contains(self, t_seconds: float) -> bool:
        return self.start_s <= t_seconds < self.end_s


@dataclass(frozen=True)
class TODSchedule:
    """Ordered intervals partitioning [0, 24) hours.

    The first interval is the simulation warm-up stage and the last the
    cool-down stage; evaluation uses the main intervals in between.
    """

    intervals: tuple[TODInterval, ...]

    def __post_init__(self):
        ivs = self.intervals
        if len(ivs) < 3:
            raise ValueError("schedule needs at least warm-up, one main, cool-down")
        if abs(ivs[0].start_hour) > 1e-12 or abs(ivs[-1].end_hour - 24.0) > 1e-12:
            raise ValueError("intervals must cover [0, 24)")
        for a, b in zip(ivs, ivs[1:]):
            if abs(a.end_hour - b.start_hour) > 1e-12:
                raise ValueError(f"gap or overlap between intervals {a.index} and {b.index}")
            if a.start_hour >= a.end_hour:
                raise ValueError(f"interval {a.index} has non-positive length")
        if ivs[-1].start_hour >= ivs[-1].end_hour:
            raise ValueError(f"interval {ivs[-1].index} has non-positive length")

    def index_of(self, t_seconds: float) -> int:
        """Interval index containing an in-day time in seconds since midnight."""
        h = (t_seconds / 3600.0) % 24.0
        for iv in self.intervals:
            if iv.start_hour <= h < iv.end_hour:
                return iv.index
        return self.intervals[-1].index  # h == 24 edge after fp round-off

    def by_index(self, index: int) -> TODInterval:
        for iv in self.intervals:
            if iv.index == index:
                return iv
        raise KeyError(index)

    @property
    def warmup(self) -> TODInterval:
        return self.intervals[0]

    @property
    def cooldown(self) -> TODInterval:
        return self.intervals[-1]

    @property
    def main_intervals(self) -> tuple[TODInterval, ...]:
        return self.intervals[1:-1]


def default_schedule() -> TODSchedule:
    """Six-interval weekday schedule (AM early .. Night)."""
    rows = [
        (1, "AM early", 0, 7),
        (2, "AM peak", 7, 10),
        (3, "Midday", 10, 15),
        (4, "PM peak", 15, 19),
        (5, "PM late", 19, 22),
        (6, "Night", 22, 24),
    ]
    return TODSchedule(tuple(TODInterval(i, lbl, s, e) for i, lbl, s, e in rows))


class Network:
    """Immutable directed road graph with stable link ordering."""

    def __init__(self, nodes: dict[str, Node], links: dict[str, Link]):
        self.nodes = dict(nodes)
        self.links = dict(links)
        self.link_order: tuple[str, ...] = tuple(self.links.keys())
        self.link_index: dict[str, int] = {lid: i for i, lid in enumerate(self.link_order)}
        self._out: dict[str, list[str]] = {}
        for lid, link in self.links.items():
            self._out.setdefault(link.from_node, []).append(lid)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def links_from(self, node_id: str) -> list[str]:
        return self._out.get(node_id, [])

    def link_lengths(self) -> np.ndarray:
        return np.array([self.links[lid].length for lid in self.link_order])

    def capacity_for(self, link_id: str, interval: TODInterval) -> float:
        """Capacity bound in vehicles for one TOD interval."""
        link = self.links[link_id]
        if link.capacity_bound is not None:
            return link.capacity_bound
        return link.lanes * DEFAULT_SATURATION_VPH * interval.hours

    def with_speed_limits(self, new_limits: dict[str, float]) -> "Network":
        links = {}
        for lid, link in self.links.items():
            if lid in new_limits:
                links[lid] = Link(link.id, link.from_node, link.to_node, link.length,
                                  new_limits[lid], link.lanes, link.capacity_bound)
            else:
                links[lid] = link
        return Network(self.nodes, links)


def project_equirectangular(lat: float, lon: float, lat0: float, lon0: float) -> tuple[float, float]:
    """Local planar projection, adequate at city scale."""
    x = EARTH_RADIUS_M * math.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return x, y


def _parse_float(value: str, what: str, line_no: int, file: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise NetworkError(f"{file}:{line_no}: bad {what} {value!r}") from None


def load_network(links_path, nodes_path) -> Network:
    """Load a network from a (links.csv, nodes.csv) pair.

    Node coordinates may be planar (x, y columns) or geographic (lat, lon),
    which get projected on ingest. Raises NetworkError with the offending
    line number on malformed records, dangling node references, non-positive
    lengths or speeds, and self-loop links.
    """
    nodes: dict[str, Node] = {}
    rows = []
    with open(nodes_path, newline="") as f:
        reader = csv.DictReader(f)
        fields = set(reader.fieldnames or [])
        geographic = "lat" in fields and "lon" in fields
        if not geographic and not {"x", "y"} <= fields:
            raise NetworkError(f"{nodes_path}: need x,y or lat,lon columns")
        for line_no, row in enumerate(reader, start=2):
            rows.append((line_no, row))
    if geographic:
        lat0 = float(np.mean([float(r["lat"]) for _, r in rows])) if rows else 0.0
        lon0 = float(np.mean([float(r["lon"]) for _, r in rows])) if rows else 0.0
    for line_no, row in rows:
        nid = row["id"].strip()
        if not nid:
            raise NetworkError(f"{nodes_path}:{line_no}: empty node id")
        if nid in nodes:
            raise NetworkError(f"{nodes_path}:{line_no}: duplicate node id {nid!r}")
        if geographic:
            x, y = project_equirectangular(
                _parse_float(row["lat"], "lat", line_no, str(nodes_path)),
                _parse_float(row["lon"], "lon", line_no, str(nodes_path)),
                lat0, lon0)
        else:
            x = _parse_float(row["x"], "x", line_no, str(nodes_path))
            y = _parse_float(row["y"], "y", line_no, str(nodes_path))
        is_j = str(row.get("is_junction", "")).strip().lower() in ("1", "true", "yes")
        nodes[nid] = Node(nid, x, y, is_j)

    links: dict[str, Link] = {}
    with open(links_path, newline="") as f:
        reader = csv.DictReader(f)
        for line_no, row in enumerate(reader, start=2):
            lid = row["link_id"].strip()
            if not lid:
                raise NetworkError(f"{links_path}:{line_no}: empty link id")
            if lid in links:
                raise NetworkError(f"{links_path}:{line_no}: duplicate link id {lid!r}")
            frm, to = row["from"].strip(), row["to"].strip()
            for n in (frm, to):
                if n not in nodes:
                    raise NetworkError(f"{links_path}:{line_no}: link {lid!r} references missing node {n!r}")
            if frm == to:
                raise NetworkError(f"{links_path}:{line_no}: self-loop link {lid!r}")
            length = _parse_float(row["length_m"], "length", line_no, str(links_path))
            speed = _parse_float(row["speed_mps"], "speed", line_no, str(links_path))
            if length <= 0:
                raise NetworkError(f"{links_path}:{line_no}: non-positive length on {lid!r}")
            if speed <= 0:
                raise NetworkError(f"{links_path}:{line_no}: non-positive speed on {lid!r}")
            lanes = int(row.get("lanes") or 1)
            if lanes < 1:
                raise NetworkError(f"{links_path}:{line_no}: lanes < 1 on {lid!r}")
            cap_raw = (row.get("capacity") or "").strip()
            cap = None
            if cap_raw:
                cap = _parse_float(cap_raw, "capacity", line_no, str(links_path))
                if cap < 0:
                    raise NetworkError(f"{links_path}:{line_no}: negative capacity on {lid!r}")
            links[lid] = Link(lid, frm, to, length, speed, lanes, cap)

    net = Network(nodes, links)
    logger.info("loaded network: %d nodes, %d links", net.n_nodes, net.n_links)
    return net


def save_network(network: Network, links_path, nodes_path) -> None:
    with open(nodes_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y", "is_junction"])
        for nid, n in network.nodes.items():
            w.writerow([nid, repr(float(n.x)), repr(float(n.y)), int(n.is_junction)])
    with open(links_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["link_id", "from", "to", "length_m", "speed_mps", "lanes", "capacity"])
        for lid in network.link_order:
            l = network.links[lid]
            cap = "" if l.capacity_bound is None else repr(float(l.capacity_bound))
            w.writerow([lid, l.from_node, l.to_node, repr(float(l.length)),
                        repr(float(l.speed_limit)), l.lanes, cap])


def validate_path(network: Network, links) -> bool:
    """True iff all link ids exist and consecutive links share a node."""
    links = list(links)
    if not links:
        return False
    for lid in links:
        if lid not in network.links:
            return False
    for a, b in zip(links, links[1:]):
        if network.links[a].to_node != network.links[b].from_node:
            return False
    return True


def load_zone_assignment(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[row["link_id"].strip()] = int(row["zone_id"])
    return out


def save_zone_assignment(assignment: dict[str, int], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["link_id", "zone_id"])
        for lid in sorted(assignment):
            w.writerow([lid, assignment[lid]])


@dataclass(frozen=True)
class IncidenceSet:
    """Sparse incidence structures tying OD flow, path flow and link flow.

    phi: (n_od x n_paths) 0/1, one nonzero per column (each path belongs to
         exactly one OD pair).
    omega: (n_links x n_paths) 0/1 link membership.
    psi_len: (n_paths x n_links) with link lengths on the support of omega,
         used for length-weighted path overlap.
    """

    phi: sp.csr_matrix
    omega: sp.csr_matrix
    psi_len: sp.csr_matrix
    od_pairs: tuple[tuple[int, int], ...]
    path_ids: tuple[str, ...]
    link_ids: tuple[str, ...]

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    @property
    def n_paths(self) -> int:
        return len(self.path_ids)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    def od_index(self, od: tuple[int, int]) -> int:
        return self.od_pairs.index(od)


def build_incidence(network: Network, paths: list[Path], zones: list[Zone]) -> IncidenceSet:
    """Assemble OD-path, link-path and link-length incidence matrices.

    Raises NetworkError if a path references an unknown zone or link, or
    fails adjacency validation.
    """
    zone_ids = {z.id for z in zones}
    for p in paths:
        o, d = p.od_pair
        if o not in zone_ids:
            raise NetworkError(f"path {p.id}: unknown origin zone {o!r}")
        if d not in zone_ids:
            raise NetworkError(f"path {p.id}: unknown destination zone {d!r}")
        if not validate_path(network, p.links):
            raise NetworkError(f"path {p.id}: invalid link sequence")

    od_pairs: list[tuple[int, int]] = []
    od_idx: dict[tuple[int, int], int] = {}
    for p in paths:
        if p.od_pair not in od_idx:
            od_idx[p.od_pair] = len(od_pairs)
            od_pairs.append(p.od_pair)

    n, m, e = len(od_pairs), len(paths), network.n_links
    phi = sp.lil_matrix((n, m))
    omega = sp.lil_matrix((e, m))
    psi = sp.lil_matrix((m, e))
    for j, p in enumerate(paths):
        phi[od_idx[p.od_pair], j] = 1.0
        for lid in p.links:
            i = network.link_index[lid]
            omega[i, j] = 1.0
            psi[j, i] = network.links[lid].length
    return IncidenceSet(
        phi=phi.tocsr(), omega=omega.tocsr(), psi_len=psi.tocsr(),
        od_pairs=tuple(od_pairs),
        path_ids=tuple(p.id for p in paths),
        link_ids=network.link_order,
    )

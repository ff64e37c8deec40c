"""Bundled synthetic scenario: a grid city with planted blob demand, known
supply parameters and a systematic low-penetration trajectory sample, so the
whole pipeline can run and be checked without external data."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .ingest import TrajectoryRecord, write_trajectories
from .mesosim import SimParams, SimTrip, run_simulation
from .netmodel import Link, Network, Node, TODSchedule, default_schedule, save_network

logger = logging.getLogger(__name__)


def make_grid_network(n: int = 8, spacing_m: float = 400.0, speed_mps: float = 13.9,
                      lanes: int = 1, capacity_per_tod: float | None = None) -> Network:
    """Directed n x n grid: bidirectional links between orthogonal neighbors,
    2*2*n*(n-1) links in total. Nodes with three or more neighbors are
    junctions."""
    nodes: dict[str, Node] = {}
    neighbor_count: dict[str, int] = {}
    for r in range(n):
        for c in range(n):
            nid = f"n{r}_{c}"
            deg = sum(1 for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0))
                      if 0 <= r + dr < n and 0 <= c + dc < n)
            neighbor_count[nid] = deg
            nodes[nid] = Node(nid, c * spacing_m, -r * spacing_m, deg >= 3)
    links: dict[str, Link] = {}
    for r in range(n):
        for c in range(n):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= n or c2 >= n:
                    continue
                a, b = f"n{r}_{c}", f"n{r2}_{c2}"
                for frm, to in ((a, b), (b, a)):
                    lid = f"{frm}>{to}"
                    links[lid] = Link(lid, frm, to, spacing_m, speed_mps, lanes,
                                      capacity_per_tod)
    return Network(nodes, links)


def grid_route(n: int, start: tuple[int, int], end: tuple[int, int],
               row_first: bool = True) -> tuple[str, ...]:
    """L-shaped route between grid nodes as a link-id sequence."""
    (r0, c0), (r1, c1) = start, end

    def step(r, c, r2, c2):
        return f"n{r}_{c}>n{r2}_{c2}"

    links = []
    r, c = r0, c0
    legs = (("col", "row") if not row_first else ("row", "col"))
    for leg in legs:
        if leg == "row":
            while c != c1:
                c2 = c + (1 if c1 > c else -1)
                links.append(step(r, c, r, c2))
                c = c2
        else:
            while r != r1:
                r2 = r + (1 if r1 > r else -1)
                links.append(step(r, c, r2, c))
                r = r2
    return tuple(links)


@dataclass
class PlantedPath:
    name: str
    od_name: tuple[str, str]
    links: tuple[str, ...]
    share: float


@dataclass
class ScenarioSpec:
    grid_n: int = 8
    spacing_m: float = 400.0
    speed_mps: float = 13.9
    lanes: int = 1
    capacity_per_tod: float = 240.0
    day_total: int = 5200
    tod_shares: dict[int, float] = field(default_factory=lambda: {
        1: 0.06, 2: 0.27, 3: 0.21, 4: 0.28, 5: 0.14, 6: 0.04})
    diag_weight: float = 4.0      # demand weight of corner-to-corner OD pairs
    side_weight: float = 1.0
    diag_split: tuple[float, float] = (0.65, 0.35)
    theta_star: SimParams = field(default_factory=lambda: SimParams(
        capacity_scale=1.0, junction_delay=4.0, min_headway=2.0,
        speed_factor_mean=1.0, speed_factor_std=0.05, departure_jitter=0.0))
    penetration: float = 0.075
    n_days: int = 3
    endpoint_sigma_m: float = 120.0
    seed: int = 20220308


def _blob_anchors(n: int) -> dict[str, tuple[int, int]]:
    lo, hi = max(1, n // 8), n - 1 - max(1, n // 8)
    return {"NW": (lo, lo), "NE": (lo, hi), "SW": (hi, lo), "SE": (hi, hi)}


def planted_paths(spec: ScenarioSpec) -> list[PlantedPath]:
    anchors = _blob_anchors(spec.grid_n)
    diagonals = [("NW", "SE"), ("SE", "NW"), ("NE", "SW"), ("SW", "NE")]
    sides = [("NW", "NE"), ("NE", "NW"), ("SW", "SE"), ("SE", "SW"),
             ("NW", "SW"), ("SW", "NW"), ("NE", "SE"), ("SE", "NE")]
    out: list[PlantedPath] = []
    for o, d in diagonals:
        s1, s2 = spec.diag_split
        out.append(PlantedPath(f"{o}-{d}/row", (o, d),
                               grid_route(spec.grid_n, anchors[o], anchors[d], row_first=True), s1))
        out.append(PlantedPath(f"{o}-{d}/col", (o, d),
                               grid_route(spec.grid_n, anchors[o], anchors[d], row_first=False), s2))
    for o, d in sides:
        out.append(PlantedPath(f"{o}-{d}", (o, d),
                               grid_route(spec.grid_n, anchors[o], anchors[d], row_first=True), 1.0))
    return out


def od_weights(spec: ScenarioSpec) -> dict[tuple[str, str], float]:
    anchors = _blob_anchors(spec.grid_n)
    weights = {}
    for o in anchors:
        for d in anchors:
            if o == d:
                continue
            diagonal = o[0] != d[0] and o[1] != d[1]
            weights[(o, d)] = spec.diag_weight if diagonal else spec.side_weight
    total = sum(weights.values())
    return {od: w / total for od, w in weights.items()}


def build_trip_table(spec: ScenarioSpec, schedule: TODSchedule,
                     rng: np.random.Generator) -> tuple[list[SimTrip], dict[int, int], dict[str, PlantedPath]]:
    """One day's ground-truth trips: integer counts per (path, TOD) with
    departures spread uniformly over each interval. Returns the trips, the
    realized per-TOD totals and the planted path index."""
    paths = planted_paths(spec)
    weights = od_weights(spec)
    by_name = {p.name: p for p in paths}
    trips: list[SimTrip] = []
    totals: dict[int, int] = {}
    for iv in schedule.intervals:
        tod_total = spec.day_total * spec.tod_shares.get(iv.index, 0.0)
        count_tod = 0
        for p in paths:
            want = tod_total * weights[p.od_name] * p.share
            count = int(round(want))
            if count <= 0:
                continue
            departures = iv.start_s + np.sort(rng.random(count)) * iv.seconds
            for j, dep in enumerate(departures):
                trips.append(SimTrip(
                    trip_id=f"t{iv.index}_{p.name}_{j}",
                    path_id=p.name, links=p.links,
                    departure_time=float(dep),
                ))
            count_tod += count
        totals[iv.index] = count_tod
    trips.sort(key=lambda t: (t.departure_time, t.trip_id))
    return trips, totals, by_name


def systematic_sample(n: int, rate: float) -> list[int]:
    """Deterministic thinning: index i is selected when the running quota
    round((i+1)*rate) advances, giving round(n*rate) +- 1 picks."""
    def quota(k: int) -> int:
        return int(k * rate + 0.5)
    return [i for i in range(n) if quota(i + 1) > quota(i)]


def _outcome_records(outcomes, network: Network, day: str,
                     rng: np.random.Generator, sigma: float) -> list[TrajectoryRecord]:
    records = []
    for out in outcomes:
        if not out.completed or not out.link_entries:
            continue
        first = network.links[out.link_entries[0][0]]
        last = network.links[out.link_entries[-1][0]]
        o_node = network.nodes[first.from_node]
        d_node = network.nodes[last.to_node]
        jo = rng.normal(0.0, sigma, 2)
        jd = rng.normal(0.0, sigma, 2)
        links = tuple(lid for lid, _ in out.link_entries)
        times = tuple(t for _, t in out.link_entries)
        records.append(TrajectoryRecord(
            trip_id=f"{day}:{out.trip_id}", day=day,
            links=links, entry_times=times, arrival_time=out.arrival,
            origin=(o_node.x + jo[0], o_node.y + jo[1]),
            destination=(d_node.x + jd[0], d_node.y + jd[1]),
            distance=sum(network.links[l].length for l in links),
            travel_time=out.arrival - out.link_entries[0][1],
        ))
    return records


@dataclass
class ScenarioArtifacts:
    network: Network
    schedule: TODSchedule
    records: list[TrajectoryRecord]
    truth: dict


def generate(spec: ScenarioSpec, schedule: TODSchedule | None = None) -> ScenarioArtifacts:
    """Build the network, simulate the planted demand at theta_star for each
    day, and keep a systematic trajectory sample at the penetration rate."""
    schedule = schedule or default_schedule()
    network = make_grid_network(spec.grid_n, spec.spacing_m, spec.speed_mps,
                                spec.lanes, spec.capacity_per_tod)
    rng = np.random.default_rng(spec.seed)
    trips, totals, _ = build_trip_table(spec, schedule, rng)

    all_records: list[TrajectoryRecord] = []
    completion = []
    for d in range(spec.n_days):
        day = f"2022-03-{7 + d:02d}"
        result = run_simulation(network, trips, spec.theta_star, schedule,
                                seed=spec.seed + 1000 + d, record_links=True)
        completion.append(result.loaded_fraction)
        # systematic thinning stratified by interval keeps the per-TOD
        # sampled share at the penetration rate exactly
        sampled = []
        for iv in schedule.intervals:
            group = sorted((o for o in result.trips if o.tod == iv.index),
                           key=lambda o: (o.departure, o.trip_id))
            picks = set(systematic_sample(len(group), spec.penetration))
            sampled.extend(o for i, o in enumerate(group) if i in picks)
        sampled.sort(key=lambda o: (o.departure, o.trip_id))
        all_records.extend(_outcome_records(sampled, network, day, rng, spec.endpoint_sigma_m))
        logger.info("scenario day %s: %d trips, %.1f%% completed, %d sampled",
                    day, len(trips), 100 * result.loaded_fraction, len(sampled))

    truth = {
        "planted_totals_by_tod": {str(k): v for k, v in totals.items()},
        "day_total": sum(totals.values()),
        "theta_star": list(spec.theta_star.to_vector()),
        "penetration": spec.penetration,
        "n_days": spec.n_days,
        "seed": spec.seed,
        "ground_truth_completion": completion,
        "n_sampled_trips": len(all_records),
    }
    return ScenarioArtifacts(network, schedule, all_records, truth)


def measured_anchor_links(spec: ScenarioSpec) -> list[str]:
    """First and last links of the planted paths: a spread of prior
    locations whose flows pin every route's magnitude."""
    links: list[str] = []
    for p in planted_paths(spec):
        for lid in (p.links[0], p.links[-1]):
            if lid not in links:
                links.append(lid)
    return links


def write_scenario(spec: ScenarioSpec, out_dir, config_text: str | None = None) -> dict:
    """Generate and persist the scenario under out_dir. Returns the truth
    metadata dictionary."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = generate(spec)
    save_network(art.network, out / "links.csv", out / "nodes.csv")
    write_trajectories(out / "trajectories.csv", art.records)
    with open(out / "scenario.json", "w") as f:
        json.dump(art.truth, f, indent=2, sort_keys=True)
    if config_text is not None:
        anchors = ", ".join(measured_anchor_links(spec))
        config_text = config_text.replace("measured_links = top:12",
                                          f"measured_links = {anchors}")
        config_text = config_text.replace("penetration_rate = 0.075",
                                          f"penetration_rate = {spec.penetration}")
        with open(out / "config.ini", "w") as f:
            f.write(config_text)
    return art.truth

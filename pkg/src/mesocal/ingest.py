"""Trajectory ingestion: load map-matched trips, filter abnormal ones,
re-estimate speed limits from observed traversals, label time-of-day, and
invert the sampling penetration rate into full-scale trip totals."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Network, TODSchedule

logger = logging.getLogger(__name__)

MPS_PER_MPH = 0.44704

MIN_SPEED_MPH = 5.0
MAX_SPEED_MPH = 100.0


@dataclass
class TrajectoryRecord:
    """One map-matched trip.

    entry_times[i] is the time the vehicle entered links[i]; arrival_time is
    the time it reached the end of the last link (seconds since midnight).
    """

    trip_id: str
    day: str
    links: tuple[str, ...]
    entry_times: tuple[float, ...]
    arrival_time: float | None
    origin: tuple[float, float]
    destination: tuple[float, float]
    distance: float
    travel_time: float
    tod: int | None = None
    rep_path: str | None = None   # representative path label, set after clustering

    @property
    def departure(self) -> float:
        return self.entry_times[0]

    def mean_speed_mph(self) -> float:
        return self.distance / self.travel_time / MPS_PER_MPH


@dataclass(frozen=True)
class PenetrationEstimate:
    rate: float
    by_tod: dict[int, float] | None = None

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"penetration rate must be in (0, 1], got {self.rate}")

    def rate_for(self, tod: int) -> float:
        if self.by_tod and tod in self.by_tod:
            return self.by_tod[tod]
        return self.rate


@dataclass(frozen=True)
class TotalTripsPrior:
    """Full-scale trip total per TOD interval."""

    by_tod: dict[int, float]

    def __post_init__(self):
        for tod, v in self.by_tod.items():
            if v < 0:
                raise ValueError(f"negative trip total for interval {tod}")


def load_trajectories(path, network: Network) -> tuple[list[TrajectoryRecord], list[tuple[str, str]]]:
    """Read a trajectory CSV grouped by trip_id.

    Rows carry one link entry each; a final row repeating the previous
    link id marks the arrival time at the trip end. Trips with
    non-monotone timestamps or unknown link ids are rejected and returned
    as (trip_id, reason) pairs alongside the kept records.
    """
    groups: dict[str, list[dict]] = {}
    order: list[str] = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            tid = row["trip_id"].strip()
            if tid not in groups:
                groups[tid] = []
                order.append(tid)
            groups[tid].append(row)

    records: list[TrajectoryRecord] = []
    rejected: list[tuple[str, str]] = []
    for tid in order:
        rows = groups[tid]
        times = [float(r["entry_time_s"]) for r in rows]
        link_ids = [r["link_id"].strip() for r in rows]
        if any(b <= a for a, b in zip(times, times[1:])):
            rejected.append((tid, "non_monotone_timestamps"))
            continue
        unknown = [lid for lid in link_ids if lid not in network.links]
        if unknown:
            rejected.append((tid, f"unknown_link:{unknown[0]}"))
            continue
        arrival = None
        if len(rows) >= 2 and link_ids[-1] == link_ids[-2]:
            arrival = times[-1]
            link_ids = link_ids[:-1]
            times = times[:-1]
        distance = sum(network.links[lid].length for lid in link_ids)
        travel_time = (arrival if arrival is not None else times[-1]) - times[0]
        if travel_time <= 0:
            rejected.append((tid, "non_positive_travel_time"))
            continue
        first, last = rows[0], rows[-1]
        records.append(TrajectoryRecord(
            trip_id=tid,
            day=first.get("day", "").strip(),
            links=tuple(link_ids),
            entry_times=tuple(times),
            arrival_time=arrival,
            origin=(float(first["origin_x"]), float(first["origin_y"])),
            destination=(float(last["dest_x"]), float(last["dest_y"])),
            distance=distance,
            travel_time=travel_time,
        ))
    if rejected:
        logger.info("rejected %d of %d trips at load", len(rejected), len(order))
    return records, rejected


def write_trajectories(path, records: list[TrajectoryRecord]) -> None:
    """Inverse of load_trajectories, including the arrival marker row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trip_id", "day", "link_id", "entry_time_s",
                    "origin_x", "origin_y", "dest_x", "dest_y"])
        for rec in records:
            ox, oy = (repr(float(v)) for v in rec.origin)
            dx, dy = (repr(float(v)) for v in rec.destination)
            for lid, t in zip(rec.links, rec.entry_times):
                w.writerow([rec.trip_id, rec.day, lid, repr(float(t)), ox, oy, dx, dy])
            if rec.arrival_time is not None:
                w.writerow([rec.trip_id, rec.day, rec.links[-1],
                            repr(float(rec.arrival_time)), ox, oy, dx, dy])


def filter_abnormal(records: list[TrajectoryRecord],
                    min_mph: float = MIN_SPEED_MPH,
                    max_mph: float = MAX_SPEED_MPH) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord]]:
    """Split records into (kept, removed) by mean trip speed, bounds inclusive."""
    kept, removed = [], []
    for rec in records:
        if min_mph <= rec.mean_speed_mph() <= max_mph:
            kept.append(rec)
        else:
            removed.append(rec)
    return kept, removed


def removal_reason(rec: TrajectoryRecord,
                   min_mph: float = MIN_SPEED_MPH,
                   max_mph: float = MAX_SPEED_MPH) -> str:
    mph = rec.mean_speed_mph()
    if mph < min_mph:
        return f"too_slow:{mph:.2f}mph"
    if mph > max_mph:
        return f"too_fast:{mph:.2f}mph"
    return "kept"


def link_speed_observations(records: list[TrajectoryRecord], network: Network) -> dict[str, list[float]]:
    """Per-traversal average speed samples (m/s) keyed by link id.

    The time on a link is the gap to the next link entry, or to the arrival
    marker for the trip's final link; final links of marker-less records
    contribute no sample.
    """
    obs: dict[str, list[float]] = {}
    for rec in records:
        bounds = list(rec.entry_times) + ([rec.arrival_time] if rec.arrival_time is not None else [])
        for i, lid in enumerate(rec.links):
            if i + 1 >= len(bounds):
                break
            dt = bounds[i + 1] - bounds[i]
            if dt <= 0:
                continue
            obs.setdefault(lid, []).append(network.links[lid].length / dt)
    return obs


def estimate_speed_limits(records: list[TrajectoryRecord], network: Network,
                          percentile: float = 0.80, min_obs: int = 10) -> Network:
    """Replace each link's speed limit with the given percentile of its
    observed traversal speeds; links with fewer than min_obs samples keep
    the mapped limit. Percentile uses linear interpolation."""
    if not 0.0 < percentile < 1.0:
        raise ValueError("percentile must be in (0, 1)")
    obs = link_speed_observations(records, network)
    updates = {}
    for lid, speeds in obs.items():
        if len(speeds) >= min_obs:
            updates[lid] = float(np.percentile(speeds, percentile * 100.0))
    logger.info("re-estimated speed limits on %d of %d links", len(updates), network.n_links)
    return network.with_speed_limits(updates)


def assign_tod(record: TrajectoryRecord, schedule: TODSchedule) -> int:
    """Index of the interval containing the trip departure."""
    return schedule.index_of(record.departure)


def assign_tods(records: list[TrajectoryRecord], schedule: TODSchedule) -> None:
    for rec in records:
        rec.tod = assign_tod(rec, schedule)


def estimate_total_trips(observed_count: int, penetration: PenetrationEstimate) -> float:
    """Full-scale trip count implied by an observed count at the given rate."""
    return observed_count / penetration.rate


def totals_by_tod(records: list[TrajectoryRecord], schedule: TODSchedule,
                  penetration: PenetrationEstimate, n_days: int = 1) -> TotalTripsPrior:
    """Per-TOD full-scale totals from TOD-labeled records, averaged over days."""
    counts: dict[int, int] = {iv.index: 0 for iv in schedule.intervals}
    for rec in records:
        tod = rec.tod if rec.tod is not None else assign_tod(rec, schedule)
        counts[tod] += 1
    return TotalTripsPrior({
        tod: estimate_total_trips(c, penetration) / max(n_days, 1)
        for tod, c in counts.items()
    })


def estimate_link_priors(records: list[TrajectoryRecord], measured_links: list[str],
                         schedule: TODSchedule, penetration: PenetrationEstimate,
                         n_days: int = 1) -> dict[int, dict[str, float]]:
    """Full-scale link flow priors on the measured subset, per TOD.

    A traversal is attributed to the interval containing its link entry
    time; counts are scaled by the inverse penetration rate and averaged
    over days.
    """
    measured = set(measured_links)
    counts: dict[int, dict[str, float]] = {iv.index: {lid: 0.0 for lid in measured_links}
                                           for iv in schedule.intervals}
    for rec in records:
        for lid, t in zip(rec.links, rec.entry_times):
            if lid in measured:
                counts[schedule.index_of(t)][lid] += 1.0
    days = max(n_days, 1)
    return {
        tod: {lid: c / penetration.rate_for(tod) / days for lid, c in per.items()}
        for tod, per in counts.items()
    }


def top_traversed_links(records: list[TrajectoryRecord], k: int) -> list[str]:
    """The k most-traversed link ids in the observed sample (stable order)."""
    counts: dict[str, int] = {}
    for rec in records:
        for lid in rec.links:
            counts[lid] = counts.get(lid, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [lid for lid, _ in ranked[:k]]

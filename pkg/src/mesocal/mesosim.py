"""Desk-scale mesoscopic traffic simulator.

Vehicles traverse each link at free-flow speed scaled by a per-vehicle
factor, then wait in the link's FIFO exit queue. The queue is served at a
uniform interval per TOD: max(min_headway, interval_seconds / (capacity_scale
* capacity_bound)), with a hard cap on exits per interval. Crossing a
junction node adds a fixed delay. Everything is event-driven with continuous
time and deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import heapq
import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .netmodel import Network, TODSchedule

logger = logging.getLogger(__name__)

DAY_S = 86400.0
DEFAULT_HORIZON_S = DAY_S + 2 * 3600.0   # full day plus drain time

THETA_FIELDS = ("capacity_scale", "junction_delay", "min_headway",
                "speed_factor_mean", "speed_factor_std", "departure_jitter")


@dataclass(frozen=True)
class ThetaBox:
    """Componentwise feasible box for the calibrated parameters."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("invalid parameter box")

    def clip(self, vec: np.ndarray) -> np.ndarray:
        return np.clip(vec, self.lo, self.hi)

    def contains(self, vec: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(vec >= self.lo - tol) and np.all(vec <= self.hi + tol))

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo


def default_theta_box() -> ThetaBox:
    lo = np.array([0.5, 0.0, 1.0, 0.8, 0.0, 0.0])
    hi = np.array([2.0, 10.0, 4.0, 1.2, 0.2, 300.0])
    return ThetaBox(lo, hi)


@dataclass
class SimParams:
    capacity_scale: float = 1.0
    junction_delay: float = 0.0      # seconds per junction node crossing
    min_headway: float = 2.0         # seconds between consecutive link exits
    speed_factor_mean: float = 1.0
    speed_factor_std: float = 0.0
    departure_jitter: float = 0.0    # uniform [0, jitter) offset on departures
    reroute_period: float = 0.0      # 0 disables rerouting
    reroute_prob: float = 0.0

    def __post_init__(self):
        if self.capacity_scale <= 0:
            raise ValueError("capacity_scale must be > 0")
        if self.min_headway <= 0:
            raise ValueError("min_headway must be > 0")
        if self.speed_factor_mean <= 0:
            raise ValueError("speed_factor_mean must be > 0")
        if self.junction_delay < 0 or self.speed_factor_std < 0 or self.departure_jitter < 0:
            raise ValueError("negative parameter")
        if not 0.0 <= self.reroute_prob <= 1.0:
            raise ValueError("reroute_prob must be in [0, 1]")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in THETA_FIELDS])

    @classmethod
    def from_vector(cls, vec: np.ndarray, template: "SimParams | None" = None) -> "SimParams":
        base = template or cls()
        kwargs = {f: float(v) for f, v in zip(THETA_FIELDS, vec)}
        kwargs["reroute_period"] = base.reroute_period
        kwargs["reroute_prob"] = base.reroute_prob
        return cls(**kwargs)

    def validate_box(self, box: ThetaBox) -> None:
        if not box.contains(self.to_vector()):
            raise ValueError("parameters outside the feasible box")


@dataclass(frozen=True)
class SimTrip:
    trip_id: str
    path_id: str
    links: tuple[str, ...]
    departure_time: float


@dataclass
class TripOutcome:
    trip_id: str
    path_id: str
    departure: float          # scheduled
    depart_actual: float      # scheduled plus jitter
    arrival: float | None
    travel_time: float | None
    completed: bool
    tod: int
    link_entries: tuple[tuple[str, float], ...] = ()


@dataclass
class SimResult:
    trips: list[TripOutcome]
    requested: int
    completed_count: int
    loaded_fraction: float
    link_entered: dict[str, int]
    link_exited: dict[str, int]
    link_on_road_end: dict[str, int]
    link_tod_counts: dict[tuple[str, int], int]
    link_tod_speed_sums: dict[tuple[str, int], tuple[float, int]]
    rejected_trips: list[tuple[str, str]]
    params: SimParams
    seed: int
    # populated only when record_links is set
    link_entry_log: dict[str, list[str]] = field(default_factory=dict)
    link_exit_log: dict[str, list[str]] = field(default_factory=dict)

    def mean_speed(self, link_id: str, tod: int) -> float | None:
        acc = self.link_tod_speed_sums.get((link_id, tod))
        if not acc or acc[1] == 0:
            return None
        return acc[0] / acc[1]


class _LinkState:
    __slots__ = ("queue", "next_free", "entered", "exited", "service_cache")

    def __init__(self):
        self.queue: deque = deque()
        self.next_free = -np.inf
        self.entered = 0
        self.exited = 0
        self.service_cache: dict[int, float] = {}


def _draw_speed_factors(rng: np.random.Generator, n: int, mean: float, std: float) -> np.ndarray:
    """Truncated-normal factors: standard normals rejected outside two sigma,
    scaled, floored at 0.1. Draw count depends only on the seed."""
    s = np.zeros(n)
    pending = np.arange(n)
    while pending.size:
        draw = rng.standard_normal(pending.size)
        ok = np.abs(draw) <= 2.0
        s[pending[ok]] = draw[ok]
        pending = pending[~ok]
    return np.maximum(0.1, mean + std * s)


def run_simulation(network: Network, trips: list[SimTrip], params: SimParams,
                   schedule: TODSchedule, seed: int = 0, *,
                   horizon_s: float = DEFAULT_HORIZON_S,
                   od_paths: dict[str, tuple[tuple[int, int], tuple[str, ...]]] | None = None,
                   record_links: bool = False) -> SimResult:
    """Run the queueing model over a trip table.

    od_paths maps path_id -> (od pair, link sequence) and is only needed when
    rerouting is enabled. Trips whose path fails validation are rejected and
    counted; vehicles still en route (or yet to start) at the horizon are
    marked incomplete.
    """
    from .netmodel import validate_path

    order = sorted(range(len(trips)), key=lambda i: (trips[i].departure_time, trips[i].trip_id))
    rng = np.random.default_rng(seed)
    drawn_factors = _draw_speed_factors(rng, len(trips), params.speed_factor_mean, params.speed_factor_std)
    drawn_jitter = rng.random(len(trips))
    # draws are consumed in departure order so a fixed seed gives each trip
    # the same factor regardless of list order
    factors = np.empty(len(trips))
    jitter_u = np.empty(len(trips))
    for rank, i in enumerate(order):
        factors[i] = drawn_factors[rank]
        jitter_u[i] = drawn_jitter[rank]

    states: dict[str, _LinkState] = {lid: _LinkState() for lid in network.link_order}
    outcomes: list[TripOutcome | None] = [None] * len(trips)
    rejected: list[tuple[str, str]] = []

    # per-vehicle runtime state
    veh_links: list[tuple[str, ...]] = [()] * len(trips)
    veh_pos = [0] * len(trips)
    veh_entry_t = [0.0] * len(trips)
    veh_trace: list[list[tuple[str, float]]] = [[] for _ in trips]
    veh_reroute_epoch = [-1] * len(trips)

    # reroute index: (od, node) -> [(path_id, suffix)]
    suffixes: dict[tuple, list[tuple[str, tuple[str, ...]]]] = {}
    if od_paths and params.reroute_period > 0 and params.reroute_prob > 0:
        for pid, (od, plinks) in od_paths.items():
            for j, lid in enumerate(plinks):
                node = network.links[lid].from_node
                suffixes.setdefault((od, node), []).append((pid, plinks[j:]))
    path_od = {pid: od for pid, (od, _) in (od_paths or {}).items()}

    heap: list[tuple[float, int, int, int, str]] = []
    seq = 0
    speed_sums: dict[tuple[str, int], tuple[float, int]] = {}
    counts: dict[tuple[str, int], int] = {}
    entry_log: dict[str, list[str]] = {}
    exit_log: dict[str, list[str]] = {}

    def push(t: float, kind: int, veh: int, link: str):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, veh, link))
        seq += 1

    K_DEPART, K_ENTER, K_SERVE = 0, 1, 2

    def budget(link: str, occurrence_tod: tuple[int, int]) -> float:
        _, tod = occurrence_tod
        return params.capacity_scale * network.capacity_for(link, schedule.by_index(tod))

    exits_used: dict[tuple[str, int, int], int] = {}

    def occurrence(t: float) -> tuple[int, int]:
        return int(t // DAY_S), schedule.index_of(t)

    def service_interval(link: str, tod: int) -> float:
        st = states[link]
        si = st.service_cache.get(tod)
        if si is None:
            iv = schedule.by_index(tod)
            cap = params.capacity_scale * network.capacity_for(link, iv)
            si = max(params.min_headway, iv.seconds / cap) if cap > 0 else np.inf
            st.service_cache[tod] = si
        return si

    def enter_link(veh: int, lid: str, t: float):
        st = states[lid]
        st.entered += 1
        counts[(lid, schedule.index_of(t))] = counts.get((lid, schedule.index_of(t)), 0) + 1
        veh_entry_t[veh] = t
        if record_links:
            veh_trace[veh].append((lid, t))
            entry_log.setdefault(lid, []).append(trips[veh].trip_id)
        link = network.links[lid]
        ready = t + link.length / (link.speed_limit * factors[veh])
        st.queue.append((ready, veh))
        if len(st.queue) == 1:
            push(max(ready, st.next_free), K_SERVE, -1, lid)

    def choose_suffix(veh: int, node: str, now: float) -> tuple[str, ...] | None:
        pid = trips[veh].path_id
        od = path_od.get(pid)
        if od is None:
            return None
        options = suffixes.get((od, node))
        if not options or len(options) < 2:
            return None
        best, best_cost = None, np.inf
        for _, suffix in options:
            cost = 0.0
            for lid in suffix:
                link = network.links[lid]
                st = states[lid]
                cost += link.length / link.speed_limit
                cost += len(st.queue) * service_interval(lid, schedule.index_of(now))
            if cost < best_cost - 1e-12:
                best, best_cost = suffix, cost
        return best

    def maybe_reroute(veh: int, node: str, now: float, kept: int):
        """Periodic route re-selection at a decision node; kept is how many
        links of the current route stay fixed."""
        if not suffixes or params.reroute_period <= 0:
            return
        epoch = int(now // params.reroute_period)
        if epoch <= veh_reroute_epoch[veh]:
            return
        veh_reroute_epoch[veh] = epoch
        u = np.random.default_rng((seed, 7919, veh, epoch)).random()
        if u < params.reroute_prob:
            alt = choose_suffix(veh, node, now)
            if alt is not None:
                veh_links[veh] = veh_links[veh][:kept] + alt

    def advance(veh: int, lid: str, t_exit: float):
        """Move a vehicle past the downstream end of lid at t_exit."""
        st = states[lid]
        st.exited += 1
        if record_links:
            exit_log.setdefault(lid, []).append(trips[veh].trip_id)
        entry_t = veh_entry_t[veh]
        tod_in = schedule.index_of(entry_t)
        key = (lid, tod_in)
        dur = t_exit - entry_t
        if dur > 0:
            s, c = speed_sums.get(key, (0.0, 0))
            speed_sums[key] = (s + network.links[lid].length / dur, c + 1)
        pos = veh_pos[veh]
        if pos + 1 >= len(veh_links[veh]):
            out = outcomes[veh]
            out.arrival = t_exit
            out.travel_time = t_exit - out.depart_actual
            out.completed = True
            return
        node = network.links[lid].to_node
        maybe_reroute(veh, node, t_exit, kept=pos + 1)
        veh_pos[veh] = pos + 1
        delay = params.junction_delay if network.nodes[node].is_junction else 0.0
        push(t_exit + delay, K_ENTER, veh, veh_links[veh][pos + 1])

    def serve(lid: str, now: float):
        st = states[lid]
        while st.queue:
            ready, veh = st.queue[0]
            t = max(ready, st.next_free)
            occ = occurrence(t)
            while exits_used.get((lid, *occ), 0) >= budget(lid, occ):
                t = occ[0] * DAY_S + schedule.by_index(occ[1]).end_s
                occ = occurrence(t)
                if t >= horizon_s:
                    return  # capacity exhausted through the horizon
            if t > now + 1e-9:
                push(t, K_SERVE, -1, lid)
                return
            st.queue.popleft()
            exits_used[(lid, *occ)] = exits_used.get((lid, *occ), 0) + 1
            st.next_free = t + service_interval(lid, occ[1])
            advance(veh, lid, t)

    for i in order:
        trip = trips[i]
        if not validate_path(network, trip.links):
            rejected.append((trip.trip_id, "invalid_path"))
            continue
        depart = trip.departure_time + jitter_u[i] * params.departure_jitter
        outcomes[i] = TripOutcome(
            trip_id=trip.trip_id, path_id=trip.path_id,
            departure=trip.departure_time, depart_actual=depart,
            arrival=None, travel_time=None, completed=False,
            tod=schedule.index_of(trip.departure_time),
        )
        veh_links[i] = tuple(trip.links)
        push(depart, K_DEPART, i, trip.links[0])

    while heap:
        t, _, kind, veh, lid = heapq.heappop(heap)
        if t >= horizon_s:
            break
        if kind == K_SERVE:
            serve(lid, t)
        elif kind == K_DEPART:
            maybe_reroute(veh, network.links[lid].from_node, t, kept=0)
            enter_link(veh, veh_links[veh][0], t)
        else:
            enter_link(veh, lid, t)

    results: list[TripOutcome] = []
    completed = 0
    for i, out in enumerate(outcomes):
        if out is None:
            continue
        if record_links:
            out.link_entries = tuple(veh_trace[i])
        if out.completed:
            completed += 1
        results.append(out)

    on_road = {lid: len(states[lid].queue) for lid in network.link_order}
    requested = len(trips)
    return SimResult(
        trips=results,
        requested=requested,
        completed_count=completed,
        loaded_fraction=completed / requested if requested else 1.0,
        link_entered={lid: states[lid].entered for lid in network.link_order},
        link_exited={lid: states[lid].exited for lid in network.link_order},
        link_on_road_end=on_road,
        link_tod_counts=counts,
        link_tod_speed_sums=speed_sums,
        rejected_trips=rejected,
        params=params,
        seed=seed,
        link_entry_log=entry_log,
        link_exit_log=exit_log,
    )


def apply_warmup_cooldown(result: SimResult, schedule: TODSchedule) -> SimResult:
    """Drop trips departing in the warm-up or cool-down interval from the
    evaluation set. Link statistics are left untouched."""
    main = {iv.index for iv in schedule.main_intervals}
    kept = [t for t in result.trips if t.tod in main]
    completed = sum(1 for t in kept if t.completed)
    requested = len(kept)
    return replace(result, trips=kept, requested=requested, completed_count=completed,
                   loaded_fraction=completed / requested if requested else 1.0)


def throughput(result: SimResult) -> float:
    """Completed trips over requested trips."""
    if result.requested == 0:
        return 1.0
    return result.completed_count / result.requested


# ---------------------------------------------------------------------------
# Trip table and result CSV round-trips

def write_trip_table(path, trips: list[SimTrip]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trip_id", "path_id", "links", "departure_time_s"])
        for t in trips:
            w.writerow([t.trip_id, t.path_id, "|".join(t.links), repr(float(t.departure_time))])


def load_trip_table(path) -> list[SimTrip]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(SimTrip(
                trip_id=row["trip_id"], path_id=row["path_id"],
                links=tuple(row["links"].split("|")),
                departure_time=float(row["departure_time_s"]),
            ))
    return out


def write_sim_trips(path, result: SimResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trip_id", "path_id", "tod", "departure_s", "travel_time_s", "completed"])
        for t in result.trips:
            tt = "" if t.travel_time is None else repr(float(t.travel_time))
            w.writerow([t.trip_id, t.path_id, t.tod, repr(float(t.departure)), tt, int(t.completed)])


def write_link_flows(path, result: SimResult, network: Network, schedule: TODSchedule) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["link_id", "tod", "entries", "mean_speed_mps"])
        for lid in network.link_order:
            for iv in schedule.intervals:
                c = result.link_tod_counts.get((lid, iv.index), 0)
                if c == 0:
                    continue
                ms = result.mean_speed(lid, iv.index)
                w.writerow([lid, iv.index, c, "" if ms is None else f"{ms:.4f}"])

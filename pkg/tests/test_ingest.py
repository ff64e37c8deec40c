import numpy as np
import pytest

from mesocal import ingest
from mesocal.ingest import (MPS_PER_MPH, PenetrationEstimate, TrajectoryRecord,
                            assign_tod, estimate_speed_limits, estimate_total_trips,
                            filter_abnormal, link_speed_observations, load_trajectories,
                            totals_by_tod, write_trajectories)
from mesocal.netmodel import Link, Network, Node, default_schedule
from mesocal.scenario import make_grid_network


def chain_network(lengths):
    nodes = {}
    links = {}
    prev = "n0"
    nodes[prev] = Node(prev, 0.0, 0.0)
    for i, length in enumerate(lengths):
        cur = f"n{i + 1}"
        nodes[cur] = Node(cur, float(i + 1), 0.0)
        links[f"e{i + 1}"] = Link(f"e{i + 1}", prev, cur, float(length), 10.0)
        prev = cur
    return Network(nodes, links)


def make_record(distance_m, travel_time_s, **kw):
    defaults = dict(trip_id="t", day="d", links=("e1",), entry_times=(0.0,),
                    arrival_time=travel_time_s, origin=(0, 0), destination=(1, 0),
                    distance=distance_m, travel_time=travel_time_s)
    defaults.update(kw)
    return TrajectoryRecord(**defaults)


class TestLoadTrajectories:
    def test_empty_file(self, tmp_path):
        net = chain_network([100])
        p = tmp_path / "t.csv"
        p.write_text("trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y\n")
        records, rejected = load_trajectories(p, net)
        assert records == [] and rejected == []

    def test_three_links_distance_sum(self, tmp_path):
        net = chain_network([100, 200, 300])
        p = tmp_path / "t.csv"
        rows = ["t1,d1,e1,0,0,0,3,0", "t1,d1,e2,10,0,0,3,0", "t1,d1,e3,30,0,0,3,0"]
        p.write_text("trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y\n"
                     + "\n".join(rows) + "\n")
        records, rejected = load_trajectories(p, net)
        assert not rejected
        (rec,) = records
        assert rec.distance == 600.0
        assert rec.links == ("e1", "e2", "e3")
        assert rec.arrival_time is None
        assert rec.travel_time == 30.0

    def test_arrival_marker_row(self, tmp_path):
        net = chain_network([100, 200])
        p = tmp_path / "t.csv"
        rows = ["t1,d1,e1,0,0,0,2,0", "t1,d1,e2,10,0,0,2,0", "t1,d1,e2,32,0,0,2,0"]
        p.write_text("trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y\n"
                     + "\n".join(rows) + "\n")
        records, _ = load_trajectories(p, net)
        (rec,) = records
        assert rec.links == ("e1", "e2")
        assert rec.arrival_time == 32.0
        assert rec.travel_time == 32.0
        assert rec.distance == 300.0

    def test_non_monotone_rejected(self, tmp_path):
        net = chain_network([100, 200])
        p = tmp_path / "t.csv"
        rows = ["t1,d1,e1,10,0,0,2,0", "t1,d1,e2,5,0,0,2,0"]
        p.write_text("trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y\n"
                     + "\n".join(rows) + "\n")
        records, rejected = load_trajectories(p, net)
        assert records == []
        assert rejected == [("t1", "non_monotone_timestamps")]

    def test_unknown_link_rejected(self, tmp_path):
        net = chain_network([100])
        p = tmp_path / "t.csv"
        p.write_text("trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y\n"
                     "t1,d1,bogus,0,0,0,1,0\n")
        records, rejected = load_trajectories(p, net)
        assert records == []
        assert rejected[0][0] == "t1" and "unknown_link" in rejected[0][1]

    def test_thousand_trips_roundtrip(self, tmp_path):
        # write-then-read identity over simulator-shaped records
        rng = np.random.default_rng(3)
        net = make_grid_network(5)
        lids = list(net.link_order)
        records = []
        for i in range(1000):
            start = net.links[rng.choice(lids)]
            links = [start.id]
            node = start.to_node
            for _ in range(int(rng.integers(1, 6))):
                outs = net.links_from(node)
                if not outs:
                    break
                nxt = outs[int(rng.integers(len(outs)))]
                links.append(nxt)
                node = net.links[nxt].to_node
            t0 = float(rng.uniform(0, 80000))
            times = [t0]
            for lid in links[:-1]:
                times.append(times[-1] + net.links[lid].length / 10.0)
            arrival = times[-1] + net.links[links[-1]].length / 10.0
            records.append(TrajectoryRecord(
                trip_id=f"t{i:04d}", day="2022-03-08", links=tuple(links),
                entry_times=tuple(times), arrival_time=arrival,
                origin=(float(rng.normal()), float(rng.normal())),
                destination=(float(rng.normal()), float(rng.normal())),
                distance=sum(net.links[l].length for l in links),
                travel_time=arrival - t0))
        path = tmp_path / "dump.csv"
        write_trajectories(path, records)
        loaded, rejected = load_trajectories(path, net)
        assert not rejected
        assert len(loaded) == 1000
        for a, b in zip(records, loaded):
            assert a.trip_id == b.trip_id
            assert a.links == b.links
            assert a.entry_times == b.entry_times
            assert a.arrival_time == b.arrival_time
            assert a.origin == b.origin and a.destination == b.destination
            assert a.distance == b.distance and a.travel_time == b.travel_time


class TestFilterAbnormal:
    def test_twenty_mph_kept(self):
        # 10 miles in half an hour
        rec = make_record(10 * 1609.344, 1800.0)
        assert rec.mean_speed_mph() == pytest.approx(20.0)
        kept, removed = filter_abnormal([rec])
        assert kept == [rec] and removed == []

    def test_two_mph_removed(self):
        rec = make_record(1 * 1609.344, 1800.0)
        assert rec.mean_speed_mph() == pytest.approx(2.0)
        kept, removed = filter_abnormal([rec])
        assert kept == [] and removed == [rec]

    def test_exact_bounds_inclusive(self):
        slow = make_record(5 * MPS_PER_MPH * 100.0, 100.0)   # exactly 5 mph
        fast = make_record(100 * MPS_PER_MPH * 100.0, 100.0)
        assert slow.mean_speed_mph() == pytest.approx(5.0)
        kept, removed = filter_abnormal([slow, fast])
        assert len(kept) == 2 and not removed

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        records = [make_record(float(rng.uniform(100, 1e5)), float(rng.uniform(10, 7200)))
                   for _ in range(300)]
        kept, _ = filter_abnormal(records)
        kept2, removed2 = filter_abnormal(kept)
        assert kept2 == kept and removed2 == []


class TestSpeedLimits:
    def traversal_record(self, tid, speeds_mps, net):
        # one record traversing e1..eN, timed to realize the given speeds
        times = [0.0]
        links = []
        for i, v in enumerate(speeds_mps):
            lid = f"e{i + 1}"
            links.append(lid)
            times.append(times[-1] + net.links[lid].length / v)
        return TrajectoryRecord(
            trip_id=tid, day="d", links=tuple(links), entry_times=tuple(times[:-1]),
            arrival_time=times[-1], origin=(0, 0), destination=(0, 0),
            distance=sum(net.links[l].length for l in links), travel_time=times[-1])

    def test_constant_sample(self):
        net = chain_network([100])
        records = [self.traversal_record(f"t{i}", [10.0], net) for i in range(5)]
        obs = link_speed_observations(records, net)
        assert np.allclose(obs["e1"], 10.0)
        updated = estimate_speed_limits(records, net, 0.8, min_obs=5)
        assert updated.links["e1"].speed_limit == pytest.approx(10.0)

    def test_interpolated_percentile(self):
        net = chain_network([100])
        records = [self.traversal_record(f"t{v}", [float(v)], net) for v in range(1, 11)]
        updated = estimate_speed_limits(records, net, 0.8, min_obs=10)
        assert updated.links["e1"].speed_limit == pytest.approx(8.2)

    def test_below_min_obs_unchanged(self):
        net = chain_network([100])
        records = [self.traversal_record(f"t{i}", [30.0], net) for i in range(2)]
        updated = estimate_speed_limits(records, net, 0.8, min_obs=10)
        assert updated.links["e1"].speed_limit == net.links["e1"].speed_limit == 10.0

    def test_monotone_in_percentile(self):
        net = chain_network([100])
        rng = np.random.default_rng(11)
        records = [self.traversal_record(f"t{i}", [float(rng.uniform(3, 30))], net)
                   for i in range(40)]
        limits = [estimate_speed_limits(records, net, p, min_obs=10).links["e1"].speed_limit
                  for p in (0.1, 0.3, 0.5, 0.7, 0.8, 0.9, 0.99)]
        assert all(a <= b + 1e-12 for a, b in zip(limits, limits[1:]))

    def test_intermediate_links_use_entry_gaps(self):
        net = chain_network([100, 200])
        rec = TrajectoryRecord(
            trip_id="t", day="d", links=("e1", "e2"), entry_times=(0.0, 20.0),
            arrival_time=30.0, origin=(0, 0), destination=(0, 0),
            distance=300.0, travel_time=30.0)
        obs = link_speed_observations([rec], net)
        assert obs["e1"] == [100.0 / 20.0]
        assert obs["e2"] == [200.0 / 10.0]


class TestAssignTOD:
    def test_paper_table_examples(self):
        sched = default_schedule()
        assert assign_tod(make_record(1000, 10, entry_times=(8.5 * 3600,)), sched) == 2
        assert assign_tod(make_record(1000, 10, entry_times=(23 * 3600 + 59 * 60,)), sched) == 6
        assert assign_tod(make_record(1000, 10, entry_times=(0.0,)), sched) == 1

    def test_total_over_day(self):
        sched = default_schedule()
        hits = set()
        for t in np.linspace(0, 86399, 997):
            hits.add(assign_tod(make_record(1000, 10, entry_times=(float(t),)), sched))
        assert hits == {1, 2, 3, 4, 5, 6}


class TestTotalTrips:
    def test_paper_anchored_inversion(self):
        xt = estimate_total_trips(21000, PenetrationEstimate(0.075))
        assert xt == pytest.approx(280000.0, rel=1e-12)

    def test_identity_penetration(self):
        assert estimate_total_trips(100, PenetrationEstimate(1.0)) == 100.0

    def test_direct_division(self):
        assert estimate_total_trips(7, PenetrationEstimate(0.07)) == pytest.approx(100.0)

    def test_rate_zero_rejected(self):
        with pytest.raises(ValueError):
            PenetrationEstimate(0.0)
        with pytest.raises(ValueError):
            PenetrationEstimate(1.5)

    def test_linearity(self):
        rate = PenetrationEstimate(0.2)
        vals = [estimate_total_trips(k, rate) for k in range(0, 50, 7)]
        diffs = np.diff(vals)
        assert np.allclose(diffs, diffs[0])
        assert estimate_total_trips(40, PenetrationEstimate(0.1)) == \
            2 * estimate_total_trips(40, PenetrationEstimate(0.2))

    def test_totals_by_tod_averages_days(self):
        sched = default_schedule()
        records = []
        for day in ("d1", "d2"):
            for i in range(10):
                records.append(make_record(1000, 10, trip_id=f"{day}_{i}", day=day,
                                           entry_times=(8 * 3600.0,), tod=2))
        prior = totals_by_tod(records, sched, PenetrationEstimate(0.1), n_days=2)
        assert prior.by_tod[2] == pytest.approx(100.0)
        assert prior.by_tod[3] == 0.0


class TestLinkPriors:
    def test_counts_scaled_by_rate(self):
        net = chain_network([100, 100])
        sched = default_schedule()
        records = []
        for i in range(6):
            records.append(TrajectoryRecord(
                trip_id=f"t{i}", day="d", links=("e1", "e2"),
                entry_times=(8 * 3600.0, 8 * 3600.0 + 10), arrival_time=8 * 3600.0 + 20,
                origin=(0, 0), destination=(0, 0), distance=200.0, travel_time=20.0))
        priors = ingest.estimate_link_priors(records, ["e1"], sched,
                                             PenetrationEstimate(0.1))
        assert priors[2]["e1"] == pytest.approx(60.0)
        assert priors[3]["e1"] == 0.0

    def test_top_traversed(self):
        net = chain_network([100, 100, 100])
        records = [
            make_record(100, 10, links=("e1", "e2"), entry_times=(0.0, 5.0)),
            make_record(100, 10, links=("e2",), entry_times=(0.0,)),
            make_record(100, 10, links=("e2", "e3"), entry_times=(0.0, 5.0)),
        ]
        assert ingest.top_traversed_links(records, 2) == ["e2", "e1"]

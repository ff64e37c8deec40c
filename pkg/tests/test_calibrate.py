import numpy as np
import pytest

from mesocal.calibrate import (GainSchedule, MatchingError, match_travel_times,
                               max_capacity_corner, run_baseline, spsa_calibrate,
                               tune_gains, upsample_trips)
from mesocal.ingest import TrajectoryRecord
from mesocal.mesosim import SimParams, SimTrip, ThetaBox, default_theta_box
from mesocal.netmodel import default_schedule

D = 6
UNIT_BOX = ThetaBox(np.zeros(D), np.ones(D))
THETA_STAR = np.full(D, 0.3)


def quad_surrogate(theta, seed):
    l = float(np.sum((theta - THETA_STAR) ** 2))
    return l, l


class TestGainSchedule:
    def test_sequences_strictly_decreasing(self):
        g = GainSchedule(a=0.5, c=0.1, A=10.0)
        aks = [g.a_k(k) for k in range(50)]
        cks = [g.c_k(k) for k in range(50)]
        assert all(x > y for x, y in zip(aks, aks[1:]))
        assert all(x > y for x, y in zip(cks, cks[1:]))

    def test_exponent_ranges_enforced(self):
        with pytest.raises(ValueError):
            GainSchedule(a=1.0, c=0.1, alpha_exp=0.5)
        with pytest.raises(ValueError):
            GainSchedule(a=1.0, c=0.1, gamma_exp=0.6)
        with pytest.raises(ValueError):
            GainSchedule(a=-1.0, c=0.1)


class TestSPSAQuadratic:
    def test_converges_all_seeds(self):
        theta0 = np.full(D, 0.75)
        d0 = np.linalg.norm(theta0 - THETA_STAR)
        for seed in range(10):
            run = spsa_calibrate(quad_surrogate, theta0, UNIT_BOX,
                                 GainSchedule(a=0.3, c=0.1, A=20.0),
                                 eps=1e-14, max_iter=200, seed=seed)
            assert run.iterations <= 200
            df = np.linalg.norm(run.theta_opt - THETA_STAR)
            assert df <= 0.05 * d0

    def test_start_at_optimum_converges_immediately(self):
        run = spsa_calibrate(quad_surrogate, THETA_STAR.copy(), UNIT_BOX,
                             GainSchedule(a=0.3, c=0.05, A=20.0),
                             eps=1e-2, max_iter=200, seed=0)
        assert run.status == "converged"
        assert run.iterations == 2
        assert np.allclose(run.theta_opt, THETA_STAR)
        # balanced +-1 perturbations of a symmetric loss keep both
        # evaluations equal, so the estimated gradient is exactly zero
        for lp, lm in run.loss_history:
            assert lp == lm

    def test_noisy_surrogate_reaches_noise_floor(self):
        noise_var = 0.2 ** 2 / 12.0
        ok = 0
        for seed in range(10):
            noise_rng = np.random.default_rng(1000 + seed)

            def noisy(theta, eval_seed):
                l = quad_surrogate(theta, eval_seed)[0] + float(noise_rng.uniform(-0.1, 0.1))
                return l, l

            run = spsa_calibrate(noisy, np.full(D, 0.75), UNIT_BOX,
                                 GainSchedule(a=0.3, c=0.15, A=20.0),
                                 eps=1e-14, max_iter=200, seed=seed)
            if quad_surrogate(run.theta_opt, 0)[0] <= 4.0 * noise_var:
                ok += 1
        assert ok >= 8

    def test_exactly_two_evaluations_per_iteration(self):
        calls = []

        def counting(theta, seed):
            calls.append(seed)
            return quad_surrogate(theta, seed)

        run = spsa_calibrate(counting, np.full(D, 0.6), UNIT_BOX,
                             GainSchedule(a=0.3, c=0.1, A=20.0),
                             eps=1e-14, max_iter=37, seed=5)
        assert run.n_evaluations == len(calls) == 2 * run.iterations
        # common random numbers: the pair shares one evaluation seed
        assert all(calls[2 * i] == calls[2 * i + 1] for i in range(run.iterations))

    def test_all_iterates_inside_box(self):
        box = ThetaBox(np.array([0.5, 0.0, 1.0, 0.8, 0.0, 0.0]),
                       np.array([2.0, 10.0, 4.0, 1.2, 0.2, 300.0]))
        target = box.lo + 0.25 * box.width

        def loss(theta, seed):
            l = float(np.sum(((theta - target) / box.width) ** 2))
            return l, l

        theta0 = box.lo + 0.9 * box.width
        run = spsa_calibrate(loss, theta0, box, GainSchedule(a=0.4, c=0.1, A=10.0),
                             eps=1e-14, max_iter=120, seed=2)
        for theta in run.theta_history:
            assert box.contains(theta)

    def test_gradient_sign_matches_on_1d_quadratic(self):
        # one dimension: the two-point estimate is exact, so its sign agrees
        # with the true gradient whenever the offset exceeds c_k
        box = ThetaBox(np.zeros(1), np.ones(1))
        star = np.array([0.4])

        def loss(theta, seed):
            l = float((theta[0] - star[0]) ** 2)
            return l, l

        g = GainSchedule(a=0.2, c=0.05, A=5.0)
        theta = np.array([0.9])
        rng = np.random.default_rng(3)
        for k in range(30):
            delta = rng.integers(0, 2, 1) * 2 - 1
            up = np.clip(theta + g.c_k(k) * delta, 0, 1)
            dn = np.clip(theta - g.c_k(k) * delta, 0, 1)
            est = (loss(up, 0)[0] - loss(dn, 0)[0]) / (2 * g.c_k(k)) * delta
            true = 2 * (theta - star)
            if abs(theta[0] - star[0]) > g.c_k(k):
                assert np.sign(est[0]) == np.sign(true[0])
            theta = np.clip(theta - g.a_k(k) * est, 0, 1)

    def test_failed_evaluation_retried_then_aborts(self):
        fail_at = {"count": 0}

        def flaky(theta, seed):
            fail_at["count"] += 1
            if fail_at["count"] == 3:  # first evaluation of iteration 2
                raise RuntimeError("sim crashed")
            return quad_surrogate(theta, seed)

        run = spsa_calibrate(flaky, np.full(D, 0.6), UNIT_BOX,
                             GainSchedule(a=0.3, c=0.1, A=20.0),
                             eps=1e-14, max_iter=5, seed=1)
        assert run.n_retries == 1
        assert run.iterations == 5

        def always_fails(theta, seed):
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError, match="failed twice"):
            spsa_calibrate(always_fails, np.full(D, 0.6), UNIT_BOX,
                           GainSchedule(a=0.3, c=0.1, A=20.0),
                           eps=1e-14, max_iter=5, seed=1)

    def test_theta0_outside_box_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            spsa_calibrate(quad_surrogate, np.full(D, 2.0), UNIT_BOX,
                           GainSchedule(a=0.3, c=0.1), eps=1e-3, max_iter=5, seed=0)

    def test_tune_gains_returns_valid_schedule(self):
        gains, n_evals = tune_gains(quad_surrogate, np.full(D, 0.6), UNIT_BOX,
                                    max_iter=100, seed=0)
        assert gains.a > 0 and gains.c > 0
        assert gains.A == pytest.approx(10.0)
        assert n_evals == 7


def make_obs(trip_id, path_id, departure, travel_time, day="d1", tod=None):
    rec = TrajectoryRecord(
        trip_id=trip_id, day=day, links=("e1",), entry_times=(departure,),
        arrival_time=departure + travel_time, origin=(0, 0), destination=(1, 0),
        distance=1000.0, travel_time=travel_time, tod=tod)
    rec.rep_path = path_id
    return rec


class _FakeTrip:
    def __init__(self, path_id, departure, travel_time, completed=True):
        self.path_id = path_id
        self.departure = departure
        self.travel_time = travel_time
        self.completed = completed


class _FakeResult:
    def __init__(self, trips):
        self.trips = trips


class TestMatching:
    def test_identical_times_zero_mse(self):
        sched = default_schedule()
        obs = [make_obs(f"o{i}", "P1", 8 * 3600.0 + i * 60, 300.0) for i in range(5)]
        sims = _FakeResult([_FakeTrip("P1", 8 * 3600.0 + i * 60, 300.0) for i in range(5)])
        pairs, report = match_travel_times(obs, sims, sched)
        assert report.n_matched == 5 and report.n_unmatched == 0
        assert report.mse == 0.0

    def test_symmetric_errors_average(self):
        sched = default_schedule()
        obs = [make_obs("o1", "P1", 8 * 3600.0, 300.0),
               make_obs("o2", "P1", 9 * 3600.0, 300.0)]
        sims = _FakeResult([_FakeTrip("P1", 8 * 3600.0, 310.0),
                            _FakeTrip("P1", 9 * 3600.0, 290.0)])
        pairs, report = match_travel_times(obs, sims, sched)
        assert report.mse == pytest.approx(100.0)

    def test_matching_respects_tod_and_path(self):
        sched = default_schedule()
        obs = [make_obs("o1", "P1", 8 * 3600.0, 300.0),   # AM peak
               make_obs("o2", "P2", 8 * 3600.0, 300.0),   # unmatched path
               make_obs("o3", "P1", 12 * 3600.0, 300.0)]  # midday, no candidate
        sims = _FakeResult([_FakeTrip("P1", 8.2 * 3600.0, 310.0)])
        pairs, report = match_travel_times(obs, sims, sched)
        assert report.n_matched == 1
        assert report.n_unmatched == 2

    def test_incomplete_trips_not_matchable(self):
        sched = default_schedule()
        obs = [make_obs("o1", "P1", 8 * 3600.0, 300.0)]
        sims = _FakeResult([_FakeTrip("P1", 8 * 3600.0, None, completed=False)])
        pairs, report = match_travel_times(obs, sims, sched)
        assert report.n_matched == 0


class TestBaselines:
    def test_replication_factor_half(self):
        obs = [make_obs(f"o{i}", "P1", 1000.0 * i, 120.0) for i in range(10)]
        trips = upsample_trips(obs, 0.5, jitter_s=60.0, seed=0)
        assert len(trips) == 20

    def test_identity_penetration(self):
        obs = [make_obs(f"o{i}", "P1", 1000.0 * i, 120.0) for i in range(7)]
        trips = upsample_trips(obs, 1.0, jitter_s=60.0, seed=0)
        assert len(trips) == 7
        assert [t.departure_time for t in trips] == [o.departure for o in obs]

    def test_replicas_keep_links_and_path(self):
        obs = [make_obs("o1", "P9", 500.0, 60.0)]
        trips = upsample_trips(obs, 0.075, jitter_s=300.0, seed=1)
        assert len(trips) == 13
        assert all(t.path_id == "P9" and t.links == ("e1",) for t in trips)
        assert trips[0].departure_time == 500.0
        assert all(500.0 <= t.departure_time <= 800.0 for t in trips)

    def test_max_capacity_corner(self):
        box = default_theta_box()
        theta = SimParams(1.0, 5.0, 2.5, 1.0, 0.1, 120.0)
        corner = max_capacity_corner(box, theta)
        assert corner.capacity_scale == box.hi[0]
        assert corner.junction_delay == box.lo[1]
        assert corner.min_headway == box.lo[2]
        assert corner.speed_factor_mean == box.hi[3]
        assert corner.speed_factor_std == theta.speed_factor_std
        assert corner.departure_jitter == theta.departure_jitter

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown baseline"):
            run_baseline("nope", [], 0.5, SimParams(), None, default_schedule())

    def test_end_to_end_baseline_on_chain(self):
        from mesocal.netmodel import Link, Network, Node
        nodes = {"a": Node("a", 0, 0), "b": Node("b", 1000, 0)}
        links = {"e1": Link("e1", "a", "b", 1000.0, 10.0)}
        net = Network(nodes, links)
        sched = default_schedule()
        obs = [make_obs(f"o{i}", "P1", 8 * 3600.0 + 120.0 * i, 100.0, tod=2)
               for i in range(20)]
        theta = SimParams(1.0, 0.0, 2.0, 1.0, 0.0, 0.0)
        m = run_baseline("upsample_calibrated", obs, 0.25, theta, net, sched,
                         default_theta_box(), seed=0)
        assert m.n_trips == 80
        assert m.throughput == 1.0
        assert m.mse == pytest.approx(0.0, abs=1e-9)  # free flow both sides

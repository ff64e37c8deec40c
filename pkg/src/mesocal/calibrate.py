"""Supply-side parameter calibration by simultaneous-perturbation stochastic
approximation against observed trip travel times, plus the two up-sampling
baselines used for comparison."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass

import numpy as np

from .ingest import TrajectoryRecord
from .mesosim import (SimParams, SimResult, SimTrip, ThetaBox,
                      apply_warmup_cooldown, run_simulation, throughput)
from .netmodel import Network, TODSchedule

logger = logging.getLogger(__name__)


class MatchingError(RuntimeError):
    """No observed trip could be matched to a simulated one."""


@dataclass(frozen=True)
class GainSchedule:
    """Step and perturbation sequences a_k = a/(k+1+A)^alpha_exp and
    c_k = c/(k+1)^gamma_exp, both strictly decreasing."""

    a: float
    c: float
    A: float = 0.0
    alpha_exp: float = 0.602
    gamma_exp: float = 0.101

    def __post_init__(self):
        if self.a <= 0 or self.c <= 0 or self.A < 0:
            raise ValueError("a, c must be > 0 and A >= 0")
        if not 0.5 < self.alpha_exp <= 1.0:
            raise ValueError("alpha_exp must be in (0.5, 1]")
        if not 0.0 < self.gamma_exp <= 0.5:
            raise ValueError("gamma_exp must be in (0, 0.5]")

    def a_k(self, k: int) -> float:
        return self.a / (k + 1.0 + self.A) ** self.alpha_exp

    def c_k(self, k: int) -> float:
        return self.c / (k + 1.0) ** self.gamma_exp


@dataclass
class CalibrationRun:
    theta_history: list[np.ndarray]
    loss_history: list[tuple[float, float]]       # (L at theta+, L at theta-)
    total_travel_time_history: list[float]
    status: str                                   # converged | max_iter
    theta_opt: np.ndarray
    iterations: int
    n_evaluations: int
    n_retries: int = 0

    @property
    def final_loss(self) -> float:
        lp, lm = self.loss_history[-1]
        return 0.5 * (lp + lm)


def spsa_calibrate(loss_fn, theta0: np.ndarray, box: ThetaBox,
                   schedule: GainSchedule, eps: float, max_iter: int,
                   seed: int = 0) -> CalibrationRun:
    """Minimize loss_fn over the box by SPSA.

    loss_fn(theta, eval_seed) must return (loss, total_travel_time). Both
    perturbed evaluations of an iteration share one evaluation seed (common
    random numbers). Parameters are normalized to [0, 1] per box dimension
    internally; perturbed and updated points are clipped back into the box.
    Stops when the change in total travel time between successive iterations
    is at or below eps, or at max_iter. A failed evaluation is retried once
    with a fresh perturbation, then the run aborts.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    theta0 = np.asarray(theta0, dtype=float)
    if not box.contains(theta0):
        raise ValueError("theta0 outside the feasible box")
    width = np.where(box.width > 0, box.width, 1.0)

    def to_unit(theta):
        return (theta - box.lo) / width

    def to_raw(u):
        return box.lo + u * width

    rng = np.random.default_rng(seed)
    seed_seq = np.random.SeedSequence(seed)
    u = to_unit(theta0)
    d = len(u)

    theta_history = [to_raw(u).copy()]
    loss_history: list[tuple[float, float]] = []
    tt_history: list[float] = []
    n_eval = 0
    n_retry = 0
    status = "max_iter"
    k_done = 0

    for k in range(max_iter):
        eval_seed = int(seed_seq.spawn(1)[0].generate_state(1)[0])
        attempts = 0
        while True:
            delta = rng.integers(0, 2, size=d) * 2 - 1
            u_plus = np.clip(u + schedule.c_k(k) * delta, 0.0, 1.0)
            u_minus = np.clip(u - schedule.c_k(k) * delta, 0.0, 1.0)
            try:
                l_plus, tt_plus = loss_fn(to_raw(u_plus), eval_seed)
                n_eval += 1
                l_minus, tt_minus = loss_fn(to_raw(u_minus), eval_seed)
                n_eval += 1
                break
            except MatchingError:
                raise
            except Exception as exc:
                attempts += 1
                n_retry += 1
                if attempts > 1:
                    raise RuntimeError(f"evaluation failed twice at iteration {k}") from exc
                logger.warning("evaluation failed at iteration %d, retrying: %s", k, exc)

        g = (l_plus - l_minus) / (2.0 * schedule.c_k(k)) * delta  # 1/delta == delta for +-1
        u = np.clip(u - schedule.a_k(k) * g, 0.0, 1.0)

        theta_history.append(to_raw(u).copy())
        loss_history.append((float(l_plus), float(l_minus)))
        tt_history.append(0.5 * (tt_plus + tt_minus))
        k_done = k + 1
        if k >= 1 and abs(tt_history[-1] - tt_history[-2]) <= eps:
            status = "converged"
            break

    return CalibrationRun(
        theta_history=theta_history, loss_history=loss_history,
        total_travel_time_history=tt_history, status=status,
        theta_opt=to_raw(u).copy(), iterations=k_done,
        n_evaluations=n_eval, n_retries=n_retry,
    )


def tune_gains(loss_fn, theta0: np.ndarray, box: ThetaBox, max_iter: int,
               seed: int = 0, target_first_step: float = 0.05,
               n_noise_reps: int = 5, c_floor: float = 0.01) -> tuple[GainSchedule, int]:
    """Heuristic gains: c from the loss noise standard deviation at theta0
    over replicate evaluations, a sized so the first update moves about 5%
    of each box width. Returns the schedule and the evaluations spent."""
    rng = np.random.default_rng(seed)
    width = np.where(box.width > 0, box.width, 1.0)
    losses = []
    for r in range(n_noise_reps):
        l, _ = loss_fn(np.asarray(theta0, float), int(rng.integers(2 ** 31)))
        losses.append(l)
    noise_std = float(np.std(losses))
    scale = max(1.0, float(np.mean(losses)))
    c = max(noise_std / scale if scale > 0 else noise_std, c_floor)
    c = min(c, 0.25)

    A = 0.1 * max_iter
    # probe one SPSA gradient at theta0 to size the first step
    delta = rng.integers(0, 2, size=len(theta0)) * 2 - 1
    u0 = (np.asarray(theta0, float) - box.lo) / width
    up = np.clip(u0 + c * delta, 0, 1)
    um = np.clip(u0 - c * delta, 0, 1)
    probe_seed = int(rng.integers(2 ** 31))
    lp, _ = loss_fn(box.lo + up * width, probe_seed)
    lm, _ = loss_fn(box.lo + um * width, probe_seed)
    g0 = abs(lp - lm) / (2 * c)
    a = target_first_step * (A + 1.0) ** 0.602 / max(g0, 1e-9)
    return GainSchedule(a=a, c=c, A=A), n_noise_reps + 2


# ---------------------------------------------------------------------------
# Travel-time loss against observed trajectories

@dataclass
class MatchReport:
    n_observed: int
    n_matched: int
    n_unmatched: int
    mse: float


def match_travel_times(observed: list[TrajectoryRecord], result: SimResult,
                       schedule: TODSchedule) -> tuple[list[tuple[float, float]], MatchReport]:
    """Pair each observed trip with the completed simulated trip sharing its
    representative path whose departure is nearest within the same TOD."""
    by_path: dict[str, list[tuple[float, float]]] = {}
    for t in result.trips:
        if not t.completed or t.travel_time is None:
            continue
        by_path.setdefault(t.path_id, []).append((t.departure, t.travel_time))
    for v in by_path.values():
        v.sort()
    pairs: list[tuple[float, float]] = []
    unmatched = 0
    for rec in observed:
        pid = rec.rep_path
        cands = by_path.get(pid) if pid is not None else None
        if not cands:
            unmatched += 1
            continue
        deps = [c[0] for c in cands]
        i = bisect.bisect_left(deps, rec.departure)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(cands):
                cand = cands[j]
                if schedule.index_of(cand[0]) != schedule.index_of(rec.departure):
                    continue
                gap = abs(cand[0] - rec.departure)
                if best is None or gap < best[0]:
                    best = (gap, cand[1])
        if best is None:
            unmatched += 1
            continue
        pairs.append((best[1], rec.travel_time))
    mse = float(np.mean([(s - o) ** 2 for s, o in pairs])) if pairs else float("nan")
    return pairs, MatchReport(len(observed), len(pairs), unmatched, mse)


def loss(theta: SimParams, trips: list[SimTrip], observed: list[TrajectoryRecord],
         network: Network, schedule: TODSchedule, seed: int = 0,
         horizon_s: float | None = None) -> tuple[float, float, MatchReport]:
    """Mean squared travel-time error of a simulation at theta, evaluated on
    the main TOD intervals. Also returns the total simulated travel time used
    as the calibration stopping metric."""
    kwargs = {} if horizon_s is None else {"horizon_s": horizon_s}
    result = run_simulation(network, trips, theta, schedule, seed=seed, **kwargs)
    main = apply_warmup_cooldown(result, schedule)
    pairs, report = match_travel_times(observed, main, schedule)
    if not pairs:
        raise MatchingError(
            f"no observed trip matched a simulated one "
            f"({report.n_observed} observed, {len(main.trips)} simulated)")
    total_tt = float(sum(t.travel_time for t in main.trips if t.travel_time is not None))
    return report.mse, total_tt, report


def make_sim_loss(network: Network, schedule: TODSchedule, trips: list[SimTrip],
                  observed: list[TrajectoryRecord], template: SimParams | None = None,
                  horizon_s: float | None = None):
    """Adapter giving spsa_calibrate a (theta_vector, seed) -> (L, total_tt)
    view of the simulator."""
    def fn(theta_vec: np.ndarray, eval_seed: int) -> tuple[float, float]:
        theta = SimParams.from_vector(theta_vec, template)
        mse, total_tt, _ = loss(theta, trips, observed, network, schedule,
                                seed=eval_seed, horizon_s=horizon_s)
        return mse, total_tt
    return fn


# ---------------------------------------------------------------------------
# Up-sampling baselines

BASELINE_KINDS = ("upsample_max_capacity", "upsample_calibrated")


@dataclass
class BaselineMetrics:
    kind: str
    throughput: float
    mse: float
    n_trips: int
    n_matched: int
    theta: SimParams


def max_capacity_corner(box: ThetaBox, theta: SimParams) -> SimParams:
    """Capacity-maximizing corner of the box: scale high, junction delay and
    headway low, speeds high; loading parameters keep the provided values."""
    vec = theta.to_vector().copy()
    vec[0] = box.hi[0]   # capacity_scale
    vec[1] = box.lo[1]   # junction_delay
    vec[2] = box.lo[2]   # min_headway
    vec[3] = box.hi[3]   # speed_factor_mean
    return SimParams.from_vector(vec, theta)


def upsample_trips(observed: list[TrajectoryRecord], penetration_rate: float,
                   jitter_s: float, seed: int = 0) -> list[SimTrip]:
    """Replicate each observed trip round(1/rate) times, spreading the copies
    with a uniform departure jitter."""
    if not 0.0 < penetration_rate <= 1.0:
        raise ValueError("penetration rate must be in (0, 1]")
    reps = int(round(1.0 / penetration_rate))
    rng = np.random.default_rng(seed)
    out: list[SimTrip] = []
    for rec in observed:
        pid = rec.rep_path or f"obs:{rec.trip_id}"
        for r in range(reps):
            offset = 0.0 if r == 0 else float(rng.random() * jitter_s)
            out.append(SimTrip(
                trip_id=f"{rec.trip_id}#{r}", path_id=pid, links=rec.links,
                departure_time=rec.departure + offset,
            ))
    out.sort(key=lambda t: (t.departure_time, t.trip_id))
    return out


def run_baseline(kind: str, observed: list[TrajectoryRecord], penetration_rate: float,
                 theta: SimParams, network: Network, schedule: TODSchedule,
                 box: ThetaBox | None = None, seed: int = 0,
                 jitter_s: float = 300.0, horizon_s: float | None = None) -> BaselineMetrics:
    """Uniform up-sampling baseline: replicate the observed trajectories to
    full scale and simulate them, either at the capacity-maximizing corner of
    the box or at the provided calibrated parameters."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if kind == "upsample_max_capacity":
        theta_used = max_capacity_corner(box or ThetaBox(theta.to_vector(), theta.to_vector()), theta)
    else:
        theta_used = theta
    trips = upsample_trips(observed, penetration_rate, jitter_s, seed=seed)
    kwargs = {} if horizon_s is None else {"horizon_s": horizon_s}
    result = run_simulation(network, trips, theta_used, schedule, seed=seed, **kwargs)
    main = apply_warmup_cooldown(result, schedule)
    _, report = match_travel_times(observed, main, schedule)
    return BaselineMetrics(
        kind=kind, throughput=throughput(main), mse=report.mse,
        n_trips=len(trips), n_matched=report.n_matched, theta=theta_used,
    )

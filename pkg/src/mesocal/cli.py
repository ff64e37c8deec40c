"""Pipeline command line: one subcommand per stage plus scenario generation,
config templating and an end-to-end runner. Stage outputs are written
atomically and tracked in a manifest with input digests."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path as FsPath

import numpy as np

from . import calibrate as cal
from . import clustering, flowest, ingest, mesosim, scenario
from .config import ConfigError, PipelineConfig, load_config, parse_gmm_k, write_template
from .mesosim import THETA_FIELDS, SimParams, SimTrip
from .netmodel import Network, Path, Zone, load_network

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_MISSING = 2
EXIT_INVALID = 3

STAGE_ORDER = ("ingest", "cluster", "estimate-flow", "simulate", "calibrate", "baseline", "report")


class MissingArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# Artifact bookkeeping

ARTIFACTS = {
    "ingest": ("records_kept.csv", "filter_report.csv", "links_updated.csv",
               "totals.json", "link_priors.csv"),
    "cluster": ("gmm.json", "zones.csv", "paths.csv", "trip_labels.csv", "gmatrix.csv",
                "od_counts.csv"),
    "estimate-flow": ("path_flows.csv", "od_flows.csv", "link_flow_est.csv",
                      "qp_report.json", "trip_table.csv"),
    "simulate": ("sim_trips.csv", "sim_link_flows.csv", "sim_summary.json"),
    "calibrate": ("calibration_log.csv", "theta_opt.txt", "calib_summary.json",
                  "final_sim_trips.csv"),
    "baseline": ("baseline_metrics.json",),
    "report": ("report.json", "comparison.csv", "tod_breakdown.csv"),
}

PREREQS = {
    "ingest": (),
    "cluster": ("records_kept.csv", "links_updated.csv", "totals.json"),
    "estimate-flow": ("records_kept.csv", "links_updated.csv", "totals.json",
                      "link_priors.csv", "paths.csv", "zones.csv", "gmatrix.csv",
                      "od_counts.csv"),
    "simulate": ("trip_table.csv", "links_updated.csv"),
    "calibrate": ("trip_table.csv", "records_kept.csv", "trip_labels.csv", "links_updated.csv"),
    "baseline": ("theta_opt.txt", "records_kept.csv", "trip_labels.csv", "links_updated.csv"),
    "report": ("totals.json", "qp_report.json", "calib_summary.json",
               "baseline_metrics.json", "final_sim_trips.csv", "trip_labels.csv",
               "records_kept.csv"),
}


def _digest(path: FsPath) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_replace(tmp: FsPath, final: FsPath) -> None:
    os.replace(tmp, final)


class StageIO:
    """Atomic writes plus manifest updates for one stage run."""

    def __init__(self, cfg: PipelineConfig, stage: str):
        self.cfg = cfg
        self.stage = stage
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.started = time.time()
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def path(self, name: str) -> FsPath:
        return self.out / name

    def require(self, *names: str) -> None:
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise MissingArtifactError(f"stage {self.stage!r} needs missing artifact {name}")
            self.inputs[name] = _digest(p)

    def note_input(self, path: FsPath) -> None:
        self.inputs[str(path)] = _digest(path)

    def write(self, name: str, writer) -> None:
        """writer(tmp_path) produces the file; it is moved into place whole."""
        final = self.path(name)
        tmp = self.path(name + ".tmp")
        writer(tmp)
        _atomic_replace(tmp, final)
        self.outputs[name] = _digest(final)

    def finish(self) -> None:
        mpath = self.path("manifest.json")
        manifest = {}
        if mpath.exists():
            manifest = json.loads(mpath.read_text())
        manifest.setdefault("stages", {})[self.stage] = {
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config_digest": hashlib.sha256(self.cfg.raw_text.encode()).hexdigest(),
            "elapsed_s": round(time.time() - self.started, 3),
        }
        tmp = self.path("manifest.json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        _atomic_replace(tmp, mpath)


def _write_json(obj):
    def writer(tmp):
        with open(tmp, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
    return writer


def _write_rows(header, rows):
    def writer(tmp):
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
    return writer


# ---------------------------------------------------------------------------
# Shared loading helpers

def _load_updated_network(cfg: PipelineConfig) -> Network:
    return load_network(cfg.out_dir / "links_updated.csv", cfg.nodes)


def _load_records(cfg: PipelineConfig, network: Network) -> list[ingest.TrajectoryRecord]:
    records, rejected = ingest.load_trajectories(cfg.out_dir / "records_kept.csv", network)
    if rejected:
        raise RuntimeError(f"corrupt records_kept.csv: {rejected[:3]}")
    ingest.assign_tods(records, cfg.schedule)
    return records


def _load_labels(cfg: PipelineConfig) -> dict[str, tuple[str, int, int]]:
    out = {}
    with open(cfg.out_dir / "trip_labels.csv", newline="") as f:
        for row in csv.DictReader(f):
            out[row["trip_id"]] = (row["path_id"], int(row["zone_o"]), int(row["zone_d"]))
    return out


def _load_paths(cfg: PipelineConfig) -> list[Path]:
    paths = []
    with open(cfg.out_dir / "paths.csv", newline="") as f:
        for row in csv.DictReader(f):
            paths.append(Path(row["path_id"], (int(row["zone_o"]), int(row["zone_d"])),
                              tuple(row["links"].split("|"))))
    return paths


def _load_zones(cfg: PipelineConfig) -> list[Zone]:
    zones: dict[int, Zone] = {}
    with open(cfg.out_dir / "zones.csv", newline="") as f:
        for row in csv.DictReader(f):
            z = int(row["zone_id"])
            zones.setdefault(z, Zone(z)).member_links.add(row["link_id"])
    return [zones[z] for z in sorted(zones)]


def _labeled_records(cfg: PipelineConfig, network: Network) -> list[ingest.TrajectoryRecord]:
    records = _load_records(cfg, network)
    labels = _load_labels(cfg)
    kept = []
    for rec in records:
        lab = labels.get(rec.trip_id)
        if lab is None:
            continue
        rec.rep_path = lab[0]
        kept.append(rec)
    return kept


def _theta_opt(cfg: PipelineConfig) -> SimParams:
    values = {}
    with open(cfg.out_dir / "theta_opt.txt") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val.strip())
    vec = np.array([values[f] for f in THETA_FIELDS])
    return SimParams.from_vector(vec, cfg.theta0)


# ---------------------------------------------------------------------------
# Stages

def stage_ingest(cfg: PipelineConfig) -> None:
    cfg.validate_inputs()
    io = StageIO(cfg, "ingest")
    io.note_input(cfg.links)
    io.note_input(cfg.nodes)
    io.note_input(cfg.trajectories)

    network = load_network(cfg.links, cfg.nodes)
    records, rejected = ingest.load_trajectories(cfg.trajectories, network)
    kept, removed = ingest.filter_abnormal(records, cfg.min_speed_mph, cfg.max_speed_mph)
    updated = ingest.estimate_speed_limits(kept, network, cfg.speed_percentile, cfg.min_obs)
    ingest.assign_tods(kept, cfg.schedule)

    days = sorted({r.day for r in kept}) or [""]
    penetration = ingest.PenetrationEstimate(cfg.penetration_rate)
    totals = ingest.totals_by_tod(kept, cfg.schedule, penetration, n_days=len(days))
    counts = {iv.index: 0 for iv in cfg.schedule.intervals}
    for r in kept:
        counts[r.tod] += 1

    if cfg.measured_links.startswith("top:"):
        measured = ingest.top_traversed_links(kept, int(cfg.measured_links[4:]))
    else:
        measured = [s.strip() for s in cfg.measured_links.split(",") if s.strip()]
    priors = ingest.estimate_link_priors(kept, measured, cfg.schedule, penetration,
                                         n_days=len(days))

    io.write("records_kept.csv", lambda tmp: ingest.write_trajectories(tmp, kept))
    report_rows = [(tid, reason) for tid, reason in rejected]
    report_rows += [(r.trip_id, ingest.removal_reason(r, cfg.min_speed_mph, cfg.max_speed_mph))
                    for r in removed]
    io.write("filter_report.csv", _write_rows(["trip_id", "reason"], report_rows))
    io.write("links_updated.csv", lambda tmp: _save_links_only(updated, tmp))
    io.write("totals.json", _write_json({
        "x_tilde": {str(k): v for k, v in totals.by_tod.items()},
        "observed_counts": {str(k): v for k, v in counts.items()},
        "n_days": len(days),
        "days": days,
        "penetration_rate": cfg.penetration_rate,
        "n_kept": len(kept),
        "n_removed": len(removed),
        "n_rejected": len(rejected),
    }))
    prior_rows = []
    for tod in sorted(priors):
        for lid in measured:
            prior_rows.append((tod, lid, repr(float(priors[tod][lid]))))
    io.write("link_priors.csv", _write_rows(["tod", "link_id", "prior_flow"], prior_rows))
    io.finish()
    logger.info("ingest: kept %d trips, removed %d, rejected %d",
                len(kept), len(removed), len(rejected))


def _save_links_only(network: Network, links_path) -> None:
    from .netmodel import save_network
    nodes_tmp = FsPath(str(links_path) + ".nodes")
    save_network(network, links_path, nodes_tmp)
    nodes_tmp.unlink()


def stage_cluster(cfg: PipelineConfig) -> None:
    io = StageIO(cfg, "cluster")
    io.require("records_kept.csv", "links_updated.csv", "totals.json")
    network = _load_updated_network(cfg)
    records = _load_records(cfg, network)
    if not records:
        raise RuntimeError("no usable records for clustering")

    points = []
    point_links = []
    for rec in records:
        points.append(rec.origin)
        point_links.append(rec.links[0])
        points.append(rec.destination)
        point_links.append(rec.links[-1])
    points = np.asarray(points)

    mode, lo, hi = parse_gmm_k(cfg.gmm_k)
    if mode == "fixed":
        model = clustering.fit_gmm(points, lo, seed=cfg.gmm_seed)
        bic_table = {lo: model.bic(points)}
    else:
        model, bic_table = clustering.select_k_bic(points, range(lo, hi + 1), seed=cfg.gmm_seed)
    labels = model.predict(points)
    zones = clustering.assign_zones(network, zip(point_links, labels.tolist()))
    zone_of = {lid: z.id for z in zones for lid in z.member_links}

    # group observed link sequences per OD pair
    groups: dict[tuple[int, int], dict[tuple[str, ...], int]] = {}
    skipped = 0
    for rec in records:
        zo = zone_of.get(rec.links[0])
        zd = zone_of.get(rec.links[-1])
        if zo is None or zd is None or zo == zd:
            skipped += 1
            continue
        od = (zo, zd)
        groups.setdefault(od, {})
        groups[od][rec.links] = groups[od].get(rec.links, 0) + 1
    if not groups:
        raise RuntimeError("no OD pair with zoned endpoints")

    lengths = {lid: network.links[lid].length for lid in network.link_order}
    observed = {
        od: [clustering.ObservedPath(links, count, sum(lengths[l] for l in links))
             for links, count in sorted(seqs.items())]
        for od, seqs in groups.items()
    }
    clusters = clustering.cluster_paths(observed, lengths, cfg.cut_threshold)

    # representative paths get stable ids; members map onto their representative
    rep_of: dict[tuple[int, int], dict[tuple[str, ...], str]] = {}
    paths: list[Path] = []
    for od in sorted(clusters.by_od):
        for cl in clusters.by_od[od]:
            rep_links = observed[od][cl.representative].links
            pid = f"P{len(paths):04d}"
            paths.append(Path(pid, od, rep_links))
            mapping = rep_of.setdefault(od, {})
            for m in cl.members:
                mapping[observed[od][m].links] = pid

    label_rows = []
    path_index = {p.id: i for i, p in enumerate(paths)}
    od_list: list[tuple[int, int]] = []
    od_index: dict[tuple[int, int], int] = {}
    for p in paths:
        if p.od_pair not in od_index:
            od_index[p.od_pair] = len(od_list)
            od_list.append(p.od_pair)
    assignments = []
    for rec in records:
        zo = zone_of.get(rec.links[0])
        zd = zone_of.get(rec.links[-1])
        if zo is None or zd is None or zo == zd:
            continue
        pid = rep_of[(zo, zd)][rec.links]
        label_rows.append((rec.trip_id, pid, zo, zd))
        assignments.append((rec.tod, path_index[pid], od_index[(zo, zd)]))

    amap = clustering.build_assignment_map(
        assignments, len(paths), len(od_list),
        [iv.index for iv in cfg.schedule.intervals])
    od_counts: dict[tuple[int, int, int], int] = {}
    for tod, _, od_i in assignments:
        key = (tod, *od_list[od_i])
        od_counts[key] = od_counts.get(key, 0) + 1

    io.write("gmm.json", _write_json({
        "K": model.K,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "bic": {str(k): v for k, v in bic_table.items()},
        "em_iterations": len(model.ll_history),
        "converged": model.converged,
        "n_points": int(len(points)),
        "n_trips_without_zone": skipped,
    }))
    io.write("zones.csv", _write_rows(
        ["link_id", "zone_id"],
        sorted((lid, z) for lid, z in zone_of.items())))
    io.write("paths.csv", _write_rows(
        ["path_id", "zone_o", "zone_d", "links"],
        [(p.id, p.od_pair[0], p.od_pair[1], "|".join(p.links)) for p in paths]))
    io.write("trip_labels.csv", _write_rows(["trip_id", "path_id", "zone_o", "zone_d"], label_rows))
    io.write("od_counts.csv", _write_rows(
        ["tod", "zone_o", "zone_d", "observed_trips"],
        [(t, o, d, c) for (t, o, d), c in sorted(od_counts.items())]))
    grows = []
    for tod in sorted(amap.by_tod):
        mat = amap.by_tod[tod].tocoo()
        for i, j, v in sorted(zip(mat.row.tolist(), mat.col.tolist(), mat.data.tolist())):
            od = od_list[j]
            grows.append((tod, paths[i].id, od[0], od[1], repr(float(v))))
    io.write("gmatrix.csv", _write_rows(["tod", "path_id", "zone_o", "zone_d", "share"], grows))
    io.finish()
    logger.info("cluster: K=%d zones, %d OD pairs, %d representative paths",
                model.K, len(od_list), len(paths))


def stage_estimate_flow(cfg: PipelineConfig) -> None:
    from .netmodel import build_incidence
    io = StageIO(cfg, "estimate-flow")
    io.require(*PREREQS["estimate-flow"])
    network = _load_updated_network(cfg)
    paths = _load_paths(cfg)
    zones = _load_zones(cfg)
    incidence = build_incidence(network, paths, zones)
    totals = json.loads((cfg.out_dir / "totals.json").read_text())
    x_tilde = {int(k): float(v) for k, v in totals["x_tilde"].items()}

    path_idx = {pid: i for i, pid in enumerate(incidence.path_ids)}
    od_idx = {od: i for i, od in enumerate(incidence.od_pairs)}
    g_by_tod: dict[int, np.ndarray] = {}
    with open(cfg.out_dir / "gmatrix.csv", newline="") as f:
        for row in csv.DictReader(f):
            tod = int(row["tod"])
            g = g_by_tod.setdefault(tod, np.zeros((incidence.n_paths, incidence.n_od)))
            g[path_idx[row["path_id"]], od_idx[(int(row["zone_o"]), int(row["zone_d"]))]] = \
                float(row["share"])

    priors: dict[int, dict[str, float]] = {}
    with open(cfg.out_dir / "link_priors.csv", newline="") as f:
        for row in csv.DictReader(f):
            priors.setdefault(int(row["tod"]), {})[row["link_id"]] = float(row["prior_flow"])

    n_days = max(int(totals.get("n_days", 1)), 1)
    od_scale: dict[tuple[int, int, int], float] = {}
    with open(cfg.out_dir / "od_counts.csv", newline="") as f:
        for row in csv.DictReader(f):
            key = (int(row["tod"]), int(row["zone_o"]), int(row["zone_d"]))
            od_scale[key] = int(row["observed_trips"]) / cfg.penetration_rate / n_days

    from .config import parse_bounds_policy
    policy, bound_scale = parse_bounds_policy(cfg.bounds_policy)

    settings = flowest.ADMMSettings(
        sigma=cfg.sigma, eps_abs=cfg.eps_abs, eps_rel=cfg.eps_rel,
        max_iter=cfg.max_iter_qp, scaling_iters=cfg.scaling_iters, polish=cfg.polish)

    problems: dict[int, flowest.FlowProblem] = {}
    import scipy.sparse as sp
    for iv in cfg.schedule.intervals:
        tod = iv.index
        xt = x_tilde.get(tod, 0.0)
        g = g_by_tod.get(tod)
        G = sp.csr_matrix(g) if g is not None else sp.csr_matrix((incidence.n_paths, incidence.n_od))
        w = np.zeros(incidence.n_links)
        zt = np.zeros(incidence.n_links)
        for lid, val in priors.get(tod, {}).items():
            e = incidence.link_ids.index(lid)
            w[e] = 1.0
            zt[e] = val
        capacity = np.array([network.capacity_for(lid, iv) for lid in incidence.link_ids])
        alpha = None
        if policy == "observed":
            # per-OD caps from the up-scaled observed counts keep the flat
            # directions of the objective at realistic magnitudes
            alpha = np.array([bound_scale * od_scale.get((tod, *od), 0.0)
                              for od in incidence.od_pairs])
        problems[tod] = flowest.FlowProblem(
            incidence=incidence, G=G, weight_diag=w, x_tilde=xt, z_tilde=zt,
            gamma=cfg.gamma, rho=cfg.rho, capacity=capacity, alpha=alpha)

    solutions, report = flowest.estimate_all_tods(problems, settings)

    rng = np.random.default_rng(cfg.flow_seed)
    path_rows, od_rows, link_rows, trips = [], [], [], []
    drift_by_tod = {}
    for tod in sorted(solutions):
        sol = solutions[tod]
        y_int, drift = flowest.round_path_flows(sol)
        drift_by_tod[tod] = drift
        iv = cfg.schedule.by_index(tod)
        for j, pid in enumerate(incidence.path_ids):
            if sol.y[j] > 1e-9 or y_int[j] > 0:
                path_rows.append((tod, pid, repr(float(sol.y[j])), int(y_int[j])))
            count = int(y_int[j])
            if count > 0:
                departures = iv.start_s + np.sort(rng.random(count)) * iv.seconds
                path = paths[path_idx[pid]]
                for r, dep in enumerate(departures):
                    trips.append(SimTrip(f"q{tod}_{pid}_{r}", pid, path.links, float(dep)))
        for i, od in enumerate(incidence.od_pairs):
            if sol.x[i] > 1e-9:
                od_rows.append((tod, od[0], od[1], repr(float(sol.x[i]))))
        for e, lid in enumerate(incidence.link_ids):
            if sol.z[e] > 1e-9:
                link_rows.append((tod, lid, repr(float(sol.z[e]))))

    for tod, entry in report.items():
        entry["rounding_drift"] = drift_by_tod.get(tod)

    trips.sort(key=lambda t: (t.departure_time, t.trip_id))
    io.write("path_flows.csv", _write_rows(["tod", "path_id", "flow", "flow_int"], path_rows))
    io.write("od_flows.csv", _write_rows(["tod", "zone_o", "zone_d", "flow"], od_rows))
    io.write("link_flow_est.csv", _write_rows(["tod", "link_id", "flow"], link_rows))
    io.write("qp_report.json", _write_json({str(k): v for k, v in report.items()}))
    io.write("trip_table.csv", lambda tmp: mesosim.write_trip_table(tmp, trips))
    io.finish()
    logger.info("estimate-flow: %d TOD intervals, %d trips in table",
                len(solutions), len(trips))


def stage_simulate(cfg: PipelineConfig) -> None:
    io = StageIO(cfg, "simulate")
    io.require(*PREREQS["simulate"])
    network = _load_updated_network(cfg)
    trips = mesosim.load_trip_table(cfg.out_dir / "trip_table.csv")
    result = mesosim.run_simulation(network, trips, cfg.theta0, cfg.schedule, seed=cfg.sim_seed)
    main = mesosim.apply_warmup_cooldown(result, cfg.schedule)
    io.write("sim_trips.csv", lambda tmp: mesosim.write_sim_trips(tmp, result))
    io.write("sim_link_flows.csv",
             lambda tmp: mesosim.write_link_flows(tmp, result, network, cfg.schedule))
    io.write("sim_summary.json", _write_json({
        "requested": result.requested,
        "completed": result.completed_count,
        "loaded_fraction": result.loaded_fraction,
        "loaded_fraction_main": main.loaded_fraction,
        "rejected": len(result.rejected_trips),
        "seed": cfg.sim_seed,
        "theta": dict(zip(THETA_FIELDS, cfg.theta0.to_vector().tolist())),
    }))
    io.finish()
    logger.info("simulate: %.1f%% of %d trips completed",
                100 * result.loaded_fraction, result.requested)


def stage_calibrate(cfg: PipelineConfig) -> None:
    io = StageIO(cfg, "calibrate")
    io.require(*PREREQS["calibrate"])
    network = _load_updated_network(cfg)
    trips = mesosim.load_trip_table(cfg.out_dir / "trip_table.csv")
    records = _labeled_records(cfg, network)
    main_idx = {iv.index for iv in cfg.schedule.main_intervals}
    observed = [r for r in records if r.tod in main_idx]
    if not observed:
        raise RuntimeError("no observed trips in the main TOD intervals")

    loss_fn = cal.make_sim_loss(network, cfg.schedule, trips, observed, template=cfg.theta0)
    theta0_vec = cfg.theta0.to_vector()

    n_tune_evals = 0
    if cfg.spsa_a is None or cfg.spsa_c is None:
        gains, n_tune_evals = cal.tune_gains(loss_fn, theta0_vec, cfg.theta_box,
                                             cfg.spsa_max_iter, seed=cfg.spsa_seed)
        if cfg.spsa_a is not None or cfg.spsa_c is not None:
            gains = cal.GainSchedule(
                a=cfg.spsa_a if cfg.spsa_a is not None else gains.a,
                c=cfg.spsa_c if cfg.spsa_c is not None else gains.c,
                A=cfg.spsa_A if cfg.spsa_A is not None else gains.A,
                alpha_exp=cfg.alpha_exp, gamma_exp=cfg.gamma_exp)
    else:
        gains = cal.GainSchedule(
            a=cfg.spsa_a, c=cfg.spsa_c,
            A=cfg.spsa_A if cfg.spsa_A is not None else 0.1 * cfg.spsa_max_iter,
            alpha_exp=cfg.alpha_exp, gamma_exp=cfg.gamma_exp)

    _, tt0, _ = cal.loss(cfg.theta0, trips, observed, network, cfg.schedule, seed=cfg.spsa_seed)
    eps = cfg.eps_fraction * tt0

    run = cal.spsa_calibrate(loss_fn, theta0_vec, cfg.theta_box, gains, eps,
                             cfg.spsa_max_iter, seed=cfg.spsa_seed)
    theta_opt = SimParams.from_vector(run.theta_opt, cfg.theta0)

    final_mse, final_tt, match = cal.loss(theta_opt, trips, observed, network,
                                          cfg.schedule, seed=cfg.sim_seed)
    final_result = mesosim.run_simulation(network, trips, theta_opt, cfg.schedule,
                                          seed=cfg.sim_seed)
    final_main = mesosim.apply_warmup_cooldown(final_result, cfg.schedule)

    log_rows = []
    for k in range(run.iterations):
        lp, lm = run.loss_history[k]
        theta_k = run.theta_history[k + 1]
        log_rows.append((k, repr(float(lp)), repr(float(lm)),
                         repr(float(run.total_travel_time_history[k])),
                         *[repr(float(v)) for v in theta_k]))
    io.write("calibration_log.csv", _write_rows(
        ["iteration", "loss_plus", "loss_minus", "total_travel_time", *THETA_FIELDS], log_rows))

    def write_theta(tmp):
        with open(tmp, "w") as f:
            for name, v in zip(THETA_FIELDS, run.theta_opt):
                f.write(f"{name} = {float(v)!r}\n")
    io.write("theta_opt.txt", write_theta)
    io.write("calib_summary.json", _write_json({
        "status": run.status,
        "iterations": run.iterations,
        "n_evaluations": run.n_evaluations,
        "n_tune_evaluations": n_tune_evals,
        "gains": {"a": gains.a, "c": gains.c, "A": gains.A,
                  "alpha_exp": gains.alpha_exp, "gamma_exp": gains.gamma_exp},
        "eps": eps,
        "theta_opt": dict(zip(THETA_FIELDS, run.theta_opt.tolist())),
        "final_mse": final_mse,
        "final_total_travel_time": final_tt,
        "throughput": final_main.loaded_fraction,
        "throughput_all": final_result.loaded_fraction,
        "n_observed": match.n_observed,
        "n_matched": match.n_matched,
    }))
    io.write("final_sim_trips.csv", lambda tmp: mesosim.write_sim_trips(tmp, final_result))
    io.finish()
    logger.info("calibrate: %s after %d iterations, final MSE %.1f",
                run.status, run.iterations, final_mse)


def stage_baseline(cfg: PipelineConfig) -> None:
    io = StageIO(cfg, "baseline")
    io.require(*PREREQS["baseline"])
    network = _load_updated_network(cfg)
    records = _labeled_records(cfg, network)
    theta_opt = _theta_opt(cfg)
    main_idx = {iv.index for iv in cfg.schedule.main_intervals}

    days = sorted({r.day for r in records})
    metrics: dict[str, dict] = {}
    for kind in cal.BASELINE_KINDS:
        per_day = []
        for d, day in enumerate(days):
            day_records = [r for r in records if r.day == day]
            obs_main = [r for r in day_records if r.tod in main_idx]
            m = cal.run_baseline(kind, day_records, cfg.penetration_rate, theta_opt,
                                 network, cfg.schedule, cfg.theta_box,
                                 seed=cfg.baseline_seed + d, jitter_s=cfg.baseline_jitter_s)
            # evaluate the MSE against the day's own main-interval observations
            per_day.append({"day": day, "throughput": m.throughput, "mse": m.mse,
                            "n_trips": m.n_trips, "n_matched": m.n_matched,
                            "n_observed_main": len(obs_main)})
        mses = [d["mse"] for d in per_day if not np.isnan(d["mse"])]
        metrics[kind] = {
            "per_day": per_day,
            "mse": float(np.mean(mses)) if mses else float("nan"),
            "throughput": float(np.mean([d["throughput"] for d in per_day])),
            "theta": dict(zip(THETA_FIELDS,
                              (cal.max_capacity_corner(cfg.theta_box, theta_opt)
                               if kind == "upsample_max_capacity" else theta_opt)
                              .to_vector().tolist())),
        }
    io.write("baseline_metrics.json", _write_json(metrics))
    io.finish()
    logger.info("baseline: %s", {k: round(v["mse"], 1) for k, v in metrics.items()})


def emit_tod_breakdown(cfg: PipelineConfig, network: Network,
                       observed: list[ingest.TrajectoryRecord]) -> list[tuple]:
    """Per-main-TOD comparison of observed and calibrated-simulation travel
    times."""
    sim_trips = []
    with open(cfg.out_dir / "final_sim_trips.csv", newline="") as f:
        for row in csv.DictReader(f):
            if row["completed"] == "1" and row["travel_time_s"]:
                sim_trips.append((row["path_id"], float(row["departure_s"]),
                                  float(row["travel_time_s"]), int(row["tod"])))
    rows = []
    for iv in cfg.schedule.main_intervals:
        obs = [r for r in observed if r.tod == iv.index]
        sims = [t for t in sim_trips if t[3] == iv.index]
        fake = _MiniResult([_MiniTrip(pid, dep, tt) for pid, dep, tt, _ in sims])
        pairs, report = cal.match_travel_times(obs, fake, cfg.schedule)
        obs_mean = float(np.mean([r.travel_time for r in obs])) if obs else float("nan")
        sim_mean = float(np.mean([p[0] for p in pairs])) if pairs else float("nan")
        rows.append((iv.index, iv.label, len(obs), report.n_matched,
                     f"{obs_mean:.2f}", f"{sim_mean:.2f}",
                     f"{report.mse:.4f}" if pairs else "nan"))
    return rows


class _MiniTrip:
    def __init__(self, path_id, departure, travel_time):
        self.path_id = path_id
        self.departure = departure
        self.travel_time = travel_time
        self.completed = True


class _MiniResult:
    def __init__(self, trips):
        self.trips = trips


def stage_report(cfg: PipelineConfig) -> None:
    io = StageIO(cfg, "report")
    io.require(*PREREQS["report"])
    _check_provenance(cfg)
    network = _load_updated_network(cfg)
    records = _labeled_records(cfg, network)
    main_idx = {iv.index for iv in cfg.schedule.main_intervals}
    observed = [r for r in records if r.tod in main_idx]

    calib = json.loads((cfg.out_dir / "calib_summary.json").read_text())
    baselines = json.loads((cfg.out_dir / "baseline_metrics.json").read_text())
    qp = json.loads((cfg.out_dir / "qp_report.json").read_text())
    totals = json.loads((cfg.out_dir / "totals.json").read_text())

    comparison = [
        ("Baseline 1", "Up-sampling", "Adjusted parameters with higher capacity",
         f"{baselines['upsample_max_capacity']['throughput']:.3f}",
         f"{baselines['upsample_max_capacity']['mse']:.2f}"),
        ("Baseline 2", "Up-sampling", "Calibrated parameters",
         f"{baselines['upsample_calibrated']['throughput']:.3f}",
         f"{baselines['upsample_calibrated']['mse']:.2f}"),
        ("Our method", "Network flow estimation", "Calibrated parameters",
         f"{calib['throughput']:.3f}", f"{calib['final_mse']:.2f}"),
    ]
    breakdown = emit_tod_breakdown(cfg, network, observed)

    manifest = json.loads((cfg.out_dir / "manifest.json").read_text())
    timings = {s: v.get("elapsed_s") for s, v in manifest.get("stages", {}).items()}

    io.write("comparison.csv", _write_rows(
        ["scenario", "network_flow", "capacity_parameters", "throughput", "mse_travel_time"],
        comparison))
    io.write("tod_breakdown.csv", _write_rows(
        ["tod", "label", "n_observed", "n_matched", "observed_mean_tt_s",
         "simulated_mean_tt_s", "mse"], breakdown))
    io.write("report.json", _write_json({
        "comparison": [dict(zip(("scenario", "network_flow", "capacity_parameters",
                                 "throughput", "mse"), row)) for row in comparison],
        "tod_breakdown": [dict(zip(("tod", "label", "n_observed", "n_matched",
                                    "observed_mean_tt_s", "simulated_mean_tt_s", "mse"), row))
                          for row in breakdown],
        "flow_estimation": qp,
        "totals": totals,
        "calibration": calib,
        "stage_timings_s": timings,
    }))
    io.finish()
    logger.info("report: wrote comparison with %d rows", len(comparison))


def _check_provenance(cfg: PipelineConfig) -> None:
    """Refuse to report over artifacts that do not match the manifest."""
    mpath = cfg.out_dir / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError("manifest.json missing; run the pipeline stages first")
    manifest = json.loads(mpath.read_text())
    stages = manifest.get("stages", {})
    for stage, names in ARTIFACTS.items():
        if stage == "report" or stage not in stages:
            continue
        recorded = stages[stage].get("outputs", {})
        for name in names:
            p = cfg.out_dir / name
            if name in recorded and p.exists():
                if _digest(p) != recorded[name]:
                    raise ConfigError(
                        f"artifact {name} does not match the manifest entry from "
                        f"stage {stage!r}; re-run that stage")


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "cluster": stage_cluster,
    "estimate-flow": stage_estimate_flow,
    "simulate": stage_simulate,
    "calibrate": stage_calibrate,
    "baseline": stage_baseline,
    "report": stage_report,
}


def run_stage(stage: str, cfg: PipelineConfig) -> int:
    """Execute one stage, mapping failures onto the documented exit codes."""
    try:
        STAGE_FUNCS[stage](cfg)
        return EXIT_OK
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_INVALID
    except Exception as exc:
        logger.exception("stage %s failed: %s", stage, exc)
        return EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Entry point

def _scenario_config() -> str:
    from .config import TEMPLATE
    return TEMPLATE.replace("gmm_k = bic:3..8", "gmm_k = bic:3..6")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesocal",
                                     description="Trajectory-driven mesoscopic simulation calibration")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init-config", help="write a documented config template")
    p_init.add_argument("--out", default="config.ini")

    p_scen = sub.add_parser("make-scenario", help="generate the bundled synthetic scenario")
    p_scen.add_argument("--out", required=True)
    p_scen.add_argument("--seed", type=int, default=20220308)
    p_scen.add_argument("--grid-n", type=int, default=8)
    p_scen.add_argument("--day-total", type=int, default=5200)
    p_scen.add_argument("--days", type=int, default=3)
    p_scen.add_argument("--penetration", type=float, default=0.075)

    for stage in STAGE_ORDER:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override stage seeds")
        p.add_argument("--out", default=None, help="override the output directory")

    p_all = sub.add_parser("run-all", help="run every stage in order")
    p_all.add_argument("--config", required=True)
    p_all.add_argument("--seed", type=int, default=None)
    p_all.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "init-config":
        write_template(args.out)
        print(f"wrote {args.out}")
        return EXIT_OK

    if args.command == "make-scenario":
        spec = scenario.ScenarioSpec(
            grid_n=args.grid_n, day_total=args.day_total, n_days=args.days,
            penetration=args.penetration, seed=args.seed)
        truth = scenario.write_scenario(spec, args.out, config_text=_scenario_config())
        print(f"scenario written to {args.out}: {truth['n_sampled_trips']} sampled trips, "
              f"{truth['day_total']} planted trips/day")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_INVALID
    if args.out:
        cfg.out_dir = FsPath(args.out).resolve()
    if args.seed is not None:
        cfg.sim_seed = args.seed
        cfg.spsa_seed = args.seed
        cfg.baseline_seed = args.seed
        cfg.flow_seed = args.seed
        cfg.gmm_seed = args.seed

    if args.command == "run-all":
        for stage in STAGE_ORDER:
            code = run_stage(stage, cfg)
            if code != EXIT_OK:
                return code
        return EXIT_OK

    return run_stage(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())

"""Flat key-value pipeline configuration with sections, plus a documented
template. Paths are resolved relative to the config file."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesosim import THETA_FIELDS, SimParams, ThetaBox, default_theta_box
from .netmodel import TODInterval, TODSchedule, default_schedule


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


TEMPLATE = """\
[paths]
; all paths are relative to this file
out_dir = out
links = links.csv
nodes = nodes.csv
trajectories = trajectories.csv

[ingest]
penetration_rate = 0.075   ; fraction of real trips present in the sample, (0, 1]
min_speed_mph = 5          ; trips slower than this are dropped (inclusive bound)
max_speed_mph = 100        ; trips faster than this are dropped (inclusive bound)
speed_percentile = 0.80    ; traversal-speed percentile that replaces mapped speed limits
min_obs = 10               ; traversals needed before a limit is replaced
measured_links = top:12    ; link-flow prior locations: top:K by coverage, or id list

[tod]
; index:label:start_hour:end_hour, comma separated; must cover 0..24
intervals = 1:AM early:0:7, 2:AM peak:7:10, 3:Midday:10:15, 4:PM peak:15:19, 5:PM late:19:22, 6:Night:22:24

[cluster]
gmm_k = bic:3..8           ; fixed component count, or bic:LO..HI model selection
gmm_seed = 7
cut_threshold = 0.3        ; path clusters merge while 1 - overlap <= threshold

[flow]
gamma = 1.0                ; weight of the assignment-consistency term
rho = 1.0                  ; weight of the link-flow prior term
bounds_policy = observed:2.0  ; OD caps: observed:K scales per-OD observed totals, total uses x_tilde
eps_abs = 1e-6
eps_rel = 1e-6
max_iter = 20000
sigma = 0.1                ; splitting penalty (adapted by residual balancing)
scaling_iters = 10
polish = true
flow_seed = 5              ; departure spreading in the built trip table

[sim]
; initial supply parameters, also the calibration start
capacity_scale = 0.8
junction_delay = 6.0
min_headway = 3.0
speed_factor_mean = 0.9
speed_factor_std = 0.1
departure_jitter = 120
seed = 1

[theta_box]
capacity_scale = 0.5:2.0
junction_delay = 0:10
min_headway = 1:4
speed_factor_mean = 0.8:1.2
speed_factor_std = 0:0.2
departure_jitter = 0:300

[calibrate]
max_iter = 40
eps_fraction = 0.001       ; stop when total travel time changes by less than this fraction
seed = 11
gain_a = auto              ; auto sizes the first step at ~5% of the box
gain_c = auto              ; auto uses the replicate-run noise level
gain_offset = auto         ; auto is 10% of max_iter
alpha_exp = 0.602
gamma_exp = 0.101

[baseline]
seed = 13
jitter_s = 300             ; departure spread applied to replicated trips
"""


@dataclass
class PipelineConfig:
    base_dir: Path
    out_dir: Path
    links: Path
    nodes: Path
    trajectories: Path

    penetration_rate: float
    min_speed_mph: float
    max_speed_mph: float
    speed_percentile: float
    min_obs: int
    measured_links: str

    schedule: TODSchedule

    gmm_k: str
    gmm_seed: int
    cut_threshold: float

    gamma: float
    rho: float
    bounds_policy: str
    eps_abs: float
    eps_rel: float
    max_iter_qp: int
    sigma: float
    scaling_iters: int
    polish: bool
    flow_seed: int

    theta0: SimParams
    sim_seed: int
    theta_box: ThetaBox

    spsa_max_iter: int
    eps_fraction: float
    spsa_seed: int
    spsa_a: float | None
    spsa_c: float | None
    spsa_A: float | None
    alpha_exp: float
    gamma_exp: float

    baseline_seed: int
    baseline_jitter_s: float

    raw_text: str = ""

    def validate_inputs(self) -> None:
        for name in ("links", "nodes", "trajectories"):
            p = getattr(self, name)
            if not p.exists():
                raise ConfigError(f"missing input file for {name}: {p}")


def _parse_schedule(text: str) -> TODSchedule:
    intervals = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 4:
            raise ConfigError(f"bad TOD interval spec {chunk!r}")
        idx, label, start, end = parts
        intervals.append(TODInterval(int(idx), label.strip(), float(start), float(end)))
    try:
        return TODSchedule(tuple(intervals))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_box(section) -> ThetaBox:
    lo, hi = [], []
    for name in THETA_FIELDS:
        raw = section.get(name)
        if raw is None:
            raise ConfigError(f"theta_box missing {name}")
        try:
            a, b = (float(v) for v in raw.split(":"))
        except ValueError:
            raise ConfigError(f"bad theta_box entry {name} = {raw!r}") from None
        lo.append(a)
        hi.append(b)
    try:
        return ThetaBox(np.array(lo), np.array(hi))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _auto_or_float(raw: str) -> float | None:
    raw = raw.strip().lower()
    return None if raw == "auto" else float(raw)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    text = path.read_text()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    base = path.parent

    def getpath(section, key):
        try:
            return (base / parser.get(section, key)).resolve()
        except (configparser.NoSectionError, configparser.NoOptionError) as exc:
            raise ConfigError(str(exc)) from exc

    try:
        ing = parser["ingest"]
        clu = parser["cluster"]
        flow = parser["flow"]
        sim = parser["sim"]
        cal = parser["calibrate"]
        bas = parser["baseline"]

        penetration = ing.getfloat("penetration_rate")
        if not 0.0 < penetration <= 1.0:
            raise ConfigError(f"penetration_rate must be in (0, 1], got {penetration}")
        min_mph = ing.getfloat("min_speed_mph", 5.0)
        max_mph = ing.getfloat("max_speed_mph", 100.0)
        if not 0 <= min_mph < max_mph:
            raise ConfigError("speed filter bounds must satisfy 0 <= min < max")
        pct = ing.getfloat("speed_percentile", 0.80)
        if not 0.0 < pct < 1.0:
            raise ConfigError("speed_percentile must be in (0, 1)")
        cut = clu.getfloat("cut_threshold", 0.3)
        if not 0.0 < cut < 1.0:
            raise ConfigError("cut_threshold must be in (0, 1)")
        gmm_k = clu.get("gmm_k", "bic:3..8").strip()
        _parse_gmm_k(gmm_k)  # fail fast on bad syntax
        parse_bounds_policy(flow.get("bounds_policy", "observed:2.0"))

        theta0 = SimParams(
            capacity_scale=sim.getfloat("capacity_scale"),
            junction_delay=sim.getfloat("junction_delay"),
            min_headway=sim.getfloat("min_headway"),
            speed_factor_mean=sim.getfloat("speed_factor_mean"),
            speed_factor_std=sim.getfloat("speed_factor_std"),
            departure_jitter=sim.getfloat("departure_jitter"),
        )
        box = _parse_box(parser["theta_box"]) if parser.has_section("theta_box") else default_theta_box()
        if not box.contains(theta0.to_vector()):
            raise ConfigError("sim parameters fall outside theta_box")
        eps_fraction = cal.getfloat("eps_fraction", 0.001)
        if eps_fraction <= 0:
            raise ConfigError("eps_fraction must be > 0")

        cfg = PipelineConfig(
            base_dir=base,
            out_dir=(base / parser.get("paths", "out_dir", fallback="out")).resolve(),
            links=getpath("paths", "links"),
            nodes=getpath("paths", "nodes"),
            trajectories=getpath("paths", "trajectories"),
            penetration_rate=penetration,
            min_speed_mph=min_mph,
            max_speed_mph=max_mph,
            speed_percentile=pct,
            min_obs=ing.getint("min_obs", 10),
            measured_links=ing.get("measured_links", "top:12").strip(),
            schedule=_parse_schedule(parser.get("tod", "intervals")) if parser.has_section("tod") else default_schedule(),
            gmm_k=gmm_k,
            gmm_seed=clu.getint("gmm_seed", 7),
            cut_threshold=cut,
            gamma=flow.getfloat("gamma", 1.0),
            rho=flow.getfloat("rho", 1.0),
            bounds_policy=flow.get("bounds_policy", "observed:2.0").strip(),
            eps_abs=flow.getfloat("eps_abs", 1e-6),
            eps_rel=flow.getfloat("eps_rel", 1e-6),
            max_iter_qp=flow.getint("max_iter", 20000),
            sigma=flow.getfloat("sigma", 0.1),
            scaling_iters=flow.getint("scaling_iters", 10),
            polish=flow.getboolean("polish", True),
            flow_seed=flow.getint("flow_seed", 5),
            theta0=theta0,
            sim_seed=sim.getint("seed", 1),
            theta_box=box,
            spsa_max_iter=cal.getint("max_iter", 40),
            eps_fraction=eps_fraction,
            spsa_seed=cal.getint("seed", 11),
            spsa_a=_auto_or_float(cal.get("gain_a", "auto")),
            spsa_c=_auto_or_float(cal.get("gain_c", "auto")),
            spsa_A=_auto_or_float(cal.get("gain_offset", "auto")),
            alpha_exp=cal.getfloat("alpha_exp", 0.602),
            gamma_exp=cal.getfloat("gamma_exp", 0.101),
            baseline_seed=bas.getint("seed", 13),
            baseline_jitter_s=bas.getfloat("jitter_s", 300.0),
            raw_text=text,
        )
    except (configparser.Error, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_bounds_policy(raw: str) -> tuple[str, float]:
    """Returns ("total", 0) or ("observed", scale >= 1)."""
    raw = raw.strip().lower()
    if raw == "total":
        return "total", 0.0
    if raw.startswith("observed:"):
        try:
            scale = float(raw.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad bounds_policy {raw!r}") from None
        if scale < 1.0:
            raise ConfigError("observed bounds scale must be >= 1")
        return "observed", scale
    raise ConfigError(f"bad bounds_policy {raw!r}")


def _parse_gmm_k(raw: str) -> tuple[str, int, int]:
    """Returns ("fixed", k, k) or ("bic", lo, hi)."""
    raw = raw.strip().lower()
    if raw.startswith("bic:"):
        lo_hi = raw[4:].split("..")
        if len(lo_hi) != 2:
            raise ConfigError(f"bad gmm_k spec {raw!r}")
        lo, hi = int(lo_hi[0]), int(lo_hi[1])
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad gmm_k range {raw!r}")
        return "bic", lo, hi
    k = int(raw)
    if k < 1:
        raise ConfigError("gmm_k must be >= 1")
    return "fixed", k, k


def parse_gmm_k(raw: str) -> tuple[str, int, int]:
    return _parse_gmm_k(raw)


def write_template(path) -> None:
    with open(path, "w") as f:
        f.write(TEMPLATE)

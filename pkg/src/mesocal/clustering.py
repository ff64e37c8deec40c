"""Demand and path-set clustering: Gaussian-mixture zoning of trip endpoints,
length-weighted Jaccard path similarity with agglomerative grouping, and the
per-TOD OD-to-path assignment shares."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.special import logsumexp

from .netmodel import Network, Zone

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Gaussian mixture (EM), 2-d points

@dataclass
class GMMModel:
    means: np.ndarray        # (K, 2)
    covariances: np.ndarray  # (K, 2, 2)
    weights: np.ndarray      # (K,)
    ll_history: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def K(self) -> int:
        return len(self.weights)

    def log_responsibilities(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (log resp (n, K), per-point log-likelihood (n,))."""
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        log_p = np.empty((n, self.K))
        for k in range(self.K):
            log_p[:, k] = np.log(self.weights[k]) + _mvn_logpdf(pts, self.means[k], self.covariances[k])
        norm = logsumexp(log_p, axis=1)
        return log_p - norm[:, None], norm

    def responsibilities(self, points: np.ndarray) -> np.ndarray:
        log_r, _ = self.log_responsibilities(points)
        return np.exp(log_r)

    def predict(self, points: np.ndarray) -> np.ndarray:
        log_r, _ = self.log_responsibilities(points)
        return np.argmax(log_r, axis=1)

    def log_likelihood(self, points: np.ndarray) -> float:
        _, norm = self.log_responsibilities(points)
        return float(np.sum(norm))

    def bic(self, points: np.ndarray) -> float:
        # free parameters: K-1 weights + 2K means + 3K covariance entries
        n = len(points)
        n_params = 6 * self.K - 1
        return -2.0 * self.log_likelihood(points) + n_params * np.log(n)


def _mvn_logpdf(pts: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    diff = pts - mean
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, diff.T)
    maha = np.sum(sol ** 2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (maha + logdet + 2.0 * np.log(2.0 * np.pi))


def _floor_spd(cov: np.ndarray, floor: float) -> tuple[np.ndarray, bool]:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if np.all(vals >= floor):
        return cov, False
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, True


def _kmeanspp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(pts)
    centers = [pts[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((pts - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(pts[rng.integers(n)])
            continue
        centers.append(pts[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def fit_gmm(points, K: int, seed: int = 0, *, tol: float = 1e-6,
            max_iter: int = 500, cov_floor: float = COV_FLOOR) -> GMMModel:
    """EM fit of a K-component full-covariance Gaussian mixture.

    Runs until the relative log-likelihood change drops below tol or
    max_iter iterations. The log-likelihood is checked to be non-decreasing
    each iteration; a decrease beyond round-off slack raises.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    n = len(pts)
    if K < 1 or K > n:
        raise ValueError(f"need 1 <= K <= n points, got K={K}, n={n}")

    rng = np.random.default_rng(seed)
    means = _kmeanspp_init(pts, K, rng)
    base_cov = np.cov(pts.T) if n > 1 else np.eye(2)
    base_cov, _ = _floor_spd(np.atleast_2d(base_cov) * 1.0 + np.eye(2) * cov_floor, cov_floor)
    covs = np.array([base_cov.copy() for _ in range(K)])
    weights = np.full(K, 1.0 / K)

    model = GMMModel(means, covs, weights)
    prev_ll = -np.inf
    floored_any = False
    for it in range(max_iter):
        log_r, norm = model.log_responsibilities(pts)
        ll = float(np.sum(norm))
        if ll < prev_ll - 1e-9 * max(1.0, abs(prev_ll)):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}: {prev_ll} -> {ll}")
        model.ll_history.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= tol * max(1.0, abs(prev_ll)):
            model.converged = True
            break
        prev_ll = ll

        r = np.exp(log_r)
        nk = r.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        model.weights = nk / n
        model.means = (r.T @ pts) / nk[:, None]
        for k in range(K):
            diff = pts - model.means[k]
            cov = (r[:, k, None] * diff).T @ diff / nk[k]
            cov, floored = _floor_spd(cov, cov_floor)
            floored_any = floored_any or floored
            model.covariances[k] = cov
    if floored_any:
        warnings.warn("degenerate GMM component covariance floored", RuntimeWarning)
    return model


def select_k_bic(points, k_range: Iterable[int], seed: int = 0) -> tuple[GMMModel, dict[int, float]]:
    """Fit one model per K and keep the minimum-BIC one."""
    pts = np.asarray(points, dtype=float)
    table: dict[int, float] = {}
    best: tuple[float, GMMModel] | None = None
    for k in k_range:
        model = fit_gmm(pts, k, seed=seed)
        b = model.bic(pts)
        table[k] = b
        if best is None or b < best[0]:
            best = (b, model)
    if best is None:
        raise ValueError("empty K range")
    return best[1], table


def assign_zones(network: Network, endpoints: Iterable[tuple[str, int]]) -> list[Zone]:
    """Majority-vote zoning: each link with endpoint evidence takes the modal
    component label among its endpoints, ties to the lower label. Links with
    no endpoints stay unassigned."""
    votes: dict[str, dict[int, int]] = {}
    for link_id, label in endpoints:
        if link_id not in network.links:
            continue
        tally = votes.setdefault(link_id, {})
        tally[label] = tally.get(label, 0) + 1
    zones: dict[int, Zone] = {}
    for link_id, tally in votes.items():
        label = min(tally, key=lambda z: (-tally[z], z))
        zones.setdefault(label, Zone(label)).member_links.add(link_id)
    return [zones[z] for z in sorted(zones)]


# ---------------------------------------------------------------------------
# Path similarity and clustering

def weighted_jaccard(links_a: Sequence[str], links_b: Sequence[str],
                     length_of: Mapping[str, float]) -> float:
    """Length-weighted Jaccard overlap of two link sets in [0, 1]."""
    a, b = set(links_a), set(links_b)
    union = a | b
    if not union:
        return 0.0
    # sorted iteration keeps the sum order, and so the result, symmetric
    inter_len = sum(length_of[l] for l in sorted(a & b))
    union_len = sum(length_of[l] for l in sorted(union))
    if union_len <= 0:
        return 0.0
    return inter_len / union_len


def jaccard_similarity(path_i: int, path_j: int, psi_len: sp.spmatrix) -> float:
    """Same measure on rows of the path-by-link length incidence matrix."""
    ri = psi_len.getrow(path_i).toarray().ravel()
    rj = psi_len.getrow(path_j).toarray().ravel()
    union = np.maximum(ri, rj).sum()
    if union <= 0:
        return 0.0
    return float(np.minimum(ri, rj).sum() / union)


@dataclass
class ObservedPath:
    links: tuple[str, ...]
    count: int
    length: float


@dataclass
class PathCluster:
    members: list[int]          # indices into the OD group's observed paths
    representative: int
    observations: int


@dataclass
class PathClusterSet:
    by_od: dict[tuple[int, int], list[PathCluster]]

    @property
    def n_representatives(self) -> int:
        return sum(len(cl) for cl in self.by_od.values())


def cluster_paths(groups: Mapping[tuple[int, int], Sequence[ObservedPath]],
                  lengths: Mapping[str, float],
                  cut_threshold: float = 0.3) -> PathClusterSet:
    """Group each OD pair's observed paths by 1 - Jaccard distance with
    average linkage, cutting merges above cut_threshold. The representative
    is the most-observed member; ties go to the shorter path."""
    if not 0.0 < cut_threshold < 1.0:
        raise ValueError("cut_threshold must be in (0, 1)")
    out: dict[tuple[int, int], list[PathCluster]] = {}
    for od, paths in groups.items():
        if not paths:
            raise ValueError(f"empty path group for OD {od}")
        n = len(paths)
        if n == 1:
            out[od] = [PathCluster([0], 0, paths[0].count)]
            continue
        dist = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                d = 1.0 - weighted_jaccard(paths[i].links, paths[j].links, lengths)
                dist[i, j] = dist[j, i] = d
        condensed = dist[np.triu_indices(n, k=1)]
        Z = linkage(condensed, method="average")
        labels = fcluster(Z, t=cut_threshold, criterion="distance")
        clusters: list[PathCluster] = []
        for lab in sorted(set(labels)):
            members = [i for i in range(n) if labels[i] == lab]
            rep = min(members, key=lambda i: (-paths[i].count, paths[i].length, paths[i].links))
            clusters.append(PathCluster(members, rep, sum(paths[i].count for i in members)))
        out[od] = clusters
    return PathClusterSet(out)


# ---------------------------------------------------------------------------
# Assignment shares

@dataclass
class AssignmentMap:
    """Per-TOD share of each OD pair's trips on each representative path."""

    by_tod: dict[int, sp.csr_matrix]   # each (n_paths x n_od)
    n_paths: int
    n_od: int

    def shares(self, tod: int) -> sp.csr_matrix:
        if tod in self.by_tod:
            return self.by_tod[tod]
        return sp.csr_matrix((self.n_paths, self.n_od))


def build_assignment_map(assignments: Iterable[tuple[int, int, int]],
                         n_paths: int, n_od: int,
                         tods: Iterable[int]) -> AssignmentMap:
    """Pool (tod, path index, od index) trip labels into per-TOD share
    matrices with per-OD columns normalized to 1. OD pairs without
    observations in a TOD keep an all-zero column."""
    counts: dict[int, np.ndarray] = {t: np.zeros((n_paths, n_od)) for t in tods}
    for tod, path_idx, od_idx in assignments:
        if tod not in counts:
            raise ValueError(f"trip labeled with unknown TOD interval {tod}")
        counts[tod][path_idx, od_idx] += 1.0
    by_tod = {}
    for tod, mat in counts.items():
        col = mat.sum(axis=0)
        observed = col > 0
        shares = np.zeros_like(mat)
        shares[:, observed] = mat[:, observed] / col[observed]
        if not observed.all():
            logger.debug("TOD %s: %d OD pairs without observations", tod, int((~observed).sum()))
        by_tod[tod] = sp.csr_matrix(shares)
    return AssignmentMap(by_tod, n_paths, n_od)

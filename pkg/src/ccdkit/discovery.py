"""Joint novelty discovery: count estimation, clustering, filtering, merging.

The pooled novel representations from all stages are clustered in one shot:
affinity propagation estimates how many classes there are, a diagonal
Gaussian mixture assigns soft memberships, low-confidence samples are
dropped, each cluster keeps only its core members nearest the mean, and
clusters closer than the calibrated threshold are fused. The threshold is
calibrated once on the labeled classes so novel classes are discovered at
the same granularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .numerics import squared_distances


@dataclass
class APConfig:
    damping: float = 0.9
    max_iters: int = 200
    convergence_window: int = 15
    preference: float | str = "median"  # "median" of off-diagonal similarities
    # When set, the preference is this quantile of the off-diagonal
    # similarities of the input itself, so the granularity adapts to the
    # scale and size of whatever is being clustered ("median" is 0.5).
    preference_quantile: float | None = None

    def __post_init__(self):
        if not (0.5 <= self.damping < 1.0):
            raise ValueError("damping must lie in [0.5, 1)")
        if self.max_iters < self.convergence_window:
            raise ValueError("max_iters must cover the convergence window")
        if self.preference_quantile is not None and not (
                0.0 <= self.preference_quantile <= 1.0):
            raise ValueError("preference_quantile must lie in [0, 1]")


@dataclass
class APResult:
    exemplars: np.ndarray
    labels: np.ndarray
    converged: bool
    iterations: int


def affinity_propagation(X: np.ndarray, config: APConfig | None = None,
                         rng: np.random.Generator | None = None) -> APResult:
    """Responsibility/availability message passing on s(i, k) = -|x_i - x_k|^2.

    The preference sits on the diagonal; convergence means the exemplar set
    is stable for ``convergence_window`` iterations. Non-convergence returns
    the best-effort clustering with ``converged=False``.
    """
    config = config or APConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")

    S = -squared_distances(X, X)
    off_diag = S[~np.eye(n, dtype=bool)]
    if np.all(off_diag == 0.0):
        # Degenerate: every point identical; one exemplar serves all.
        return APResult(np.array([0]), np.zeros(n, dtype=np.int64), True, 0)
    if config.preference_quantile is not None:
        pref = float(np.quantile(off_diag, config.preference_quantile))
    elif config.preference == "median":
        pref = float(np.median(off_diag))
    else:
        pref = float(config.preference)
    np.fill_diagonal(S, pref)
    if rng is not None:
        # Tiny seeded jitter breaks symmetric degeneracies without moving
        # the solution on generic inputs.
        scale = 1e-12 * (np.max(S) - np.min(S) + 1e-300)
        S = S + scale * rng.standard_normal((n, n))

    A = np.zeros((n, n))
    R = np.zeros((n, n))
    lam = config.damping
    idx = np.arange(n)
    last_exemplars = np.zeros(n, dtype=bool)
    stable = 0
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        # Responsibilities.
        AS = A + S
        first = np.argmax(AS, axis=1)
        max1 = AS[idx, first]
        AS[idx, first] = -np.inf
        max2 = np.max(AS, axis=1)
        Rnew = S - max1[:, None]
        Rnew[idx, first] = S[idx, first] - max2
        R = lam * R + (1.0 - lam) * Rnew
        # Availabilities.
        Rp = np.maximum(R, 0.0)
        Rp[idx, idx] = R[idx, idx]
        col = Rp.sum(axis=0)
        Anew = col[None, :] - Rp
        diag = Anew[idx, idx].copy()
        Anew = np.minimum(Anew, 0.0)
        Anew[idx, idx] = diag
        A = lam * A + (1.0 - lam) * Anew

        exemplars = (np.diag(A) + np.diag(R)) > 0
        if np.array_equal(exemplars, last_exemplars) and exemplars.any():
            stable += 1
            if stable >= config.convergence_window:
                converged = True
                break
        else:
            stable = 0
        last_exemplars = exemplars

    exemplar_idx = np.flatnonzero(np.diag(A) + np.diag(R) > 0)
    if exemplar_idx.size == 0:
        exemplar_idx = np.array([int(np.argmax(np.diag(A) + np.diag(R)))])
    labels = np.argmax(S[:, exemplar_idx], axis=1)
    labels[exemplar_idx] = np.arange(exemplar_idx.size)
    return APResult(exemplar_idx, labels.astype(np.int64), converged, it)


@dataclass
class GmmModel:
    means: np.ndarray        # (K, d)
    variances: np.ndarray    # (K, d) diagonal covariances
    weights: np.ndarray      # (K,)

    @property
    def K(self) -> int:
        return self.means.shape[0]


VARIANCE_FLOOR = 1e-6


def _gmm_log_prob(X, model: GmmModel):
    # (n, K) log N(x | mu_k, diag var_k) + log w_k
    n, d = X.shape
    out = np.empty((n, model.K))
    for k in range(model.K):
        var = model.variances[k]
        diff2 = (X - model.means[k]) ** 2 / var
        out[:, k] = -0.5 * (np.sum(np.log(2.0 * np.pi * var)) + diff2.sum(axis=1))
    return out + np.log(model.weights)[None, :]


def _kmeanspp_means(X, K, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(K - 1):
        d2 = squared_distances(X, X[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # All remaining mass at chosen points; fall back to uniform.
            probs = np.full(n, 1.0 / n)
        else:
            probs = d2 / total
        chosen.append(int(rng.choice(n, p=probs)))
    return X[chosen].copy()


def gmm_fit(X: np.ndarray, K: int, rng: np.random.Generator,
            max_iters: int = 300, rel_tol: float = 1e-6,
            max_reseeds: int = 3, means_init: np.ndarray | None = None):
    """Diagonal-covariance EM from a k-means++ style seeded start.

    Returns (model, responsibilities, log-likelihood history). The history is
    non-decreasing; a component that collapses to zero mass is re-seeded at
    the worst-explained point, a bounded number of times. ``means_init``
    overrides the seeding with caller-provided component means, e.g. centers
    taken from an upstream clustering, so EM refines that solution instead
    of starting from scratch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if K < 1 or K > n:
        raise ValueError(f"K={K} must lie in [1, {n}]")
    if means_init is not None:
        means_init = np.asarray(means_init, dtype=np.float64)
        if means_init.shape != (K, d):
            raise ValueError(f"means_init must have shape ({K}, {d})")
    global_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
    model = GmmModel(
        means=_kmeanspp_means(X, K, rng) if means_init is None else means_init.copy(),
        variances=np.tile(global_var, (K, 1)),
        weights=np.full(K, 1.0 / K),
    )
    history = []
    reseeds = 0
    resp = np.full((n, K), 1.0 / K)
    for _ in range(max_iters):
        joint = _gmm_log_prob(X, model)
        norm = logsumexp(joint, axis=1)
        loglik = float(norm.sum())
        resp = np.exp(joint - norm[:, None])
        if history and reseeds == 0 and loglik < history[-1] - 1e-9:
            # EM guarantees monotonicity; only floor clipping can nick it.
            loglik = history[-1]
        history.append(loglik)
        if len(history) > 1:
            prev = history[-2]
            if abs(loglik - prev) <= rel_tol * max(abs(prev), 1.0):
                break

        Nk = resp.sum(axis=0)
        empty = np.flatnonzero(Nk < 1e-10)
        if empty.size:
            if reseeds >= max_reseeds:
                raise RuntimeError(f"GMM component collapse persisted after {max_reseeds} re-seeds")
            reseeds += 1
            worst = np.argsort(resp.max(axis=1))
            for j, comp in enumerate(empty):
                pick = int(worst[j % n])
                model.means[comp] = X[pick]
                model.variances[comp] = global_var
            model.weights = np.full(K, 1.0 / K)
            continue
        model.means = (resp.T @ X) / Nk[:, None]
        second = (resp.T @ (X * X)) / Nk[:, None]
        model.variances = np.maximum(second - model.means**2, VARIANCE_FLOOR)
        model.weights = Nk / n
    return model, resp, history


def fine_discovery(X: np.ndarray, labels: np.ndarray, k: int):
    """Keep the k members nearest each cluster's mean; refresh means.

    Entries labeled -1 stay discarded. Clusters with at most k members keep
    everything. Returns (labels with drops applied, {cluster id: new mean}).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    labels = np.asarray(labels).copy()
    means: dict[int, np.ndarray] = {}
    for cid in sorted(set(labels.tolist()) - {-1}):
        members = np.flatnonzero(labels == cid)
        pts = X[members]
        mean = pts.mean(axis=0)
        if len(members) > k:
            dist = np.linalg.norm(pts - mean, axis=1)
            keep_local = np.argsort(dist, kind="stable")[:k]
            drop = np.setdiff1d(members, members[keep_local])
            labels[drop] = -1
            mean = pts[keep_local].mean(axis=0)
        means[cid] = mean
    return labels, means


def merge_classes(X: np.ndarray, labels: np.ndarray, lam: float):
    """Fuse clusters whose means sit closer than ``lam`` (single linkage).

    Builds the graph with an edge wherever the mean distance is strictly
    below the threshold and merges connected components, so chains merge
    transitively. Returns (relabeled array, {new id: recomputed mean}).
    """
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    labels = np.asarray(labels).copy()
    ids = sorted(set(labels.tolist()) - {-1})
    if not ids:
        return labels, {}
    means = np.stack([X[labels == cid].mean(axis=0) for cid in ids])
    # Union-find over cluster ids.
    parent = list(range(len(ids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    dist = np.sqrt(squared_distances(means, means))
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if dist[i, j] < lam:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)

    root_to_new: dict[int, int] = {}
    mapping = {}
    for pos, cid in enumerate(ids):
        root = find(pos)
        if root not in root_to_new:
            root_to_new[root] = len(root_to_new)
        mapping[cid] = root_to_new[root]
    out = labels.copy()
    for cid, new in mapping.items():
        out[labels == cid] = new
    new_means = {
        new: X[out == new].mean(axis=0) for new in sorted(set(mapping.values()))
    }
    return out, new_means


@dataclass
class DiscoveryResult:
    cluster_count: int
    pseudo_labels: np.ndarray          # -1 marks discarded entries
    class_means: dict                  # cluster id -> mean of kept members
    merge_threshold: float
    ap_converged: bool = True
    warnings: list = field(default_factory=list)


def joint_discover(pool: np.ndarray, lam: float, k: int,
                   confidence_cut: float, rng: np.random.Generator,
                   ap_config: APConfig | None = None,
                   use_fine: bool = True, use_merge: bool = True,
                   min_cluster_size: int = 1) -> DiscoveryResult:
    """Cluster the whole novel pool in one shot.

    Pipeline: affinity propagation for the count, mixture fit, confidence
    filter on max responsibility, per-cluster core selection, mean-distance
    merging. Clusters that keep fewer than ``min_cluster_size`` confident
    members are treated as stray points and discarded. Pools smaller than 2
    report zero classes.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    n = pool.shape[0]
    if n < 2:
        return DiscoveryResult(0, -np.ones(n, dtype=np.int64), {}, lam,
                               warnings=["pool too small, discovery skipped"])
    ap = affinity_propagation(pool, ap_config, rng)
    warnings = [] if ap.converged else ["affinity propagation did not converge"]
    K = len(ap.exemplars)
    # Seed the mixture at the exemplar partition's centroids so EM refines
    # the count estimate's own clustering rather than re-deriving one.
    ap_means = np.stack([pool[ap.labels == j].mean(axis=0) for j in range(K)])
    _, resp, _ = gmm_fit(pool, K, rng, means_init=ap_means)
    labels = np.argmax(resp, axis=1).astype(np.int64)
    confident = resp.max(axis=1) >= confidence_cut
    labels[~confident] = -1
    if min_cluster_size > 1:
        for cid in set(labels.tolist()) - {-1}:
            members = labels == cid
            if members.sum() < min_cluster_size:
                labels[members] = -1
    if use_fine:
        labels, _ = fine_discovery(pool, labels, k)
    if use_merge:
        labels, means = merge_classes(pool, labels, lam)
    else:
        kept = sorted(set(labels.tolist()) - {-1})
        relabel = {cid: i for i, cid in enumerate(kept)}
        out = labels.copy()
        for cid, new in relabel.items():
            out[labels == cid] = new
        labels = out
        means = {relabel[cid]: pool[labels == relabel[cid]].mean(axis=0) for cid in kept}
    return DiscoveryResult(len(means), labels, means, lam,
                           ap_converged=ap.converged, warnings=warnings)


def calibrate_ap_preference(known_reps: np.ndarray, known_class_count: int,
                            rng: np.random.Generator,
                            damping: float = 0.9,
                            iters: int = 24) -> float:
    """Find the exemplar preference that recovers the known class count.

    The number of exemplars grows with the preference, so a bisection
    between the smallest and largest off-diagonal similarity homes in on the
    granularity that reproduces the labeled classes. Returns the preference
    whose count lands closest to the target (exact when reachable).
    """
    known_reps = np.atleast_2d(np.asarray(known_reps, dtype=np.float64))
    S = -squared_distances(known_reps, known_reps)
    off = S[~np.eye(len(S), dtype=bool)]
    lo, hi = float(off.min()), float(off.max())
    if lo == hi:
        return lo
    best_p, best_err = None, None

    def count_at(p):
        res = affinity_propagation(known_reps,
                                   APConfig(damping=damping, preference=p), rng)
        return len(res.exemplars)

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        c = count_at(mid)
        err = abs(c - known_class_count)
        if best_err is None or err < best_err:
            best_p, best_err = mid, err
        if err == 0:
            break
        if c < known_class_count:
            lo = mid
        else:
            hi = mid
    return float(best_p)


def calibrate_ap_quantile(known_reps: np.ndarray, known_class_count: int,
                          rng: np.random.Generator,
                          damping: float = 0.9,
                          iters: int = 12) -> float:
    """Find the similarity quantile whose preference recovers the class count.

    Like :func:`calibrate_ap_preference` but the result is a quantile of the
    off-diagonal similarity distribution rather than an absolute preference
    value, so it transfers across datasets whose scale or size differ from
    the calibration set. Exemplar count grows with the quantile.
    """
    known_reps = np.atleast_2d(np.asarray(known_reps, dtype=np.float64))
    lo, hi = 0.0, 1.0
    best_q, best_err = None, None

    def count_at(q):
        res = affinity_propagation(
            known_reps, APConfig(damping=damping, preference_quantile=q), rng)
        return len(res.exemplars)

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        c = count_at(mid)
        err = abs(c - known_class_count)
        if best_err is None or err < best_err:
            best_q, best_err = mid, err
        if err == 0:
            break
        if c < known_class_count:
            lo = mid
        else:
            hi = mid
    return float(best_q)


def calibrate_merge_threshold(known_reps: np.ndarray, known_class_count: int,
                              k: int, confidence_cut: float,
                              rng: np.random.Generator,
                              grid: np.ndarray | None = None,
                              grid_size: int = 50,
                              ap_config: APConfig | None = None) -> float:
    """Pick the merge threshold whose cluster count best matches the truth.

    Runs coarse plus fine discovery on the labeled representations with the
    labels withheld, then scans candidate thresholds and keeps the one whose
    merged cluster count lands closest to ``known_class_count``. Ties prefer
    the smaller threshold. When ``grid`` is omitted it defaults to
    ``grid_size`` evenly spaced values from 0 to the largest pairwise
    distance between discovered means; callers with true class means can
    pass a wider grid built from those instead.
    """
    known_reps = np.atleast_2d(np.asarray(known_reps, dtype=np.float64))
    ap = affinity_propagation(known_reps, ap_config, rng)
    K = len(ap.exemplars)
    _, resp, _ = gmm_fit(known_reps, K, rng)
    labels = np.argmax(resp, axis=1).astype(np.int64)
    labels[resp.max(axis=1) < confidence_cut] = -1
    labels, means = fine_discovery(known_reps, labels, k)
    if not means:
        return 0.0
    if grid is None:
        if grid_size < 1:
            raise ValueError("empty grid")
        M = np.stack(list(means.values()))
        max_dist = float(np.sqrt(squared_distances(M, M).max())) if len(M) > 1 else 0.0
        grid = np.linspace(0.0, max_dist, grid_size)
    else:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.size == 0:
            raise ValueError("empty grid")
    best_lam, best_err = 0.0, None
    for lam in grid:
        _, merged = merge_classes(known_reps, labels, float(lam))
        err = abs(len(merged) - known_class_count)
        if best_err is None or err < best_err:
            best_lam, best_err = float(lam), err
    return best_lam

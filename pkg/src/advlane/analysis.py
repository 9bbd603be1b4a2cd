"""Monte-Carlo analysis of adversarial policies.

Pipeline: roll out each policy against the tested ego controller, pool the
visited 9-vector states, project to 2-D with PCA, histogram into a shared
grid, measure policy-to-policy distances with the Jensen-Shannon
divergence (natural log, bound ln 2) and cluster nonparametrically with
DP-Means. The heuristic lambda comes from a farthest-first traversal.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import LaneChangeEnv, run_episode


class DegenerateCovariance(ValueError):
    pass


class GridMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class StateSampleSet:
    policy_id: str
    states: np.ndarray      # (N, 9) visited pre-decision states
    episodes: int
    seed: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 9 or \
                len(self.states) == 0:
            raise ValueError("sample set must be a non-empty (N, 9) matrix")


def rollout_states(adversary, ego_controller, cfg, rcfg, episodes, seed,
                   policy_id="policy", gamma=0.99):
    """Pool every visited pre-decision state over `episodes` rollouts."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = LaneChangeEnv(cfg, rcfg)
    pooled = []
    for k in range(episodes):
        res = run_episode(env, ego_controller, adversary,
                          np.random.default_rng(seed + k), gamma=gamma,
                          collect_observations=True)
        pooled.extend(res.observations)
    return StateSampleSet(policy_id, np.array(pooled), episodes, seed)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    mean: np.ndarray          # (9,)
    scale: np.ndarray         # (9,) per-dimension std (floored)
    components: np.ndarray    # (2, 9) orthonormal rows
    explained: np.ndarray     # (2,) shares of total variance

    def project(self, states):
        z = (np.asarray(states, dtype=float) - self.mean) / self.scale
        return z @ self.components.T


def fit_pca(samples):
    """Top-2 principal directions of the per-dimension standardized samples.

    Sign convention: the largest-magnitude entry of each component is
    positive. Raises DegenerateCovariance when the data spans < 2 directions.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != 9:
        raise ValueError("samples must be (N, 9)")
    if len(np.unique(x, axis=0)) < 3:
        raise DegenerateCovariance("need at least 3 distinct samples")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0  # constant dimensions stay centered at zero
    z = (x - mean) / scale
    cov = (z.T @ z) / len(z)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    total = float(evals.sum())
    if total <= 0 or evals[1] <= 1e-12 * max(evals[0], 1.0):
        raise DegenerateCovariance("sample covariance has rank < 2")
    comps = evecs[:, order[:2]].T.copy()
    for c in comps:
        j = int(np.argmax(np.abs(c)))
        if c[j] < 0:
            c *= -1.0
    return PcaProjection(mean, scale, comps, evals[:2] / total)


# ---------------------------------------------------------------------------
# densities


@dataclass
class GridSpec:
    bins: int = 30
    x_lo: float = -1.0
    x_hi: float = 1.0
    y_lo: float = -1.0
    y_hi: float = 1.0

    def __post_init__(self):
        if self.bins < 2 or self.x_hi <= self.x_lo or self.y_hi <= self.y_lo:
            raise ValueError("invalid grid")

    def key(self):
        return (self.bins, self.x_lo, self.x_hi, self.y_lo, self.y_hi)


def grid_from_points(points, bins=30, lo_pct=1.0, hi_pct=99.0):
    """Fixed global bounds: the pooled 1st-99th percentile box, so every
    density in one run shares the same support."""
    pts = np.asarray(points, dtype=float)
    x_lo, x_hi = np.percentile(pts[:, 0], [lo_pct, hi_pct])
    y_lo, y_hi = np.percentile(pts[:, 1], [lo_pct, hi_pct])
    if x_hi - x_lo < 1e-9:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    return GridSpec(bins, float(x_lo), float(x_hi), float(y_lo), float(y_hi))


@dataclass
class StateDensity:
    grid: GridSpec
    p: np.ndarray             # (bins, bins), strictly positive, sums to 1
    policy_id: str = ""
    smoothing: float = 1e-6

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.p.shape != (self.grid.bins, self.grid.bins):
            raise ValueError("density shape does not match grid")


def estimate_density(points, grid, smoothing=1e-6, policy_id=""):
    """2-D histogram + additive smoothing, renormalized. Out-of-bounds
    samples clamp to the edge bins."""
    pts = np.asarray(points, dtype=float)
    eps = 1e-12
    xs = np.clip(pts[:, 0], grid.x_lo, grid.x_hi - eps)
    ys = np.clip(pts[:, 1], grid.y_lo, grid.y_hi - eps)
    h, _, _ = np.histogram2d(
        xs, ys, bins=grid.bins,
        range=[[grid.x_lo, grid.x_hi], [grid.y_lo, grid.y_hi]])
    h = h + smoothing
    h /= h.sum()
    return StateDensity(grid, h, policy_id, smoothing)


def _as_dist(obj):
    if isinstance(obj, StateDensity):
        return obj.p.reshape(-1), obj.grid.key()
    arr = np.asarray(obj, dtype=float).reshape(-1)
    return arr, ("raw", arr.shape)


def _check_pair(P, Q):
    p, kp = _as_dist(P)
    q, kq = _as_dist(Q)
    if isinstance(P, StateDensity) != isinstance(Q, StateDensity) or \
            (isinstance(P, StateDensity) and kp != kq) or p.shape != q.shape:
        raise GridMismatch("densities live on different grids")
    return p, q


def kl_divergence(P, Q):
    """sum p ln(p/q) in nats; bins with p = 0 contribute 0."""
    p, q = _check_pair(P, Q)
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        raise ValueError("KL undefined: q vanishes where p > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def js_divergence(P, Q):
    """Jensen-Shannon divergence in nats: symmetric, bounded by ln 2."""
    p, q = _check_pair(P, Q)
    m = 0.5 * (p + q)
    val = 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)
    return max(val, 0.0)  # clamp float noise on near-identical inputs


# ---------------------------------------------------------------------------
# clustering


def _mean_density(densities):
    grid = densities[0].grid
    p = np.mean([d.p for d in densities], axis=0)
    p = p / p.sum()  # members share the grid, so the average is a density
    return StateDensity(grid, p, "mean")


def heuristic_lambda(densities, k):
    """Farthest-first traversal: seed T with the mean density, then k times
    add the density with maximum min-JSD to T; return the last round's
    maximum distance."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(densities) < k:
        raise ValueError("need at least k densities")
    t_set = [_mean_density(densities)]
    lam = 0.0
    for _ in range(k):
        dists = [min(js_divergence(d, t) for t in t_set) for d in densities]
        j = int(np.argmax(dists))
        lam = float(dists[j])
        t_set.append(densities[j])
    return lam


@dataclass
class ClusterResult:
    k: int
    assignments: list         # z_i in [1, k]
    means: list               # cluster mean densities
    lam: float
    iterations: int
    objective: list = field(default_factory=list)  # per-iteration values


def _dp_objective(densities, z, means, lam):
    return sum(js_divergence(d, means[z[i] - 1]) for i, d in enumerate(densities)) \
        + lam * len(means)


def dp_means(densities, lam, max_iterations=200):
    """DP-Means over densities with JSD distance.

    Assign each density to the nearest cluster mean unless the minimum
    distance exceeds lambda, in which case it seeds a new cluster; means
    are renormalized elementwise averages; iterate to a fixed point of the
    assignments. Ties break toward the lowest cluster index.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = len(densities)
    if n == 0:
        raise ValueError("need at least one density")
    grid = densities[0].grid
    for d in densities:
        if d.grid.key() != grid.key():
            raise GridMismatch("all densities must share one grid")

    z = [1] * n
    means = [_mean_density(densities)]
    objective = []
    iterations = 0
    for _ in range(max_iterations):
        iterations += 1
        prev = list(z)
        for i, d in enumerate(densities):
            dist = [js_divergence(d, m) for m in means]
            c = int(np.argmin(dist))
            if dist[c] > lam:
                means.append(StateDensity(grid, d.p.copy(), d.policy_id))
                z[i] = len(means)
            else:
                z[i] = c + 1
            # recompute means over the current assignment (per-point update)
            members = [[] for _ in means]
            for j, zj in enumerate(z):
                members[zj - 1].append(densities[j])
            keep = [ci for ci, ms in enumerate(members) if ms]
            remap = {ci + 1: rank + 1 for rank, ci in enumerate(keep)}
            means = [_mean_density(members[ci]) for ci in keep]
            z = [remap[zj] for zj in z]
        obj = _dp_objective(densities, z, means, lam)
        if objective:
            assert obj <= objective[-1] + 1e-9, "DP-Means objective increased"
        objective.append(obj)
        if z == prev:
            break
    return ClusterResult(len(means), z, means, lam, iterations, objective)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    policy_id: str
    episodes: int
    success_rate: float
    crash_rate: float
    timeout_rate: float
    mean_ego_return: float    # discounted
    mean_adv_return: float
    seed: int

    def rates(self):
        return self.success_rate, self.crash_rate, self.timeout_rate


def evaluate_policy(adversary, ego_controller, cfg, rcfg, episodes, seed,
                    policy_id="policy", gamma=0.99):
    """Fresh initial conditions per episode; counts outcomes and means the
    discounted returns. Deterministic per seed."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = LaneChangeEnv(cfg, rcfg)
    counts = {"success": 0, "crash": 0, "timeout": 0}
    ego_rets = []
    adv_rets = []
    for k in range(episodes):
        res = run_episode(env, ego_controller, adversary,
                          np.random.default_rng(seed + k), gamma=gamma)
        counts[res.outcome] += 1
        ego_rets.append(res.ego_return)
        adv_rets.append(res.adv_return)
    return EvalReport(
        policy_id=policy_id,
        episodes=episodes,
        success_rate=counts["success"] / episodes,
        crash_rate=counts["crash"] / episodes,
        timeout_rate=counts["timeout"] / episodes,
        mean_ego_return=float(np.mean(ego_rets)),
        mean_adv_return=float(np.mean(adv_rets)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# end-to-end report


@dataclass
class AnalysisSettings:
    rollout_episodes: int = 50
    eval_episodes: int = 200
    grid_bins: int = 30
    k_hint: int = 3
    smoothing: float = 1e-6
    gamma: float = 0.99


def cluster_report(members, ego_factory, cfg, rcfg, settings, base_seed,
                   naturalistic=None, warn=None):
    """Full pipeline: rollouts -> pooled PCA -> shared-grid densities ->
    heuristic lambda -> DP-Means -> per-cluster summaries.

    `members` is a list of (policy_id, adversary) pairs; failures are
    omitted with a warning callback instead of aborting. `naturalistic`
    optionally adds a baseline sample set to the PCA pool only.
    """
    sample_sets = []
    policies = []
    for idx, (pid, adversary) in enumerate(members):
        try:
            ss = rollout_states(adversary, ego_factory(), cfg, rcfg,
                                settings.rollout_episodes,
                                base_seed + 10_000 * idx, policy_id=pid,
                                gamma=settings.gamma)
            sample_sets.append(ss)
            policies.append((pid, adversary))
        except Exception as e:  # member-level failure: omit with warning
            if warn is not None:
                warn(f"rollout failed for {pid}: {e}")
    if not sample_sets:
        raise ValueError("no usable ensemble members")

    pool = [ss.states for ss in sample_sets]
    if naturalistic is not None:
        pool.append(naturalistic.states)
    pca = fit_pca(np.vstack(pool))

    projected = [pca.project(ss.states) for ss in sample_sets]
    all_pts = np.vstack(projected + (
        [pca.project(naturalistic.states)] if naturalistic is not None else []))
    grid = grid_from_points(all_pts, bins=settings.grid_bins)
    densities = [
        estimate_density(pts, grid, settings.smoothing, ss.policy_id)
        for pts, ss in zip(projected, sample_sets)
    ]

    k_hint = min(settings.k_hint, len(densities))
    lam = heuristic_lambda(densities, k_hint)
    clusters = dp_means(densities, lam)

    scatter = []
    for pts, ss, z in zip(projected, sample_sets, clusters.assignments):
        stride = max(1, len(pts) // 200)  # deterministic subsample for plots
        scatter.append({
            "policy": ss.policy_id,
            "cluster": int(z),
            "points": [[float(a), float(b)] for a, b in pts[::stride]],
        })

    # representative per cluster: member closest to the cluster mean
    report_clusters = []
    for c in range(1, clusters.k + 1):
        idxs = [i for i, z in enumerate(clusters.assignments) if z == c]
        mean = clusters.means[c - 1]
        rep = min(idxs, key=lambda i: js_divergence(densities[i], mean))
        evals = [
            evaluate_policy(policies[i][1], ego_factory(), cfg, rcfg,
                            settings.eval_episodes, base_seed + 500_000 + i,
                            policy_id=policies[i][0], gamma=settings.gamma)
            for i in idxs
        ]
        report_clusters.append({
            "cluster": c,
            "size": len(idxs),
            "members": [policies[i][0] for i in idxs],
            "representative": policies[rep][0],
            "mean_density": mean.p.tolist(),
            "success_rate": float(np.mean([e.success_rate for e in evals])),
            "crash_rate": float(np.mean([e.crash_rate for e in evals])),
            "timeout_rate": float(np.mean([e.timeout_rate for e in evals])),
        })
    return {
        "k": clusters.k,
        "lambda": lam,
        "grid": {"bins": grid.bins, "x_lo": grid.x_lo, "x_hi": grid.x_hi,
                 "y_lo": grid.y_lo, "y_hi": grid.y_hi},
        "pca": {
            "mean": pca.mean.tolist(),
            "scale": pca.scale.tolist(),
            "components": pca.components.tolist(),
            "explained": pca.explained.tolist(),
        },
        "assignments": {
            pid: int(z) for (pid, _), z in zip(policies, clusters.assignments)
        },
        "clusters": report_clusters,
        "iterations": clusters.iterations,
        "objective": clusters.objective,
        "scatter": scatter,
    }

"""Episode-level prototype machinery.

Prototypes are k-means centroids fit on detached features once per
episode. Soft target tables turn centroid similarity into smoothed
labels, and back-translation replaces a space's centroids with the mean
of the matching samples in the other modality's feature space.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, DomainError


def unit_rows(x, eps=1e-12):
    """Row-normalize, leaving rows with norm below eps untouched at zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, eps)


@dataclass
class PrototypeSet:
    """Centroids plus the assignment that produced them."""

    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    space_tag: str
    objective_history: list = field(default_factory=list)

    @property
    def n_clusters(self):
        return self.centroids.shape[0]


@dataclass
class SoftTargetTable:
    """Per-cluster target rows; row k supervises samples assigned to k."""

    rows: np.ndarray
    temperature: float


def _nearest(h, centroids):
    """Assign each row to its closest centroid, lower index winning ties.

    The per-row ||h||^2 term cannot change a row's argmin, so only the
    centroid-dependent part of the squared distance is formed.
    """
    scores = np.sum(centroids * centroids, axis=1) - 2.0 * (h @ centroids.T)
    return np.argmin(scores, axis=1)


def _objective(h, centroids, assignments):
    diff = h - centroids[assignments]
    return float(np.sum(diff * diff))


def _seed_centroids(h, n_clusters, rng):
    """Greedy k-means++ seeding.

    Each new centroid is drawn by squared-distance sampling; a handful of
    candidates are tried and the one that lowers the potential most wins.
    """
    n = h.shape[0]
    trials = 2 + int(np.log(n_clusters))
    h_sq = np.sum(h * h, axis=1)
    chosen = [int(rng.integers(n))]
    d2 = np.maximum(h_sq - 2.0 * (h @ h[chosen[0]]) + h_sq[chosen[0]], 0.0)
    for _ in range(n_clusters - 1):
        total = d2.sum()
        if total <= 0.0:
            candidates = rng.integers(n, size=trials)
        else:
            candidates = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.maximum(
            h_sq[:, None] - 2.0 * (h @ h[candidates].T) + h_sq[candidates], 0.0
        )
        np.minimum(cand_d2, d2[:, None], out=cand_d2)
        best = int(np.argmin(cand_d2.sum(axis=0)))
        chosen.append(int(candidates[best]))
        d2 = cand_d2[:, best]
    return h[chosen].copy()


def _cluster_means(h, assignments, n_clusters, fallback):
    sums = np.empty((n_clusters, h.shape[1]))
    for j in range(h.shape[1]):
        sums[:, j] = np.bincount(assignments, weights=h[:, j], minlength=n_clusters)
    counts = np.bincount(assignments, minlength=n_clusters).astype(np.float64)
    out = fallback.copy()
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled, None]
    return out


def _fill_empty(h, centroids, assignments):
    """Give every empty cluster a member; returns (centroids, assignments).

    Each empty cluster adopts the sample farthest from its centroid (ties
    going to the lowest sample index, skipping samples already adopted) and
    the adopted sample is kept in its new cluster through reassignment. The
    adopted sample sits at distance zero from its cluster, so the pin only
    ever settles exact ties.
    """
    k = centroids.shape[0]
    counts = np.bincount(assignments, minlength=k)
    if not np.any(counts == 0):
        return centroids, assignments
    centroids = centroids.copy()
    n = h.shape[0]
    pinned = {}
    for _ in range(k + 1):
        counts = np.bincount(assignments, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return centroids, assignments
        for idx in empty:
            dist = np.sum((h - centroids[idx]) ** 2, axis=1)
            for s in np.lexsort((np.arange(n), -dist)):
                if s not in pinned:
                    break
            pinned[int(s)] = int(idx)
            centroids[idx] = h[s]
        assignments = _nearest(h, centroids)
        for s, idx in pinned.items():
            assignments[s] = idx
    raise ContractError("empty-cluster repair did not converge")


def repair_empty_clusters(proto_set, h):
    """Replace empty clusters' centroids and reassign; see _fill_empty."""
    h = np.asarray(h, dtype=np.float64)
    centroids, assignments = _fill_empty(
        h, proto_set.centroids, proto_set.assignments.copy()
    )
    return PrototypeSet(
        centroids=centroids,
        assignments=assignments,
        objective=_objective(h, centroids, assignments),
        space_tag=proto_set.space_tag,
        objective_history=list(proto_set.objective_history),
    )


def _improve_moves(h, centroids, assignments, counts, max_rounds=32):
    """Apply single-point moves that strictly lower the objective.

    The exact change for moving x from its cluster a to cluster b is
    n_b/(n_b+1) d(x, c_b)^2 - n_a/(n_a-1) d(x, c_a)^2. Each round scores
    every move once, then applies improving moves in best-first order as
    long as their cluster pairs are disjoint, which keeps the scored
    deltas exact. Moves that would empty a cluster are skipped. Returns
    True if anything moved; centroids, assignments, counts update in
    place (kmeans recomputes exact means afterwards).
    """
    n, k = h.shape[0], centroids.shape[0]
    if k < 2:
        return 0, False
    moved = False
    rounds_used = 0
    rows = np.arange(n)
    for _ in range(max_rounds):
        rounds_used += 1
        d2 = (
            np.sum(h * h, axis=1, keepdims=True)
            - 2.0 * h @ centroids.T
            + np.sum(centroids * centroids, axis=1)
        )
        d2 = np.maximum(d2, 0.0)
        gain_to = d2 * (counts / (counts + 1.0))
        own_counts = counts[assignments]
        loss_from = np.where(
            own_counts > 1.0,
            d2[rows, assignments] * own_counts / np.maximum(own_counts - 1.0, 1.0),
            -np.inf,
        )
        delta = gain_to - loss_from[:, None]
        delta[rows, assignments] = np.inf
        best_target = np.argmin(delta, axis=1)
        best_delta = delta[rows, best_target]
        touched = np.zeros(k, dtype=bool)
        applied = 0
        for i in np.lexsort((rows, best_delta)):
            if not best_delta[i] < -1e-12:
                break
            a, b = assignments[i], best_target[i]
            if touched[a] or touched[b]:
                continue
            centroids[a] = (counts[a] * centroids[a] - h[i]) / (counts[a] - 1.0)
            centroids[b] = (counts[b] * centroids[b] + h[i]) / (counts[b] + 1.0)
            counts[a] -= 1.0
            counts[b] += 1.0
            assignments[i] = b
            touched[a] = touched[b] = True
            applied += 1
        if applied == 0:
            break
        moved = True
    return rounds_used, moved


def kmeans(h, n_clusters, max_iters=20, seed=0, space_tag="", init_centroids=None):
    """Lloyd k-means with k-means++ seeding and empty-cluster repair.

    Deterministic for a fixed seed. After Lloyd converges, single-point
    move refinement runs and, if it improves anything, Lloyd resumes on
    the remaining iteration budget. The recorded objective history is
    non-increasing.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise DataError(f"kmeans needs 2-D features, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise DataError("kmeans features contain non-finite entries")
    n = h.shape[0]
    if n_clusters < 1:
        raise ConfigError(f"n_clusters must be at least 1, got {n_clusters}")
    if n < n_clusters:
        raise ConfigError(f"cannot fit {n_clusters} clusters to {n} samples")
    if max_iters < 0:
        raise ConfigError(f"max_iters must be nonnegative, got {max_iters}")

    rng = np.random.default_rng(seed)
    if init_centroids is None:
        centroids = _seed_centroids(h, n_clusters, rng)
    else:
        centroids = np.array(init_centroids, dtype=np.float64)
        if centroids.shape != (n_clusters, h.shape[1]):
            raise ConfigError(
                f"init centroids shape {centroids.shape} does not match "
                f"({n_clusters}, {h.shape[1]})"
            )
    assignments = _nearest(h, centroids)
    history = [_objective(h, centroids, assignments)]
    if max_iters == 0:
        return PrototypeSet(
            centroids=centroids,
            assignments=assignments,
            objective=history[-1],
            space_tag=space_tag,
            objective_history=history,
        )

    iters_left = max_iters
    refine_left = 64 // n_clusters
    while True:
        while iters_left > 0:
            iters_left -= 1
            centroids = _cluster_means(h, assignments, n_clusters, centroids)
            centroids, new_assignments = _fill_empty(h, centroids, _nearest(h, centroids))
            history.append(_objective(h, centroids, new_assignments))
            stable = np.array_equal(new_assignments, assignments)
            assignments = new_assignments
            if stable:
                break
        counts = np.bincount(assignments, minlength=n_clusters).astype(np.float64)
        if refine_left <= 0 or np.any(counts == 0):
            break
        used, moved = _improve_moves(
            h, centroids, assignments, counts, max_rounds=refine_left
        )
        refine_left -= used
        if not moved:
            break
        centroids = _cluster_means(h, assignments, n_clusters, centroids)
        history.append(_objective(h, centroids, assignments))
        if iters_left <= 0:
            break

    return PrototypeSet(
        centroids=centroids,
        assignments=assignments,
        objective=history[-1],
        space_tag=space_tag,
        objective_history=history,
    )


def soft_targets(centroids, tau_y):
    """Similarity-smoothed target table from L2-normalized centroids."""
    if tau_y <= 0:
        raise DomainError(f"target temperature must be positive, got {tau_y}")
    c = np.asarray(centroids, dtype=np.float64)
    sims = c @ c.T / tau_y
    shifted = sims - sims.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return SoftTargetTable(rows=e / e.sum(axis=1, keepdims=True), temperature=tau_y)


def hard_targets(n_clusters):
    """One-hot target table used when smoothing is disabled."""
    return SoftTargetTable(rows=np.eye(n_clusters), temperature=0.0)


def pbt_centroids(assignments, h, n_clusters):
    """Translate a clustering into another feature space by group means.

    Row k is the plain mean of h rows whose assignment is k, summed in
    sample order. Every cluster must have at least one member.
    """
    a = np.asarray(assignments)
    h = np.asarray(h, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] != h.shape[0]:
        raise ContractError(
            f"assignments length {a.shape} does not match features {h.shape}"
        )
    if a.size and (a.min() < 0 or a.max() >= n_clusters):
        raise ContractError(f"assignment index out of range for {n_clusters} clusters")
    counts = np.bincount(a, minlength=n_clusters).astype(np.float64)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ContractError(f"cluster {missing} has no members to translate")
    sums = np.zeros((n_clusters, h.shape[1]))
    np.add.at(sums, a, h)
    return sums / counts[:, None]

"""Row clustering: Lloyd k-means with k-means++ seeding, an exhaustive
reference solver, greedy agglomerative pairing, assignment problems, and
activation-correlation channel matching.

All routines are deterministic for a given seed. Ties (nearest centroid,
farthest point, equal pair distances) break toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError


@dataclass
class Assignment:
    """Cluster labels for n rows into k non-empty clusters."""
    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValidationError("labels must be one-dimensional")
        counts = np.bincount(self.labels, minlength=self.k)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValidationError(f"labels out of range for k={self.k}")
        if np.any(counts == 0):
            raise ValidationError(f"empty clusters: {np.where(counts == 0)[0].tolist()}")

    @property
    def n(self):
        return self.labels.size

    def counts(self):
        return np.bincount(self.labels, minlength=self.k)


def indicator(assignment: Assignment) -> np.ndarray:
    """Dense n-by-k one-hot cluster indicator."""
    u = np.zeros((assignment.n, assignment.k))
    u[np.arange(assignment.n), assignment.labels] = 1.0
    return u


def cluster_means(assignment: Assignment, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    sums = np.zeros((assignment.k, rows.shape[1]))
    np.add.at(sums, assignment.labels, rows)
    return sums / assignment.counts()[:, None]


def cluster_sums(assignment: Assignment, rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    sums = np.zeros((assignment.k, rows.shape[1]))
    np.add.at(sums, assignment.labels, rows)
    return sums


def project(assignment: Assignment, rows) -> np.ndarray:
    """Replace every row by its cluster mean (the rank-k projection C X)."""
    return cluster_means(assignment, rows)[assignment.labels]


def fold_cost(assignment: Assignment, rows) -> float:
    rows = np.asarray(rows, dtype=np.float64)
    return float(((rows - project(assignment, rows)) ** 2).sum())


@dataclass
class KMeansResult:
    assignment: Assignment
    centroids: np.ndarray
    cost: float
    restart: int
    iterations: int


def _sq_dists(x, c):
    # ||x||^2 - 2 x.c + ||c||^2, clipped at zero against rounding
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp_init(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-covered points: pick any new index
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists(x, x[[chosen[-1]]])[:, 0])
    return x[chosen].copy()


def _repair_empty(labels, x, centroids, k):
    counts = np.bincount(labels, minlength=k)
    for empty in np.where(counts == 0)[0]:
        d = np.sqrt(((x - centroids[labels]) ** 2).sum(axis=1))
        d[counts[labels] <= 1] = -np.inf  # donors must leave a non-empty cluster behind
        donor = int(np.argmax(d))
        counts[labels[donor]] -= 1
        labels[donor] = empty
        counts[empty] = 1
        centroids[empty] = x[donor]
    return labels


def _lloyd(x, k, rng, max_iters, tol):
    n = x.shape[0]
    centroids = _kmeanspp_init(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    prev_cost = np.inf
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        new_labels = _repair_empty(new_labels, x, centroids, k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new_labels, x)
        counts = np.bincount(new_labels, minlength=k)
        centroids = sums / counts[:, None]
        cost = float(((x - centroids[new_labels]) ** 2).sum())
        converged = np.array_equal(new_labels, labels) or prev_cost - cost <= tol
        labels = new_labels
        prev_cost = cost
        if converged:
            break
    return labels, centroids, prev_cost, it


def kmeans(rows, k, seed=0, restarts=10, max_iters=300, tol=1e-10) -> KMeansResult:
    """Best of `restarts` k-means++/Lloyd runs; deterministic per seed.

    The winner is the run with the smallest final cost, earliest restart on
    exact ties.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("kmeans expects a 2-d row matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range for {n} rows")
    if k == n:
        a = Assignment(labels=np.arange(n), k=k)
        return KMeansResult(assignment=a, centroids=x.copy(), cost=0.0, restart=0, iterations=0)
    best = None
    for r in range(restarts):
        rng = np.random.default_rng((int(seed), r))
        labels, centroids, cost, iters = _lloyd(x, k, rng, max_iters, tol)
        if best is None or cost < best.cost:
            best = KMeansResult(assignment=Assignment(labels=labels, k=k),
                                centroids=centroids, cost=cost, restart=r, iterations=iters)
    return best


def _rgs_partitions(n, k):
    """Restricted growth strings over n items using exactly k classes."""
    labels = np.zeros(n, dtype=np.int64)

    def rec(i, used):
        if k - used > n - i:
            return
        if i == n:
            if used == k:
                yield labels.copy()
            return
        for c in range(min(used + 1, k)):
            labels[i] = c
            yield from rec(i + 1, max(used, c + 1))

    yield from rec(0, 0)


def brute_force_kmeans(rows, k):
    """Exact minimizer of the fold cost by exhaustive partition enumeration.

    Only feasible for small n; intended as the reference the iterative
    solver is judged against.
    """
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range for {n} rows")
    sq = float((x * x).sum())
    best_labels, best_cost = None, np.inf
    for labels in _rgs_partitions(n, k):
        sums = np.zeros((k, d))
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        cost = sq - float(((sums ** 2).sum(axis=1) / counts).sum())
        if cost < best_cost:
            best_cost, best_labels = cost, labels
    return Assignment(labels=best_labels, k=k), max(best_cost, 0.0)


def greedy_pair_clustering(rows, k) -> Assignment:
    """Agglomerative variant: repeatedly merge the two nearest centroids.

    Centroids are re-computed as exact member means after each merge. This
    is a fast approximation of the k-means objective, not its minimizer.
    """
    x = np.asarray(rows, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} out of range for {n} rows")
    members = [[i] for i in range(n)]
    centroids = [x[i].copy() for i in range(n)]
    while len(members) > k:
        m = len(members)
        cent = np.stack(centroids)
        d2 = _sq_dists(cent, cent)
        d2[np.tril_indices(m)] = np.inf  # search i<j only
        flat = int(np.argmin(d2))  # first minimum = lexicographically lowest pair
        a, b = divmod(flat, m)
        members[a].extend(members[b])
        centroids[a] = x[members[a]].mean(axis=0)
        del members[b], centroids[b]
    labels = np.zeros(n, dtype=np.int64)
    for c, member in enumerate(members):
        labels[member] = c
    return Assignment(labels=labels, k=k)


def hungarian(cost):
    """Minimum-cost perfect matching on a square cost matrix.

    Returns (columns, total) where columns[i] is the column matched to row i.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValidationError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValidationError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    return cols.astype(np.int64), float(c[rows, cols].sum())


def correlation_matrix(acts_a, acts_b):
    """Pearson correlation between columns of two (samples, channels) arrays.

    Channels with zero variance correlate at 0 with everything.
    """
    a = np.asarray(acts_a, dtype=np.float64)
    b = np.asarray(acts_b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise ValidationError("activation matrices need matching sample counts")

    def standardize(m):
        mu = m.mean(axis=0)
        sd = m.std(axis=0)
        z = np.where(sd > 0, (m - mu) / np.where(sd > 0, sd, 1.0), 0.0)
        return z

    za, zb = standardize(a), standardize(b)
    return za.T @ zb / a.shape[0]


def channel_match_correlation(acts_a, acts_b, exclude_self=False):
    """Greedily pair channels of two activation matrices by correlation.

    Pairs are claimed in descending correlation order without replacement on
    either side; ties go to the lowest (row, column) pair. With exclude_self,
    the diagonal is barred, which turns self-matching into a best-distinct-
    partner pairing; if the single leftover cell is a barred diagonal one,
    that channel falls back to its best distinct partner with replacement.
    Returns (partner, rho) indexed by a-side channel.
    """
    corr = correlation_matrix(acts_a, acts_b)
    n_a, n_b = corr.shape
    if n_a != n_b:
        raise ValidationError("channel matching expects equal channel counts")
    if exclude_self and n_a < 2:
        raise ValidationError("cannot exclude the diagonal with a single channel")
    work = corr.copy()
    if exclude_self:
        np.fill_diagonal(work, -np.inf)
    partner = np.full(n_a, -1, dtype=np.int64)
    rho = np.zeros(n_a)
    for _ in range(n_a):
        flat = int(np.argmax(work))
        i, j = divmod(flat, n_b)
        if work[i, j] == -np.inf:
            # only the barred diagonal remains (one row left, same column)
            i = int(np.where(partner < 0)[0][0])
            row = corr[i].copy()
            row[i] = -np.inf
            j = int(np.argmax(row))
        partner[i] = j
        rho[i] = corr[i, j]
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return partner, rho

"""K-means with k-means++ seeding, used to initialise the cluster centers."""
import numpy as np

from dpdcan.errors import DomainError

TOL = 1e-6
MAX_ITER = 300


def _sq_dists(x, centers):
    d = (np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * x @ centers.T
         + np.einsum("ij,ij->i", centers, centers)[None, :])
    return np.maximum(d, 0.0)


def _plus_plus(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def _lloyd(x, centers, max_iter):
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        assign = np.argmin(d, axis=1)
        new = np.empty_like(centers)
        counts = np.bincount(assign, minlength=centers.shape[0])
        for j in range(centers.shape[0]):
            if counts[j] == 0:
                # reseed an empty cluster at the point farthest from its center
                far = int(np.argmax(d[np.arange(x.shape[0]), assign]))
                new[j] = x[far]
                d[far, :] = 0.0
            else:
                new[j] = x[assign == j].mean(axis=0)
        moved = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if moved < TOL:
            break
    assign = np.argmin(_sq_dists(x, centers), axis=1)
    return centers, assign


def sse(x, centers, assign):
    diff = x - centers[assign]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans(z, n_clusters, seed=0, n_init=10, max_iter=MAX_ITER):
    """Return ``(centers, assignments)`` of the best of ``n_init`` seeded runs."""
    x = np.asarray(z, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError("kmeans expects a 2-D matrix")
    if not 1 <= n_clusters <= x.shape[0]:
        raise DomainError(f"need 1 <= n_clusters <= n, got {n_clusters} for n={x.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, assign = _lloyd(x, _plus_plus(x, n_clusters, rng), max_iter)
        cost = sse(x, centers, assign)
        if best is None or cost < best[0]:
            best = (cost, centers, assign)
    return best[1], best[2]

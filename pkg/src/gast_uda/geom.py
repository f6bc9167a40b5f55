"""Point-cloud geometry primitives.

A point cloud is an ``(m, 3)`` float array. Every function here is pure: it
never modifies its input and takes an explicit ``numpy.random.Generator``
whenever it needs randomness.

Rotation convention: all rotations are *clockwise as seen from the positive
end of the rotation axis*. About x this maps ``(y, z)`` to
``(y cos t + z sin t, -y sin t + z cos t)``; about y and z the same form is
applied to ``(z, x)`` and ``(x, y)`` respectively.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# cyclic (a, b) coordinate pairs for each axis, so that the clockwise map is
# a' = a cos t + b sin t, b' = -a sin t + b cos t
_AXIS_PAIRS = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}


class DegenerateCloudError(ValueError):
    """Raised when a cloud has zero spatial extent."""


class ContractViolation(ValueError):
    """Raised when an input breaks a documented precondition."""


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected an (m, 3) array with m >= 1, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def normalize_unit_ball(cloud) -> np.ndarray:
    """Center a cloud on its centroid and scale it so the farthest point has norm 1."""
    pts = as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1)).max()
    if scale == 0.0:
        raise DegenerateCloudError("all points coincide; cannot normalize")
    out = centered / scale
    # one more centering pass removes the rounding residue of the first
    return out - out.mean(axis=0)


def jitter(cloud, rng: np.random.Generator, sigma: float = 0.01, clip: float = 0.05) -> np.ndarray:
    """Add per-coordinate Gaussian noise clipped to ``[-clip, clip]``."""
    pts = np.asarray(cloud, dtype=np.float64)
    noise = np.clip(sigma * rng.standard_normal(pts.shape), -clip, clip)
    return pts + noise


def rotation_matrix(axis: str, theta: float) -> np.ndarray:
    """Clockwise rotation matrix about ``axis``; apply as ``points @ R.T``."""
    a, b = _AXIS_PAIRS[axis]
    c, s = np.cos(theta), np.sin(theta)
    R = np.eye(3)
    R[a, a], R[a, b] = c, s
    R[b, a], R[b, b] = -s, c
    return R


def quarter_turn_matrix(axis: str, steps: int) -> np.ndarray:
    """Integer matrix (entries in {-1, 0, 1}) for ``steps`` clockwise quarter turns."""
    if axis not in ("x", "y", "z"):
        raise ValueError(f"unknown axis {axis!r}")
    if steps not in (0, 1, 2, 3):
        raise ValueError(f"steps must be in 0..3, got {steps}")
    a, b = _AXIS_PAIRS[axis]
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][steps]
    R = np.eye(3, dtype=np.int64)
    R[a, a], R[a, b] = c, s
    R[b, a], R[b, b] = -s, c
    return R


def rotate_quarter(cloud, axis: str, steps: int) -> np.ndarray:
    """Rotate by ``steps`` clockwise quarter turns about ``axis`` ('x' or 'y', 'z' also accepted).

    Implemented as a signed coordinate permutation, so the result is exact and
    four successive quarter turns reproduce the input bit for bit.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    R = quarter_turn_matrix(axis.lower(), steps)
    out = np.empty_like(pts)
    for row in range(3):
        col = int(np.flatnonzero(R[row])[0])
        out[:, row] = pts[:, col] if R[row, col] > 0 else -pts[:, col]
    return out


def rotate_z(cloud, theta: float) -> np.ndarray:
    pts = np.asarray(cloud, dtype=np.float64)
    return pts @ rotation_matrix("z", theta).T


def _sq_dists_to(pts: np.ndarray, p: np.ndarray) -> np.ndarray:
    # written out per axis so every caller (batched or not) rounds identically
    dx, dy, dz = pts[..., 0] - p[..., 0, None], pts[..., 1] - p[..., 1, None], pts[..., 2] - p[..., 2, None]
    return dx * dx + dy * dy + dz * dz


def pairwise_sq_dists(pts: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2+|b|^2-2ab trick keep ties exact
    dx, dy, dz = (pts[:, None, a] - pts[None, :, a] for a in range(3))
    return dx * dx + dy * dy + dz * dz


def farthest_point_sample(cloud, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting from ``seed_index``.

    Ties in the max-min distance go to the lowest index. Returns ``n`` distinct
    indices in selection order.
    """
    pts = as_cloud(cloud)
    m = len(pts)
    if not 1 <= n <= m:
        raise ValueError(f"cannot sample n={n} points from a cloud of {m}")
    if not 0 <= seed_index < m:
        raise ValueError(f"seed_index {seed_index} out of range for m={m}")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = seed_index
    min_d = _sq_dists_to(pts, pts[seed_index])
    min_d[seed_index] = -1.0
    for i in range(1, n):
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        min_d = np.minimum(min_d, _sq_dists_to(pts, pts[nxt]))
        min_d[nxt] = -1.0
    return selected


def farthest_point_sample_many(clouds, counts, seed_indices) -> list[np.ndarray]:
    """Run :func:`farthest_point_sample` on each cloud of a ``(B, m, 3)`` stack.

    All runs advance in lockstep and each stops once it has ``counts[b]``
    points; the greedy order is prefix-consistent, so every result equals the
    single-cloud call.
    """
    pts = np.asarray(clouds, dtype=np.float64)
    B, m, _ = pts.shape
    counts = np.asarray(counts, dtype=np.int64)
    if counts.min() < 1 or counts.max() > m:
        raise ValueError(f"counts must lie in [1, {m}]")
    # longest runs first, so the active set is always a prefix
    order = np.argsort(-counts, kind="stable")
    pts, counts = pts[order], counts[order]
    seeds = np.asarray(seed_indices, dtype=np.int64)[order]
    rows = np.arange(B)
    selected = np.empty((B, counts[0]), dtype=np.int64)
    selected[:, 0] = seeds
    min_d = _sq_dists_to(pts, pts[rows, seeds])
    min_d[rows, seeds] = -1.0
    active = B
    for i in range(1, counts[0]):
        while counts[active - 1] <= i:
            active -= 1
        r = rows[:active]
        nxt = min_d[:active].argmax(axis=1)
        selected[:active, i] = nxt
        np.minimum(min_d[:active], _sq_dists_to(pts[:active], pts[r, nxt]), out=min_d[:active])
        min_d[r, nxt] = -1.0
    out: list = [None] * B
    for pos, b in enumerate(order):
        out[b] = selected[pos, : counts[pos]]
    return out


def knn(cloud, query_index: int, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbours of one point, query excluded."""
    pts = as_cloud(cloud)
    m = len(pts)
    if not 1 <= k <= m - 1:
        raise ValueError(f"k must be in [1, m-1] = [1, {m - 1}], got {k}")
    d = _sq_dists_to(pts, pts[query_index])
    order = np.argsort(d, kind="stable")
    order = order[order != query_index]
    return order[:k]


def knn_all(pts: np.ndarray, k: int) -> np.ndarray:
    """``(m, k)`` neighbour table, same ordering rules as :func:`knn`."""
    m = len(pts)
    if not 1 <= k <= m - 1:
        raise ValueError(f"k must be in [1, m-1] = [1, {m - 1}], got {k}")
    d = pairwise_sq_dists(pts)
    # the query has distance 0; pushing it to +inf excludes it without
    # disturbing the stable order of genuine zero-distance duplicates
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def pca_curvature(cloud, k: int = 16) -> np.ndarray:
    """Per-point surface variation ``lambda_min / (lambda_0 + lambda_1 + lambda_2)``.

    Eigenvalues come from the covariance of each point together with its ``k``
    nearest neighbours. The value lies in ``[0, 1/3]``; flat and collinear
    neighbourhoods give 0, and a neighbourhood of coincident points gives 0 by
    convention.
    """
    pts = as_cloud(cloud)
    if k < 3:
        raise ValueError("curvature needs k >= 3 neighbours")
    if len(pts) < k + 1:
        raise ValueError(f"cloud of {len(pts)} points is too small for k={k}")
    nbrs = knn_all(pts, k)
    hood = np.concatenate([pts[:, None, :], pts[nbrs]], axis=1)  # (m, k+1, 3)
    hood = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", hood, hood) / hood.shape[1]
    evals = np.clip(np.linalg.eigvalsh(cov), 0.0, None)  # ascending
    total = evals.sum(axis=1)
    curv = np.zeros(len(pts))
    ok = total > 0
    curv[ok] = evals[ok, 0] / total[ok]
    return curv


@dataclass(frozen=True)
class VoxelGrid:
    """Assignment of points to the ``k**3`` cells of the cube ``[-1, 1]^3``.

    Cell index is ``ix + k*iy + k*k*iz``.
    """

    k: int
    assignment: np.ndarray  # (m,) int
    occupied: np.ndarray  # sorted non-empty cell indices
    centers: np.ndarray  # (k**3, 3) cell centers

    @property
    def n_cells(self) -> int:
        return self.k**3

    def members(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cell)


def voxel_centers(k: int) -> np.ndarray:
    c = -1.0 + (np.arange(k) + 0.5) * (2.0 / k)
    iz, iy, ix = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def voxel_partition(cloud, k: int = 3) -> VoxelGrid:
    pts = as_cloud(cloud)
    if k < 1:
        raise ValueError("k must be positive")
    if np.abs(pts).max() > 1.0 + 1e-9:
        raise ContractViolation("voxel_partition expects points inside [-1, 1]^3; normalize first")
    cell = np.clip(np.floor((pts + 1.0) / 2.0 * k).astype(np.int64), 0, k - 1)
    idx = cell[:, 0] + k * cell[:, 1] + k * k * cell[:, 2]
    return VoxelGrid(k=k, assignment=idx, occupied=np.unique(idx), centers=voxel_centers(k))

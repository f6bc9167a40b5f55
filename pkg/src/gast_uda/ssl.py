"""Self-supervised pretext samples: rotation mixup and curvature-aware distortion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom

ALPHA_RANGE = (0.1, 0.9)
# rotation classes 1..4 are x-axis quarter steps of part a, 5..8 y-axis steps of part b
N_ROTATION_CLASSES = 8
MIN_POINTS = 8


@dataclass(frozen=True)
class RotationMixupSample:
    mixed_cloud: np.ndarray
    alpha: float
    label_a: int  # 1..4
    label_b: int  # 5..8
    n_a: int  # the first n_a points of mixed_cloud come from part a

    @property
    def part_a(self) -> np.ndarray:
        return self.mixed_cloud[: self.n_a]

    @property
    def part_b(self) -> np.ndarray:
        return self.mixed_cloud[self.n_a :]


@dataclass(frozen=True)
class DistortionSample:
    distorted_cloud: np.ndarray
    location_label: int  # voxel index in [0, k**3)
    curvature_cost: float
    replaced: np.ndarray  # indices of the replaced points


def mixup_part_sizes(m: int, alpha: float) -> tuple[int, int]:
    return int(np.floor(alpha * m)), int(np.floor((1.0 - alpha) * m))


@dataclass(frozen=True)
class MixupDraw:
    """The random choices behind one rotation-mixup sample."""

    alpha: float
    seed_a: int
    seed_b: int
    label_a: int
    label_b: int


def draw_mixup(
    m: int,
    rng: np.random.Generator,
    alpha_range: tuple[float, float] = ALPHA_RANGE,
    *,
    alpha: float | None = None,
    label_a: int | None = None,
    label_b: int | None = None,
) -> MixupDraw:
    lo, hi = alpha_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"alpha range must lie inside (0, 1), got {alpha_range}")
    if m < MIN_POINTS:
        raise ValueError(f"rotation mixup needs at least {MIN_POINTS} points, got {m}")
    # tiny clouds: keep alpha where both floors are at least 1 (no-op once m >= 10 for the default range)
    lo, hi = max(lo, np.nextafter(1.0 / m, 1.0)), min(hi, 1.0 - 1.0 / m)
    if lo > hi:
        raise ValueError(f"cloud of {m} points is too small for alpha range {alpha_range}")
    # always consume the RNG the same way so overrides leave the other draws intact
    a = rng.uniform(lo, hi)
    seed_a, seed_b = rng.integers(0, m, size=2)
    steps_a, steps_b = rng.integers(0, 4, size=2)
    draw = MixupDraw(
        float(a if alpha is None else alpha),
        int(seed_a),
        int(seed_b),
        int(steps_a) + 1 if label_a is None else int(label_a),
        int(steps_b) + 5 if label_b is None else int(label_b),
    )
    if draw.label_a not in (1, 2, 3, 4) or draw.label_b not in (5, 6, 7, 8):
        raise ValueError(f"invalid rotation labels ({draw.label_a}, {draw.label_b})")
    n_a, n_b = mixup_part_sizes(m, draw.alpha)
    if n_a < 1 or n_b < 1:
        raise ValueError(f"alpha={draw.alpha} leaves an empty part for m={m}")
    return draw


def assemble_mixup(cloud: np.ndarray, draw: MixupDraw, idx_a, idx_b) -> RotationMixupSample:
    part_a = geom.rotate_quarter(cloud[idx_a], "x", draw.label_a - 1)
    part_b = geom.rotate_quarter(cloud[idx_b], "y", draw.label_b - 5)
    return RotationMixupSample(np.concatenate([part_a, part_b]), draw.alpha, draw.label_a, draw.label_b, len(part_a))


def make_rotation_mixup(
    cloud,
    rng: np.random.Generator,
    alpha_range: tuple[float, float] = ALPHA_RANGE,
    **overrides,
) -> RotationMixupSample:
    """Build a rotation-mixup sample from one cloud.

    Two farthest-point subsets of sizes ``floor(alpha*m)`` and
    ``floor((1-alpha)*m)`` are drawn from independent random seed points. Part
    a is turned about x by ``label_a - 1`` quarter steps, part b about y by
    ``label_b - 5``, and the two are concatenated with part a first.
    ``alpha``, ``label_a`` and ``label_b`` may be pinned by keyword.
    """
    pts = geom.as_cloud(cloud)
    draw = draw_mixup(len(pts), rng, alpha_range, **overrides)
    n_a, n_b = mixup_part_sizes(len(pts), draw.alpha)
    return assemble_mixup(
        pts,
        draw,
        geom.farthest_point_sample(pts, n_a, draw.seed_a),
        geom.farthest_point_sample(pts, n_b, draw.seed_b),
    )


def make_rotation_mixups(clouds, rngs, alpha_range: tuple[float, float] = ALPHA_RANGE) -> list[RotationMixupSample]:
    """Batched :func:`make_rotation_mixup` over equally sized clouds, one generator each.

    Gives the same samples as calling the single-cloud version per cloud.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    if not len(clouds):
        return []
    m = clouds.shape[1]
    draws = [draw_mixup(m, rng, alpha_range) for rng in rngs]
    sizes = [mixup_part_sizes(m, d.alpha) for d in draws]
    stacked = np.concatenate([clouds, clouds])
    counts = [s[0] for s in sizes] + [s[1] for s in sizes]
    seeds = [d.seed_a for d in draws] + [d.seed_b for d in draws]
    idx = geom.farthest_point_sample_many(stacked, counts, seeds)
    B = len(draws)
    return [assemble_mixup(clouds[b], d, idx[b], idx[B + b]) for b, d in enumerate(draws)]


def curvature_cost(curvature: np.ndarray, members: np.ndarray) -> float:
    """Share of total curvature carried by ``members``; occupancy share if the cloud is curvature-free."""
    total = float(curvature.sum())
    if total <= 0.0:
        return len(members) / len(curvature)
    return float(curvature[members].sum()) / total


def make_distortion_sample(
    cloud,
    rng: np.random.Generator,
    grid_k: int = 3,
    sigma: float = 0.05,
    *,
    curvature: np.ndarray | None = None,
    curvature_k: int = 16,
    cell: int | None = None,
) -> DistortionSample:
    """Replace the points of one random non-empty voxel by Gaussian noise around its center.

    ``curvature`` may be passed in when the caller has it cached; it must be
    the curvature of the undistorted ``cloud``. ``cell`` forces the voxel
    choice (it must be non-empty).
    """
    pts = geom.as_cloud(cloud)
    grid = geom.voxel_partition(pts, grid_k)
    if curvature is None:
        curvature = geom.pca_curvature(pts, curvature_k)
    pick = grid.occupied[rng.integers(len(grid.occupied))]
    if cell is not None:
        if cell not in grid.occupied:
            raise ValueError(f"voxel {cell} is empty")
        pick = cell
    members = grid.members(int(pick))
    out = pts.copy()
    out[members] = grid.centers[pick] + sigma * rng.standard_normal((len(members), 3))
    return DistortionSample(out, int(pick), curvature_cost(curvature, members), members)

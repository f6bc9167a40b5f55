"""
Self-supervised samples from any cloud
======================================

Rotation mixup mixes two farthest-point subsets turned about x and y, with a
soft label weighted by the mixing coefficient. Distortion localization
replaces one voxel by Gaussian noise and weights its label by the share of
curvature the voxel carried.
"""

import numpy as np

from gast_uda import data, geom, ssl

rng = np.random.default_rng(1)
cone = data.make_source_cloud("cone", 1024, rng)

mix = ssl.make_rotation_mixup(cone, rng, alpha=0.3)
print(f"alpha {mix.alpha}: parts of {mix.n_a} and {len(mix.part_b)} points")
print(f"part a turned {mix.label_a - 1} quarter steps about x (label {mix.label_a})")
print(f"part b turned {mix.label_b - 5} quarter steps about y (label {mix.label_b})")

# undoing the labelled turns recovers untouched FPS subsets
undo = geom.rotate_quarter(mix.part_a, "x", (5 - mix.label_a) % 4)
print("undone part a lies on the cone:", all(any(np.array_equal(u, c) for c in cone) for u in undo[:20]))

# distortion: the cost is the curvature share of the replaced voxel
curv = geom.pca_curvature(cone)
grid = geom.voxel_partition(cone)
print("\nvoxel  points  curvature cost")
total = 0.0
for cell in grid.occupied:
    s = ssl.make_distortion_sample(cone, np.random.default_rng(0), curvature=curv, cell=int(cell))
    total += s.curvature_cost
    print(f"{cell:5d}  {len(s.replaced):6d}  {s.curvature_cost:.4f}")
print(f"costs over all voxels sum to {total:.6f}")

# a random draw picks any non-empty voxel with equal probability
s = ssl.make_distortion_sample(cone, rng, curvature=curv)
moved = np.abs(s.distorted_cloud - cone).max(axis=1) > 0
print("\nrandom draw: voxel", s.location_label, "replaced", moved.sum(), "points")

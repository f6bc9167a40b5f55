"""
Point-cloud geometry primitives
===============================

Normalization, exact quarter turns, farthest point sampling, nearest
neighbours, PCA curvature and the voxel grid used by the distortion task.
"""

import numpy as np

from gast_uda import geom

rng = np.random.default_rng(0)

# a stretched Gaussian blob, centered and scaled into the unit ball
cloud = geom.normalize_unit_ball(rng.standard_normal((512, 3)) * [2.0, 1.0, 0.5] + 4.0)
print("centroid", cloud.mean(axis=0).round(12), "max norm", np.linalg.norm(cloud, axis=1).max())

# quarter turns are signed coordinate permutations, so four of them are exact
p = np.array([[0.0, 1.0, 0.0]])
print("(0,1,0) turned once about x:", geom.rotate_quarter(p, "x", 1))
back = cloud
for _ in range(4):
    back = geom.rotate_quarter(back, "y", 1)
print("four turns about y give the input bit for bit:", np.array_equal(back, cloud))

# farthest point sampling spreads a subset over the shape
idx = geom.farthest_point_sample(cloud, 16, seed_index=0)
print("FPS picks", idx[:8], "...")
print("nearest 5 neighbours of point 0:", geom.knn(cloud, 0, 5))

# surface variation: zero on flat patches, up to 1/3 for isotropic noise
plane = np.c_[rng.uniform(-1, 1, (300, 2)), np.zeros(300)]
print("plane curvature max", geom.pca_curvature(plane).max())
sphere = rng.standard_normal((800, 3))
sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
curv = geom.pca_curvature(sphere)
print(f"sphere curvature median {np.median(curv):.4f} (disc estimate {4 * 17 / 800 / 24:.4f})")

# the 3x3x3 grid: index = ix + 3*iy + 9*iz
grid = geom.voxel_partition(cloud, 3)
counts = np.bincount(grid.assignment, minlength=27)
print("occupied voxels", len(grid.occupied), "of 27; busiest", counts.argmax(), "with", counts.max(), "points")

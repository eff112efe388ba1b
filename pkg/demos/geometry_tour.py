"""Canonical coordinates, Umeyama recovery and symmetric rotation error on one object."""
import numpy as np

from istpose.geometry import (Pose, SymmetrySpec, axis_angle, camera_from_canonical,
                              gamma_world_coords, iou3d, random_rotation, rotation_error_deg,
                              umeyama_solve)
from istpose.synthdata import generate_shape

rng = np.random.default_rng(7)
shape = generate_shape("mug", shape_seed=3, n_points=512)
pose = Pose(random_rotation(rng), np.array([0.05, -0.02, 0.9]), 0.25 * shape.extents)

P = camera_from_canonical(shape.points, pose)
Q = gamma_world_coords(P, pose)
print("roundtrip error", np.abs(Q - shape.points).max())

sol = umeyama_solve(shape.points, P)
print("umeyama rotation error (deg)", rotation_error_deg(sol[0], pose.R))

spun = pose.R @ axis_angle([0, 1, 0], np.radians(40))
print("spin about y, plain error   ", rotation_error_deg(spun, pose.R))
print("spin about y, symmetric     ", rotation_error_deg(spun, pose.R, SymmetrySpec(3, "continuous-axis")))

shifted = Pose(pose.R, pose.t + [0.02, 0, 0], pose.s)
print("IoU after a 2 cm shift      ", round(iou3d(shifted, pose), 3))

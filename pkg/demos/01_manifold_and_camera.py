"""
Manifold and camera basics
==========================

Rotations as unit quaternions, the SO(3) exponential/log maps, rigid
transforms, and the pinhole projection pair.
"""

import numpy as np

from topoloc import CameraIntrinsics, Pose, project, so3_exp, so3_log, unproject

# A rotation vector (axis * angle) maps to a rotation via the exponential map
theta = np.array([0.0, 0.0, np.pi / 2])
r = so3_exp(theta)
print("90 deg about z applied to x-axis:", r.apply(np.array([1.0, 0.0, 0.0])))

# log is the exact inverse on the ball ||theta|| < pi
print("log(exp(theta)) =", so3_log(r), "(started from", theta, ")")

# Rigid transforms compose and invert like 4x4 matrices, without building them
a = Pose(so3_exp(np.array([0.1, -0.2, 0.3])), np.array([1.0, 2.0, 3.0]))
b = Pose(so3_exp(np.array([-0.3, 0.1, 0.2])), np.array([-2.0, 0.5, 1.0]))
roundtrip = (a @ b) @ (a @ b).inverse()
print("pose round-trip translation error:", np.linalg.norm(roundtrip.translation))

# Pinhole camera: project into pixels and lift back out with a known depth
intr = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)
p_cam = np.array([1.5, -0.8, 12.0])
px = project(intr, p_cam)
print("camera point", p_cam, "-> pixel", px)
print("lifted back:", unproject(intr, px, p_cam[2]))

# the projection pair is exact to machine precision for any positive depth
rng = np.random.default_rng(0)
worst = 0.0
for _ in range(10_000):
    f = rng.uniform([0, 0], [intr.width, intr.height])
    d = rng.uniform(0.1, 200.0)
    worst = max(worst, np.max(np.abs(project(intr, unproject(intr, f, d)) - f)))
print("worst pixel round-trip error over 10k draws:", worst)

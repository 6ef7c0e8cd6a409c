"""A first look at local reference frames.

Sample a bumpy surface, cut out one neighborhood, and compute a frame with
every method. Then move the patch rigidly and check the frames move with it.
"""
import numpy as np

from lrfkit.baselines import lrf_mian, lrf_shot, lrf_toldi
from lrfkit.evaluation import get_method
from lrfkit.geometry import RigidTransform, extract_patch, synth_surface
from lrfkit.lrfnet import WeightNet, estimate_lrf

np.set_printoptions(precision=4, suppress=True)

cloud = synth_surface("plane-with-bumps", 6000, seed=1)
mr = cloud.resolution_mr
print(f"{len(cloud)} points, mesh resolution {mr:.5f}")

# support radius of 15 mesh resolutions, keypoint picked at random
patch = extract_patch(cloud, 2500, 15 * mr)
print("neighbors in the patch:", len(patch))

net = WeightNet.create(seed=0)  # untrained weights are fine for geometry checks
methods = {
    "mian": lrf_mian,
    "shot": lrf_shot,
    "toldi": lrf_toldi,
    "rops": get_method("rops"),
    "lrfnet": lambda p: estimate_lrf(net, p),
}

frames = {name: fn(patch) for name, fn in methods.items()}
for name, lrf in frames.items():
    print(f"\n{name} (columns x, y, z)\n{lrf}")

# z axes should all agree closely with the surface normal
print("\nz . normal:", {k: round(float(v[:, 2] @ cloud.normals[2500]), 4) for k, v in frames.items()})

t = RigidTransform.random(seed=7, translation_scale=3.0)
moved = patch.transformed(t)
for name, fn in methods.items():
    err = np.abs(fn(moved) - t.rotation @ frames[name]).max()
    # Mian's x axis has no sign rule, so it may flip
    print(f"{name:7s} max |L(Tp) - R L(p)| = {err:.2e}")

"""Pose from a single correspondence.

A frame at each end of a match fixes the full rotation, so RANSAC only has
to draw one correspondence per hypothesis. Compare with the classical
three-point sampler on the same matches, half of which are wrong.
"""
import numpy as np

from lrfkit.evaluation import Correspondence, one_point_ransac, ransac3_baseline
from lrfkit.geometry import PointCloud, RigidTransform, extract_patch, synth_surface
from lrfkit.baselines import lrf_shot

model = synth_surface("ridge", 6000, seed=12)
gt = RigidTransform.random(seed=13, translation_scale=0.5)
mr = model.resolution_mr
scene_points = gt.inverse().apply(model.points)
scene = PointCloud(scene_points)
rng = np.random.default_rng(0)
keys = rng.choice(len(model), size=60, replace=False)
r = 15 * mr
lm = np.array([lrf_shot(extract_patch(model, int(i), r)) for i in keys])
ls = np.array([lrf_shot(extract_patch(scene, int(i), r)) for i in keys])

corr = [Correspondence(k, k) for k in range(len(keys))]
for k in rng.choice(len(keys), size=30, replace=False):  # half the matches are wrong
    corr[k] = Correspondence(int((k + 7) % len(keys)), int(k))

one = one_point_ransac(corr, model.points[keys], scene_points[keys], lm, ls, iterations=100, mr=mr, gt=gt)
three = ransac3_baseline(corr, model.points[keys], scene_points[keys], iterations=1000, mr=mr, gt=gt)
print(f"one-point: err_r {one.err_r:.2e} deg  err_t {one.err_t:.2e} mr  consensus at hypothesis {one.consensus_iteration}")
print(f"3-point  : err_r {three.err_r:.2e} deg  err_t {three.err_t:.2e} mr  consensus at hypothesis {three.consensus_iteration}")

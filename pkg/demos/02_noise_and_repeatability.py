"""How frames hold up when the scene is noisy or thinned out.

The scene is a moved copy of the model with Gaussian jitter (in mesh
resolutions) or random decimation. MeanCos is 1 for perfectly matching
frames.
"""
import numpy as np

from lrfkit.evaluation import repeatability_experiment
from lrfkit.geometry import RigidTransform, add_gaussian_noise, apply_transform, decimate, synth_surface

model = synth_surface("random-smooth", 6000, seed=3)
gt = RigidTransform.random(seed=4)
moved = apply_transform(model, gt.inverse())  # ground truth maps scene -> model
mr = model.resolution_mr

methods = ["mian", "shot", "toldi", "uniform"]

print("noise (mr) " + " ".join(f"{m:>8s}" for m in methods))
for sigma in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]:
    scene = add_gaussian_noise(moved, sigma, seed=5, mr=mr)
    row = [repeatability_experiment(model, scene, gt, m, n_keypoints=200, seed=0).mean_meancos for m in methods]
    print(f"{sigma:10.1f} " + " ".join(f"{v:8.3f}" for v in row))

print("\nkeep       " + " ".join(f"{m:>8s}" for m in methods))
for keep in [1, 1 / 2, 1 / 4, 1 / 8]:
    scene = decimate(moved, keep, seed=6)
    row = [repeatability_experiment(model, scene, gt, m, n_keypoints=200, seed=0).mean_meancos for m in methods]
    print(f"{keep:10.3f} " + " ".join(f"{v:8.3f}" for v in row))

# Mian leaves its x axis unsigned, so about half its x axes come out flipped

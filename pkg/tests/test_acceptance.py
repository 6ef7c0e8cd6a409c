"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 and 5 share one training run on the synthetic curriculum with
the default schedule; it takes several minutes on a single core.
"""
import filecmp
import shutil
import time

import numpy as np
import pytest

from lrfkit.baselines import lrf_mian, lrf_shot, lrf_toldi, shot_covariance, toldi_weights, triangle_covariance, tangent_projections
from lrfkit.cli import main
from lrfkit.errors import DegenerateGeometryError
from lrfkit.evaluation import Correspondence, get_method, one_point_ransac, ransac3_baseline, repeatability_experiment
from lrfkit.geometry import (
    LocalPatch,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    estimate_normal,
    extract_patch,
    subsample_patch,
    synth_surface,
)
from lrfkit.lrfnet import LrfNetConfig, WeightNet, estimate_lrf
from lrfkit.training import TrainConfig, chamfer_distance, synthetic_curriculum, train

from conftest import fd_relative_errors, random_rotation, report_criterion, tiny_pairs

BENCH_KINDS = ("plane-with-bumps", "ridge", "random-smooth")


@pytest.fixture(scope="module")
def trained():
    """Weight net trained exactly as criterion 4 prescribes, plus its loss trace."""
    cfg = TrainConfig()  # batch 512, lr 1e-4, 5% decay, 20 epochs, seed 0
    start = time.perf_counter()
    pairs = synthetic_curriculum(2000, cfg, kinds=("random-smooth",), noise_mr=0.1)
    net, trace = train(pairs, cfg)
    return net, trace, time.perf_counter() - start


@pytest.fixture(scope="module")
def noisy_benchmark():
    """One held-out surface per kind, scene = moved copy with 0.3 mr noise."""
    bench = {}
    for k, kind in enumerate(BENCH_KINDS):
        model = synth_surface(kind, 6000, 1000 + k)
        gt = RigidTransform.random(2000 + k)
        scene = add_gaussian_noise(apply_transform(model, gt.inverse()), 0.3, seed=3000 + k, mr=model.resolution_mr)
        bench[kind] = (model, scene, gt)
    return bench


def _bench_meancos(bench, fn, n_keypoints=400):
    return {kind: repeatability_experiment(m, s, gt, fn, n_keypoints=n_keypoints, seed=7).mean_meancos
            for kind, (m, s, gt) in bench.items()}


# --- 1 -------------------------------------------------------------------------------------------


def _equivariance_patches(count, seed):
    rng = np.random.default_rng(seed)
    kinds = ("plane-with-bumps", "ridge", "hemisphere", "random-smooth")
    clouds = [synth_surface(kind, 4000, 50 + i) for i, kind in enumerate(kinds)]
    patches = []
    while len(patches) < count:
        cloud = clouds[len(patches) % len(clouds)]
        i = int(rng.integers(len(cloud)))
        patch = subsample_patch(extract_patch(cloud, i, 15 * cloud.resolution_mr), 256, int(rng.integers(2**31)))
        patches.append(patch)
    return patches


def test_criterion_1_rotation_equivariance():
    net = WeightNet.create(seed=1)
    methods = {
        "mian": (lrf_mian, [2]),
        "shot": (lrf_shot, [0, 1, 2]),
        "toldi": (lrf_toldi, [0, 1, 2]),
        "lrfnet-sum1": (lambda p: estimate_lrf(net, p, variant="sum1"), [0, 1, 2]),
        "lrfnet-max": (lambda p: estimate_lrf(net, p, variant="max"), [0, 1, 2]),
    }
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    patches = _equivariance_patches(100, 10)
    worst = {name: 0.0 for name in methods}
    skipped = {name: 0 for name in methods}
    for patch in patches:
        base = {}
        for name, (fn, _) in methods.items():
            try:
                base[name] = fn(patch)
            except DegenerateGeometryError:
                skipped[name] += 1
        for _ in range(20):
            t = RigidTransform(random_rotation(rng), rng.normal(size=3))
            moved = patch.transformed(t)
            for name, lrf in base.items():
                fn, axes = methods[name]
                got = fn(moved)
                want = t.rotation @ lrf
                dev = max(1.0 - got[:, a] @ want[:, a] for a in axes)
                worst[name] = max(worst[name], dev)
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-5 for v in worst.values()) and elapsed < 30 and max(skipped.values()) == 0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report_criterion(1, ok, f"worst 1-cos deviation {detail}; skipped {sum(skipped.values())}; {elapsed:.1f}s (<30s)")
    assert ok


# --- 2 -------------------------------------------------------------------------------------------


def test_criterion_2_perfect_correspondence(trained):
    net = trained[0]
    methods = {"shot": "shot", "toldi": "toldi", "lrfnet": get_method("lrfnet", net)}
    start = time.perf_counter()
    scores = {}
    for name, fn in methods.items():
        values = []
        for k, kind in enumerate(("plane-with-bumps", "ridge", "hemisphere", "random-smooth")):
            model = synth_surface(kind, 5000, 70 + k)
            gt = RigidTransform.random(80 + k)
            res = repeatability_experiment(model, apply_transform(model, gt.inverse()), gt, fn, n_keypoints=250, seed=k)
            values += res.values
        scores[name] = float(np.mean(values))
    elapsed = time.perf_counter() - start
    ok = all(v > 0.999 for v in scores.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.6f}" for k, v in scores.items())
    report_criterion(2, ok, f"exact-copy mean MeanCos {detail} (>0.999); {elapsed:.1f}s (<60s)")
    assert ok


# --- 3 -------------------------------------------------------------------------------------------


def test_criterion_3_gradient_check():
    start = time.perf_counter()
    net = WeightNet.create(hidden=(4,), seed=3)
    assert [w.shape for w in net.weights] == [(4, 2), (1, 4)]
    errs = fd_relative_errors(net, tiny_pairs(seed=21, n_pairs=3, n_points=16), LrfNetConfig(n_points=16, hidden=(4,)))
    elapsed = time.perf_counter() - start
    ok = errs.max() < 1e-4 and elapsed < 10
    report_criterion(3, ok, f"max relative error {errs.max():.2e} over {errs.size} params (<1e-4); {elapsed:.2f}s (<10s)")
    assert ok


# --- 4 -------------------------------------------------------------------------------------------


def test_criterion_4_training_efficacy(trained, noisy_benchmark):
    net, trace, train_time = trained
    first, last = trace[0].mean_loss, trace[-1].mean_loss
    start = time.perf_counter()
    learned = _bench_meancos(noisy_benchmark, get_method("lrfnet", net))
    uniform = _bench_meancos(noisy_benchmark, get_method("uniform"))
    elapsed = train_time + time.perf_counter() - start
    m_learned, m_uniform = np.mean(list(learned.values())), np.mean(list(uniform.values()))
    loss_ok = last < 0.5 * first
    gain_ok = m_learned - m_uniform >= 0.02
    ok = loss_ok and gain_ok and elapsed < 20 * 60 and len(trace) == 20
    report_criterion(
        4, ok,
        f"loss {first:.6f} -> {last:.6f} (ratio {last / first:.3f}, need <0.5); "
        f"MeanCos@0.3mr learned {m_learned:.4f} vs uniform {m_uniform:.4f} (gain {m_learned - m_uniform:+.4f}, need >=0.02); "
        f"{elapsed:.0f}s (<1200s)",
    )
    assert ok


# --- 5 -------------------------------------------------------------------------------------------


def test_criterion_5_ablation_ordering(trained, noisy_benchmark):
    net = trained[0]
    sum1 = _bench_meancos(noisy_benchmark, get_method("lrfnet", net))
    mx = _bench_meancos(noisy_benchmark, get_method("lrfnet-max", net))
    wins = sum(sum1[k] >= mx[k] for k in BENCH_KINDS)
    ok = wins >= 2
    detail = ", ".join(f"{k} {sum1[k]:.3f}/{mx[k]:.3f}" for k in BENCH_KINDS)
    report_criterion(5, ok, f"sum1/max MeanCos {detail}; sum1 >= max on {wins}/3 kinds (need >=2)")
    assert ok


# --- 6 -------------------------------------------------------------------------------------------


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def test_criterion_6_brute_force_oracles():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    worst = {"chamfer": 0.0, "shot": 0.0, "toldi": 0.0, "rops": 0.0}
    for _ in range(50):
        a, b = rng.normal(size=(int(rng.integers(1, 30)), 3)), rng.normal(size=(int(rng.integers(1, 30)), 3))
        ab = sum(min(np.sqrt(((x - y) ** 2).sum()) for y in b) for x in a) / len(a)
        ba = sum(min(np.sqrt(((y - x) ** 2).sum()) for x in a) for y in b) / len(b)
        worst["chamfer"] = max(worst["chamfer"], _rel(chamfer_distance(a, b), min(ab, ba)))

        r = 1.0
        nb = rng.uniform(-0.55, 0.55, size=(int(rng.integers(5, 40)), 3))
        patch = LocalPatch(np.zeros(3), nb, r)
        num, den = np.zeros((3, 3)), 0.0
        for q in nb:
            w = r - np.sqrt((q**2).sum())
            den += w
            for i in range(3):
                for j in range(3):
                    num[i, j] += w * q[i] * q[j]
        worst["shot"] = max(worst["shot"], _rel(shot_covariance(patch), num / den))

        z = rng.normal(size=3)
        z /= np.linalg.norm(z)
        w = toldi_weights(patch, np.zeros(3), z)
        acc = np.zeros(3)
        for q in nb:
            h = q @ z
            wq = (r - np.sqrt((q**2).sum())) ** 2 * h * h
            acc += wq * (q - h * z)
        worst["toldi"] = max(worst["toldi"], _rel(tangent_projections(nb, z).T @ w, acc))

        tri, p = rng.normal(size=(3, 3)), rng.normal(size=3)
        c = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                c += np.outer(tri[i] - p, tri[j] - p)
            c += np.outer(tri[i] - p, tri[i] - p)
        worst["rops"] = max(worst["rops"], _rel(triangle_covariance(tri, p), c / 12.0))
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-9 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report_criterion(6, ok, f"worst relative error over 50 instances: {detail} (<=1e-9); {elapsed:.1f}s (<30s)")
    assert ok


# --- 7 -------------------------------------------------------------------------------------------


def _pose_scenario(seed, n=100, outlier_fraction=0.0):
    rng = np.random.default_rng(seed)
    gt = RigidTransform.random(seed, translation_scale=20.0)
    m_pts = rng.uniform(-25, 25, size=(n, 3))  # mr = 1
    s_pts = gt.inverse().apply(m_pts)
    m_lrf = np.array([random_rotation(rng) for _ in range(n)])
    s_lrf = np.einsum("ab,nbc->nac", gt.rotation.T, m_lrf)
    corr = [Correspondence(i, i) for i in range(n)]
    for k in rng.choice(n, size=int(round(outlier_fraction * n)), replace=False):
        corr[k] = Correspondence(int((k + 1 + rng.integers(n - 1)) % n), int(k))
    return gt, m_pts, s_pts, m_lrf, s_lrf, corr


def test_criterion_7_pose_estimation():
    start = time.perf_counter()
    exact_ok = True
    for seed in range(10):
        gt, m, s, lm, ls, corr = _pose_scenario(seed)
        est = one_point_ransac(corr, m, s, lm, ls, iterations=100, seed=seed, gt=gt)
        exact_ok &= est.err_r < 0.01 and est.err_t < 0.01 and est.iterations <= 100

    seeds = range(30)
    robust_ok = True
    one_iters, three_iters = [], []
    for seed in seeds:
        gt, m, s, lm, ls, corr = _pose_scenario(100 + seed, outlier_fraction=0.5)
        one = one_point_ransac(corr, m, s, lm, ls, iterations=100, seed=seed, gt=gt)
        robust_ok &= one.err_r < 1.0 and one.err_t < 1.0
        # hypotheses the classical sampler needs to match the one-point consensus
        three = ransac3_baseline(corr, m, s, iterations=10000, seed=seed, gt=gt, stop_inliers=one.inliers)
        robust_ok &= three.inliers >= one.inliers
        one_iters.append(one.consensus_iteration)
        three_iters.append(three.iterations)
    ratio = float(np.mean(three_iters) / np.mean(one_iters))
    draws = 3 * ratio  # three correspondences per classical hypothesis
    elapsed = time.perf_counter() - start
    ok = exact_ok and robust_ok and ratio >= 10 and elapsed < 60
    report_criterion(
        7, ok,
        f"exact {'ok' if exact_ok else 'FAILED'}; 50% outliers {'ok' if robust_ok else 'FAILED'}; "
        f"hypotheses to consensus 3-pt/1-pt = {np.mean(three_iters):.1f}/{np.mean(one_iters):.1f} = {ratio:.2f}x "
        f"(need >=10x; correspondence draws {draws:.1f}x); {elapsed:.1f}s (<60s)",
    )
    assert ok


# --- 8 -------------------------------------------------------------------------------------------


def _same_tree(a, b):
    files = sorted(p.name for p in a.iterdir())
    cmp = filecmp.dircmp(a, b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors and not cmp.left_only and not cmp.right_only, files


def test_criterion_8_cli_determinism(tmp_path, capsys):
    root = tmp_path / "run"
    synth, manifest, weights = root / "synth", str(root / "synth" / "manifest.json"), str(root / "train" / "weights.json")
    commands = [
        ["synth", "--out", str(synth), "--kinds", "ridge", "hemisphere", "--n-points", "2000",
         "--noise-levels", "0", "0.3", "--keep-fractions", "0.5", "--seed", "4"],
        ["train", "--out", str(root / "train"), "--data", manifest, "--epochs", "2", "--n-pairs", "48",
         "--batch-size", "16", "--seed", "4"],
    ]
    for mode in ("repeat", "match", "pose"):
        commands.append(["eval", "--out", str(root / f"eval-{mode}"), "--mode", mode, "--data", manifest,
                         "--methods", "shot", "toldi", "lrfnet", "--weights", weights, "--n-keypoints", "60", "--seed", "4"])
    commands.append(["info", weights])
    runs = []
    for rep in range(2):
        capsys.readouterr()
        codes = [main(cmd) for cmd in commands]
        runs.append((codes, capsys.readouterr().out))
        if rep == 0:
            shutil.copytree(root, tmp_path / "first")
    ok = runs[0] == runs[1] and all(c == 0 for c in runs[0][0])
    checked = []
    for sub in ("synth", "train", "eval-repeat", "eval-match", "eval-pose"):
        same, files = _same_tree(tmp_path / "first" / sub, root / sub)
        ok &= same
        checked += files
    report_criterion(8, ok, f"{len(checked)} output files plus info text byte-identical across reruns")
    assert ok

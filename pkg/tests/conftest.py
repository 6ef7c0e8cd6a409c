import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("lrfkit", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lrfkit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def bumpy_patch_points(rng, n=200, r=1.0):
    """Points of a gently curved surface around the origin, within radius r."""
    xy = rng.uniform(-r, r, size=(4 * n, 2))
    xy = xy[np.hypot(xy[:, 0], xy[:, 1]) < 0.95 * r][:n]
    z = 0.25 * xy[:, 0] ** 2 - 0.1 * xy[:, 1] ** 2 + 0.15 * xy[:, 0] * xy[:, 1] + 0.05 * xy[:, 0] ** 3
    return np.column_stack([xy, z])


def tiny_pairs(seed=0, n_pairs=3, n_points=16, noise=0.01):
    """Small corresponding patch pairs: a curved patch and a rotated, jittered copy."""
    from lrfkit.geometry import LocalPatch, RigidTransform
    from lrfkit.training import PatchPair

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        pts = bumpy_patch_points(rng, n_points)
        gt = RigidTransform(random_rotation(rng), rng.normal(size=3))
        model = LocalPatch(np.zeros(3), pts, 1.0)
        to_scene = gt.inverse()
        scene_pts = to_scene.apply(pts) + rng.normal(scale=noise, size=pts.shape)
        scene = LocalPatch(to_scene.apply(np.zeros(3)), scene_pts, 1.0)
        pairs.append(PatchPair(model, scene, gt))
    return pairs


def fd_relative_errors(net, pairs, lrf_cfg, step=1e-5):
    """Per-parameter relative error between analytic and central-difference gradients."""
    from lrfkit.training import loss_gradient, prepare_pairs, batch_loss_and_grad

    grads = loss_gradient(net, pairs, lrf_cfg=lrf_cfg)
    prepared = prepare_pairs(pairs, lrf_cfg)
    params = net.params()
    errs = []
    for k, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += step
            minus[k][idx] -= step
            lp = batch_loss_and_grad(net.with_params(plus), prepared, need_grad=False)[0]
            lm = batch_loss_and_grad(net.with_params(minus), prepared, need_grad=False)[0]
            fd = (lp - lm) / (2 * step)
            a = grads[k][idx]
            errs.append(abs(a - fd) / max(abs(a), abs(fd), 1e-10))
    return np.array(errs)


ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrfkit.errors import InvalidInputError, TrainingDivergedError
from lrfkit.geometry import LocalPatch, RigidTransform, synth_surface
from lrfkit.lrfnet import LrfNetConfig, WeightNet, estimate_lrf
from lrfkit.training import (
    AdamState,
    PatchPair,
    TrainConfig,
    adam_step,
    chamfer_distance,
    chamfer_with_grad,
    generate_pairs,
    loss_gradient,
    pair_loss,
    synthetic_curriculum,
    trace_to_csv,
    train,
)

from conftest import fd_relative_errors, random_rotation, tiny_pairs

seeds = st.integers(0, 2**31 - 1)


# --- Chamfer ---------------------------------------------------------------------------


def chamfer_oracle(a, b, mode="min"):
    def directed(p, q):
        total = 0.0
        for x in p:
            total += min(np.sqrt(((x - y) ** 2).sum()) for y in q)
        return total / len(p)

    ab, ba = directed(a, b), directed(b, a)
    return min(ab, ba) if mode == "min" else ab + ba


@given(seeds)
def test_chamfer_identical_sets(seed):
    a = np.random.default_rng(seed).normal(size=(20, 3))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_hand_example():
    a, b = [[0, 0, 0]], [[1, 0, 0], [2, 0, 0]]
    assert chamfer_distance(a, b) == 1.0
    assert chamfer_distance(a, b, mode="sum") == 2.5


@given(seeds, st.sampled_from(["min", "sum"]))
def test_chamfer_matches_double_loop(seed, mode):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    assert chamfer_distance(a, b, mode) == pytest.approx(chamfer_oracle(a, b, mode), rel=1e-12)


def test_chamfer_rejects_empty():
    with pytest.raises(InvalidInputError):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])


@pytest.mark.parametrize("mode", ["min", "sum"])
def test_chamfer_grad_fd(rng, mode):
    a, b = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
    _, ga, gb = chamfer_with_grad(a, b, mode)
    h = 1e-6
    for pts, g in ((a, ga), (b, gb)):
        for idx in np.ndindex(pts.shape):
            old = pts[idx]
            pts[idx] = old + h
            up = chamfer_distance(a, b, mode)
            pts[idx] = old - h
            down = chamfer_distance(a, b, mode)
            pts[idx] = old
            assert g[idx] == pytest.approx((up - down) / (2 * h), abs=1e-7)


# --- pair generation ---------------------------------------------------------------------


def _surface():
    return synth_surface("random-smooth", 3000, 2)


def test_pairs_identity_identical():
    cloud = _surface()
    pairs = generate_pairs(cloud, RigidTransform.identity(), 5, 10 * cloud.resolution_mr, TrainConfig(seed=1))
    for p in pairs:
        np.testing.assert_array_equal(p.model_patch.neighbors, p.scene_patch.neighbors)


def test_pairs_rotation_exact():
    cloud = _surface()
    gt = RigidTransform(random_rotation(np.random.default_rng(3)), np.zeros(3))
    pairs = generate_pairs(cloud, gt, 5, 10 * cloud.resolution_mr, TrainConfig(seed=2), subsample=False)
    for p in pairs:
        np.testing.assert_allclose(gt.apply(p.scene_patch.neighbors), p.model_patch.neighbors, atol=1e-9)


def test_pairs_noisy_correspondence():
    cloud = _surface()
    mr = cloud.resolution_mr
    gt = RigidTransform.random(4)
    pairs = generate_pairs(cloud, gt, 20, 10 * mr, TrainConfig(seed=3), noise_mr=0.3)
    for p in pairs:
        assert np.linalg.norm(gt.apply(p.scene_patch.keypoint) - p.model_patch.keypoint) <= mr
        assert len(p.model_patch) <= 256


def test_curriculum_size_and_determinism():
    cfg = TrainConfig(seed=5)
    a = synthetic_curriculum(10, cfg, n_surfaces=3, n_points=1500)
    b = synthetic_curriculum(10, cfg, n_surfaces=3, n_points=1500)
    assert len(a) == 10
    np.testing.assert_array_equal(a[7].scene_patch.neighbors, b[7].scene_patch.neighbors)


# --- loss -------------------------------------------------------------------------------------


def test_loss_identical_patches_zero():
    pair = tiny_pairs(1, 1, 64)[0]
    same = PatchPair(pair.model_patch, pair.model_patch, RigidTransform.identity())
    assert pair_loss(WeightNet.create(seed=2), same) == pytest.approx(0.0, abs=1e-12)


def test_loss_rotated_copy_zero():
    pair = tiny_pairs(2, 1, 64, noise=0.0)[0]
    assert pair_loss(WeightNet.create(seed=2), pair) == pytest.approx(0.0, abs=1e-9)


@given(seeds)
def test_loss_matches_straight_line(seed):
    net = WeightNet.create(seed=seed % 1000)
    pair = tiny_pairs(seed, 1, 48, noise=0.05)[0]
    cfg = LrfNetConfig()
    frames = [estimate_lrf(net, p, cfg=cfg) for p in (pair.model_patch, pair.scene_patch)]
    local = [p.offsets @ f for p, f in zip((pair.model_patch, pair.scene_patch), frames)]
    expected = chamfer_oracle(local[0], local[1])
    assert pair_loss(net, pair, lrf_cfg=cfg) == pytest.approx(expected, rel=1e-9)


def test_zero_loss_batch_zero_gradient():
    pair = tiny_pairs(3, 1, 32, noise=0.0)[0]
    grads = loss_gradient(WeightNet.create(seed=1), [pair, pair])
    assert max(np.abs(g).max() for g in grads) < 1e-9


def test_gradient_matches_finite_differences():
    net = WeightNet.create(hidden=(4,), seed=7)
    errs = fd_relative_errors(net, tiny_pairs(11), LrfNetConfig(n_points=16, hidden=(4,)))
    assert errs.max() < 1e-4


def test_gradient_duplicate_pair_unchanged():
    net = WeightNet.create(hidden=(4, 4), seed=1)
    pairs = tiny_pairs(5, 2, 24)
    a = loss_gradient(net, pairs)
    b = loss_gradient(net, pairs + pairs)
    for ga, gb in zip(a, b):
        np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-15)


# --- Adam -------------------------------------------------------------------------------------


def test_adam_zero_gradient():
    net = WeightNet.create(hidden=(3,), seed=0)
    state = AdamState.for_net(net)
    new, st2 = adam_step(net, state, [np.zeros_like(p) for p in net.params()], 1e-3)
    for a, b in zip(net.params(), new.params()):
        np.testing.assert_array_equal(a, b)
    assert st2.step == 1


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6))
def test_adam_first_step_is_sign(g):
    net = WeightNet.create(hidden=(1,), seed=0)
    grads = [np.zeros_like(p) for p in net.params()]
    grads[1][0] = g
    new, _ = adam_step(net, AdamState.for_net(net), grads, 1e-4)
    delta = new.params()[1][0] - net.params()[1][0]
    assert delta == pytest.approx(-1e-4 * np.sign(g), rel=0.01)


def test_adam_non_finite_raises():
    net = WeightNet.create(hidden=(2,), seed=0)
    grads = [np.full_like(p, np.nan) for p in net.params()]
    with pytest.raises(TrainingDivergedError):
        adam_step(net, AdamState.for_net(net), grads, 1e-3)


# --- schedule and training ---------------------------------------------------------------


def test_final_epoch_lr():
    cfg = TrainConfig()
    assert cfg.epochs == 20
    assert cfg.lr_at(19) == pytest.approx(1e-4 * 0.95**19, rel=1e-12)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(chamfer="max")


def test_train_deterministic():
    pairs = tiny_pairs(8, 12, 32)
    cfg = TrainConfig(batch_size=4, epochs=3, learning_rate=1e-3, n_points=32, seed=1)
    net_a, trace_a = train(pairs, cfg, LrfNetConfig(n_points=32, hidden=(4, 4)))
    net_b, trace_b = train(pairs, cfg, LrfNetConfig(n_points=32, hidden=(4, 4)))
    assert trace_to_csv(trace_a) == trace_to_csv(trace_b)
    for a, b in zip(net_a.params(), net_b.params()):
        np.testing.assert_array_equal(a, b)
    assert [s.epoch for s in trace_a] == [0, 1, 2]
    assert trace_a[2].lr == pytest.approx(1e-3 * 0.95**2)
    assert trace_to_csv(trace_a).splitlines()[0] == "epoch,mean_loss,skipped_pairs,lr"


def test_train_lowers_loss_at_high_rate():
    pairs = tiny_pairs(9, 16, 48, noise=0.02)
    cfg = TrainConfig(batch_size=16, epochs=15, learning_rate=1e-2, decay_per_epoch=0.0, n_points=48, seed=0)
    _, trace = train(pairs, cfg, LrfNetConfig(n_points=48, hidden=(8, 8)))
    assert trace[-1].mean_loss < trace[0].mean_loss

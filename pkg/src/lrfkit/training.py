"""Weakly supervised Siamese training of the weight network.

Training data are corresponding patch pairs cut from a model cloud and a
rigidly moved (optionally perturbed) copy of it. Both patches go through
the same network; each is rotated into its own estimated frame and the
Chamfer distance between the two rotated patches is the loss. No frame
labels are ever needed.

The z-axis comes from the normal and does not depend on the network, so
everything up to the network input is computed once per pair.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .baselines import tangent_projections
from .errors import (
    DegenerateGeometryError,
    EmptyPatchError,
    InsufficientDataError,
    InvalidInputError,
    TrainingDivergedError,
)
from .geometry import (
    LocalPatch,
    PointCloud,
    RigidTransform,
    add_gaussian_noise,
    apply_transform,
    decimate,
    estimate_normal,
    extract_patch,
    subsample_patch,
    synth_surface,
)
from .lrfnet import LrfNetConfig, WeightNet, network_inputs

log = logging.getLogger(__name__)

CHAMFER_MODES = ("min", "sum")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-4
    decay_per_epoch: float = 0.05
    epochs: int = 20
    n_points: int = 256
    seed: int = 0
    chamfer: str = "min"
    variant: str = "sum1"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.n_points < 3:
            raise InvalidInputError("batch_size, epochs and n_points must be positive")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not 0 <= self.decay_per_epoch < 1:
            raise InvalidInputError("decay_per_epoch must lie in [0, 1)")
        if self.chamfer not in CHAMFER_MODES:
            raise InvalidInputError(f"chamfer must be one of {CHAMFER_MODES}")
        if self.variant not in ("sum1", "sum2"):
            raise InvalidInputError("only the sum1 and sum2 variants are trainable")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * (1.0 - self.decay_per_epoch) ** epoch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PatchPair:
    model_patch: LocalPatch
    scene_patch: LocalPatch
    gt: RigidTransform  # scene coordinates -> model coordinates


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: WeightNet) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()])


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    skipped_pairs: int
    lr: float


# --- data ------------------------------------------------------------------------


def generate_pairs(
    model: PointCloud,
    gt: RigidTransform,
    n_pairs: int,
    r: float,
    cfg: TrainConfig,
    noise_mr: float = 0.0,
    keep_fraction: float = 1.0,
    subsample: bool = True,
) -> List[PatchPair]:
    """Sample corresponding patch pairs between ``model`` and a moved copy.

    The scene is ``gt.inverse()`` applied to the model, then decimated and
    noised. Pairs whose scene keypoint lands farther than one mesh
    resolution from the model keypoint are rejected and redrawn.
    """
    mr = model.resolution_mr
    rng = np.random.default_rng(cfg.seed)
    scene = apply_transform(model, gt.inverse())
    scene = decimate(scene, keep_fraction, int(rng.integers(2**31)))
    scene = add_gaussian_noise(scene, noise_mr, int(rng.integers(2**31)), mr=mr)
    to_scene = gt.inverse()

    pairs: List[PatchPair] = []
    attempts = 0
    while len(pairs) < n_pairs:
        if attempts >= 10 * n_pairs:
            raise InsufficientDataError(f"only {len(pairs)} of {n_pairs} valid pairs after {attempts} draws")
        attempts += 1
        i = int(rng.integers(len(model)))
        sub_seed = int(rng.integers(2**31))
        dist, j = scene.tree.query(to_scene.apply(model.points[i]))
        if dist > mr:
            continue
        try:
            mp = extract_patch(model, i, r)
            sp = extract_patch(scene, int(j), r)
        except EmptyPatchError:
            continue
        if subsample:
            mp = subsample_patch(mp, cfg.n_points, sub_seed)
            sp = subsample_patch(sp, cfg.n_points, sub_seed)
        pairs.append(PatchPair(mp, sp, gt))
    return pairs


def synthetic_curriculum(
    n_pairs: int,
    cfg: TrainConfig,
    kinds: Sequence[str] = ("random-smooth",),
    n_surfaces: int = 8,
    n_points: int = 6000,
    radius_mr: float = 15.0,
    noise_mr: float = 0.1,
    seed: Optional[int] = None,
) -> List[PatchPair]:
    """Pairs from several random surfaces, each under its own random rotation."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    pairs: List[PatchPair] = []
    per = [n_pairs // n_surfaces + (1 if s < n_pairs % n_surfaces else 0) for s in range(n_surfaces)]
    for s, count in enumerate(per):
        if count == 0:
            continue
        kind = kinds[s % len(kinds)]
        model = synth_surface(kind, n_points, int(rng.integers(2**31)))
        gt = RigidTransform.random(int(rng.integers(2**31)))
        sub_cfg = TrainConfig(**{**cfg.to_dict(), "seed": int(rng.integers(2**31))})
        pairs += generate_pairs(model, gt, count, radius_mr * model.resolution_mr, sub_cfg, noise_mr=noise_mr)
    return pairs


# --- loss --------------------------------------------------------------------------


def _directed(a: np.ndarray, b: np.ndarray):
    d, idx = cKDTree(b).query(a)
    return float(d.mean()), d, idx


def chamfer_distance(a, b, mode: str = "min") -> float:
    """Chamfer distance from the two directed mean nearest-neighbor distances.

    ``mode="min"`` keeps the smaller directed term, ``"sum"`` adds them.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance of an empty set")
    ab, _, _ = _directed(a, b)
    ba, _, _ = _directed(b, a)
    if mode == "min":
        return min(ab, ba)
    if mode == "sum":
        return ab + ba
    raise InvalidInputError(f"chamfer mode must be one of {CHAMFER_MODES}")


def _directed_grad(a, b, ga, gb, scale):
    """Accumulate the gradient of ``scale * mean_a min_b |a - b|``."""
    d, idx = cKDTree(b).query(a)
    diff = a - b[idx]
    unit = np.zeros_like(diff)
    nz = d > 0
    unit[nz] = diff[nz] / d[nz, None]
    unit *= scale / len(a)
    ga += unit
    np.add.at(gb, idx, -unit)
    return float(d.mean())


def chamfer_with_grad(a: np.ndarray, b: np.ndarray, mode: str = "min"):
    """Chamfer distance and its gradient w.r.t. both point sets.

    Nearest-neighbor assignments are held fixed (subgradient through the
    min); with ``mode="min"`` ties between the two directions go to a->b.
    """
    ab, _, _ = _directed(a, b)
    ba, _, _ = _directed(b, a)
    ga, gb = np.zeros_like(a), np.zeros_like(b)
    if mode == "sum":
        _directed_grad(a, b, ga, gb, 1.0)
        _directed_grad(b, a, gb, ga, 1.0)
        return ab + ba, ga, gb
    if ab <= ba:
        _directed_grad(a, b, ga, gb, 1.0)
        return ab, ga, gb
    _directed_grad(b, a, gb, ga, 1.0)
    return ba, ga, gb


@dataclass(frozen=True, eq=False)
class _PatchFeatures:
    offsets: np.ndarray
    z: np.ndarray
    inputs: np.ndarray
    proj: np.ndarray


def _features(patch: LocalPatch, lrf_cfg: LrfNetConfig, variant: str) -> _PatchFeatures:
    z = estimate_normal(patch, subset_fraction=lrf_cfg.z_subset_fraction)
    off = patch.offsets
    return _PatchFeatures(off, z, network_inputs(patch, z, variant), tangent_projections(off, z))


def prepare_pairs(pairs: Iterable[PatchPair], lrf_cfg: Optional[LrfNetConfig] = None, variant: str = "sum1"):
    """Network-independent per-pair data; pairs with a degenerate normal become ``None``."""
    lrf_cfg = lrf_cfg or LrfNetConfig()
    out = []
    for pair in pairs:
        try:
            out.append((_features(pair.model_patch, lrf_cfg, variant), _features(pair.scene_patch, lrf_cfg, variant)))
        except DegenerateGeometryError:
            out.append(None)
    return out


def _frame_and_points(f: _PatchFeatures, w: np.ndarray):
    s = f.proj.T @ w
    norm = np.linalg.norm(s)
    if not norm > 1e-12 * (np.abs(w) @ np.linalg.norm(f.proj, axis=1)):
        raise DegenerateGeometryError("weighted vector sum vanishes")
    x = s / norm
    lrf = np.column_stack([x, np.cross(f.z, x), f.z])
    return lrf, f.offsets @ lrf, norm


def _weight_grad(f: _PatchFeatures, lrf, norm, g_local):
    """Back-propagate d(loss)/d(local coordinates) to the per-point weights."""
    g_frame = f.offsets.T @ g_local
    x = lrf[:, 0]
    # y = z × x  =>  d/dx (g . y) = g × z
    gx = g_frame[:, 0] + np.cross(g_frame[:, 1], f.z)
    gs = (gx - x * (x @ gx)) / norm
    return f.proj @ gs


def batch_loss_and_grad(net: WeightNet, prepared: Sequence, chamfer: str = "min", need_grad: bool = True):
    """Mean loss, mean parameter gradient and skip count over prepared pairs."""
    live = [p for p in prepared if p is not None]
    skipped = len(prepared) - len(live)
    if not live:
        return float("nan"), None, skipped
    feats = [f for pair in live for f in pair]
    inputs = np.concatenate([f.inputs for f in feats])
    weights, cache = net.forward(inputs, return_cache=True)
    bounds = np.cumsum([0] + [len(f.inputs) for f in feats])

    losses = []
    dw = np.zeros_like(weights)
    for k in range(len(live)):
        fm, fs = feats[2 * k], feats[2 * k + 1]
        wm = weights[bounds[2 * k]:bounds[2 * k + 1]]
        ws = weights[bounds[2 * k + 1]:bounds[2 * k + 2]]
        try:
            lm, tm, nm = _frame_and_points(fm, wm)
            ls, ts, ns = _frame_and_points(fs, ws)
        except DegenerateGeometryError:
            skipped += 1
            continue
        loss, gm, gs = chamfer_with_grad(tm, ts, chamfer)
        losses.append(loss)
        if need_grad:
            dw[bounds[2 * k]:bounds[2 * k + 1]] = _weight_grad(fm, lm, nm, gm)
            dw[bounds[2 * k + 1]:bounds[2 * k + 2]] = _weight_grad(fs, ls, ns, gs)
    if not losses:
        return float("nan"), None, skipped
    mean_loss = float(np.mean(losses))
    if not need_grad:
        return mean_loss, None, skipped
    grads = net.backward(cache, dw / len(losses))
    return mean_loss, grads, skipped


def pair_loss(net: WeightNet, pair: PatchPair, cfg: Optional[TrainConfig] = None, lrf_cfg: Optional[LrfNetConfig] = None) -> float:
    cfg = cfg or TrainConfig()
    prepared = prepare_pairs([pair], lrf_cfg, cfg.variant)
    if prepared[0] is None:
        raise DegenerateGeometryError("pair has a degenerate normal")
    loss, _, skipped = batch_loss_and_grad(net, prepared, cfg.chamfer, need_grad=False)
    if skipped:
        raise DegenerateGeometryError("pair has a vanishing x-axis sum")
    return loss


def loss_gradient(net: WeightNet, batch: Sequence[PatchPair], cfg: Optional[TrainConfig] = None, lrf_cfg: Optional[LrfNetConfig] = None) -> list:
    """Mean gradient of the pair loss over ``batch`` (degenerate pairs skipped)."""
    if not batch:
        raise InvalidInputError("empty batch")
    cfg = cfg or TrainConfig()
    _, grads, _ = batch_loss_and_grad(net, prepare_pairs(batch, lrf_cfg, cfg.variant), cfg.chamfer)
    if grads is None:
        return [np.zeros_like(p) for p in net.params()]
    return grads


# --- optimization --------------------------------------------------------------------


def adam_step(net: WeightNet, state: AdamState, grads: Sequence[np.ndarray], lr: float):
    """One bias-corrected Adam update; returns ``(new_net, new_state)``."""
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise InvalidInputError("gradient does not match the network's parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDivergedError("non-finite gradient component")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1**t, 1 - b2**t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    if not all(np.all(np.isfinite(p)) for p in new):
        raise TrainingDivergedError("parameters became non-finite")
    return net.with_params(new), AdamState(m, v, t, b1, b2, state.eps)


def train(
    pairs: Sequence[PatchPair],
    cfg: TrainConfig,
    lrf_cfg: Optional[LrfNetConfig] = None,
    net: Optional[WeightNet] = None,
    progress=None,
):
    """Fit the weight network; returns ``(net, [EpochStats, ...])``."""
    if not pairs:
        raise InsufficientDataError("no training pairs")
    lrf_cfg = lrf_cfg or LrfNetConfig(n_points=cfg.n_points, seed=cfg.seed)
    in_dim = 6 if cfg.variant == "sum2" else 2
    if net is None:
        net = WeightNet.create(lrf_cfg.hidden, in_dim=in_dim, seed=cfg.seed)
    prepared = prepare_pairs(pairs, lrf_cfg, cfg.variant)
    state = AdamState.for_net(net)
    rng = np.random.default_rng(cfg.seed)
    trace: List[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(prepared))
        loss_sum, n_live, skipped = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            loss, grads, n_skip = batch_loss_and_grad(net, batch, cfg.chamfer)
            skipped += n_skip
            if grads is None:
                continue
            live = len(batch) - n_skip
            loss_sum += loss * live
            n_live += live
            net, state = adam_step(net, state, grads, lr)
        stats = EpochStats(epoch, loss_sum / n_live if n_live else float("nan"), skipped, lr)
        trace.append(stats)
        log.info("epoch %d  loss %.6g  skipped %d  lr %.3g", epoch, stats.mean_loss, skipped, lr)
        if progress is not None:
            progress(stats)
    return net, trace


def trace_to_csv(trace: Sequence[EpochStats]) -> str:
    rows = ["epoch,mean_loss,skipped_pairs,lr"]
    rows += [f"{s.epoch},{s.mean_loss!r},{s.skipped_pairs},{s.lr!r}" for s in trace]
    return "\n".join(rows) + "\n"

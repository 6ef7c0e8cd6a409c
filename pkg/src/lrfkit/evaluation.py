"""Repeatability, descriptor matching and pose-estimation harnesses.

Ground-truth transforms map scene coordinates into model coordinates
throughout, so a scene frame is compared with a model frame after rotating
its axes by ``gt.rotation``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import lrf_mian, lrf_rops, lrf_shot, lrf_toldi
from .errors import (
    DegenerateGeometryError,
    EmptyPatchError,
    InsufficientDataError,
    InvalidInputError,
    PoseFailureError,
)
from .geometry import LocalPatch, PointCloud, RigidTransform, as_point, extract_patch, triangulate_patch, estimate_normal
from .lrfnet import LrfNetConfig, WeightNet, estimate_lrf

METHOD_NAMES = ("mian", "shot", "rops", "toldi", "lrfnet", "lrfnet-max", "lrfnet-sum2", "uniform")
NET_METHODS = ("lrfnet", "lrfnet-max", "lrfnet-sum2")


def get_method(name: str, net: Optional[WeightNet] = None, lrf_cfg: Optional[LrfNetConfig] = None) -> Callable:
    """Return ``f(patch) -> lrf`` for a method name.

    ``uniform`` is the learned pipeline with every weight equal, i.e. the
    unweighted sum of tangent projections.
    """
    if name == "mian":
        return lrf_mian
    if name == "shot":
        return lrf_shot
    if name == "toldi":
        return lrf_toldi
    if name == "rops":
        def rops(patch):
            mesh = triangulate_patch(patch, estimate_normal(patch))
            return lrf_rops(mesh, patch.keypoint, patch.radius)
        return rops
    if name == "uniform":
        flat = WeightNet.uniform(hidden=(1,))
        return lambda patch: estimate_lrf(flat, patch, cfg=lrf_cfg)
    if name in NET_METHODS:
        if net is None:
            raise InvalidInputError(f"method {name!r} needs a trained weight network")
        variant = {"lrfnet": "sum1", "lrfnet-max": "max", "lrfnet-sum2": "sum2"}[name]
        return lambda patch: estimate_lrf(net, patch, cfg=lrf_cfg, variant=variant)
    raise InvalidInputError(f"unknown method {name!r}; valid names: {', '.join(METHOD_NAMES)}")


# --- repeatability -----------------------------------------------------------------


def mean_cos(lrf_m, lrf_s, gt) -> float:
    """Average cosine between the x axes and between the z axes after alignment."""
    rot = gt.rotation if isinstance(gt, RigidTransform) else np.asarray(gt, dtype=np.float64)
    lm = np.asarray(lrf_m, dtype=np.float64)
    ls = rot @ np.asarray(lrf_s, dtype=np.float64)
    cx = float(np.clip(lm[:, 0] @ ls[:, 0], -1.0, 1.0))
    cz = float(np.clip(lm[:, 2] @ ls[:, 2], -1.0, 1.0))
    return (cx + cz) / 2.0


@dataclass(frozen=True)
class RepeatabilityResult:
    mean_meancos: float
    n_valid: int
    n_skipped: int
    values: tuple = ()


def repeatability_experiment(
    model: PointCloud,
    scene: PointCloud,
    gt: RigidTransform,
    method,
    n_keypoints: int = 1000,
    r: Optional[float] = None,
    seed: int = 0,
    mr: Optional[float] = None,
) -> RepeatabilityResult:
    """Mean MeanCos over randomly drawn corresponding keypoints.

    ``method`` is a name from :data:`METHOD_NAMES` or a ``f(patch)``
    callable. ``r`` defaults to 15 mr; ``mr`` to the model's resolution.
    """
    fn = get_method(method) if isinstance(method, str) else method
    mr = model.resolution_mr if mr is None else mr
    r = 15.0 * mr if r is None else r
    to_scene = gt.inverse()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(model), size=min(n_keypoints, len(model)), replace=False)
    dist, nearest = scene.tree.query(to_scene.apply(model.points[picks]))
    values, skipped = [], 0
    for i, d, j in zip(picks, dist, nearest):
        if d > mr:
            continue
        try:
            lm = fn(extract_patch(model, int(i), r))
            ls = fn(extract_patch(scene, int(j), r))
        except (DegenerateGeometryError, EmptyPatchError):
            skipped += 1
            continue
        values.append(mean_cos(lm, ls, gt))
    if not values:
        raise InsufficientDataError("no valid corresponding keypoints")
    return RepeatabilityResult(float(np.mean(values)), len(values), skipped, tuple(values))


# --- description and matching ---------------------------------------------------------


def simple_descriptor(patch: LocalPatch, keypoint=None, lrf=None, bins: int = 5) -> np.ndarray:
    """L1-normalized ``bins**3`` occupancy histogram of the patch in its frame."""
    if bins < 2:
        raise InvalidInputError("bins must be >= 2")
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    local = (patch.neighbors - p) @ np.asarray(lrf, dtype=np.float64) / patch.radius
    cell = np.clip(np.floor((local + 1.0) * bins / 2.0).astype(np.int64), 0, bins - 1)
    flat = (cell[:, 0] * bins + cell[:, 1]) * bins + cell[:, 2]
    hist = np.bincount(flat, minlength=bins**3).astype(np.float64)
    return hist / hist.sum()


@dataclass(frozen=True)
class Correspondence:
    model_index: int
    scene_index: int
    similarity: float = 0.0


def _nn_ratio(model_desc, scene_desc):
    """For each scene descriptor: nearest model index, its distance, and the NN/2nd-NN ratio."""
    md = np.asarray(model_desc, dtype=np.float64)
    sd = np.asarray(scene_desc, dtype=np.float64)
    if len(md) == 0 or len(sd) == 0:
        raise InsufficientDataError("empty descriptor set")
    d = np.linalg.norm(sd[:, None, :] - md[None, :, :], axis=-1)
    order = np.argsort(d, axis=1, kind="stable")
    best = order[:, 0]
    d1 = d[np.arange(len(sd)), best]
    if md.shape[0] > 1:
        d2 = d[np.arange(len(sd)), order[:, 1]]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(d2 > 0, d1 / d2, np.where(d1 > 0, np.inf, 1.0))
    else:
        ratio = np.zeros(len(sd))
    return best, d1, ratio


def rpc_curve(model_descriptors, scene_descriptors, ground_truth_matches, thresholds):
    """Recall and 1-precision of ratio-test matching at each threshold.

    A scene descriptor is matched to its nearest model descriptor when the
    nearest/second-nearest distance ratio is at most the threshold. Returns
    a list of ``(recall, one_minus_precision)``.
    """
    truth = {(int(m), int(s)) for m, s in ground_truth_matches}
    if not truth:
        raise InsufficientDataError("no ground-truth correspondences")
    best, _, ratio = _nn_ratio(model_descriptors, scene_descriptors)
    correct = np.array([(int(m), s) in truth for s, m in enumerate(best)])
    out = []
    for tau in thresholds:
        matched = ratio <= tau
        n_match = int(matched.sum())
        n_true = int((matched & correct).sum())
        recall = n_true / len(truth)
        one_minus_precision = (n_match - n_true) / n_match if n_match else 0.0
        out.append((recall, one_minus_precision))
    return out


def match_descriptors(model_desc, scene_desc, keep: int = 100) -> list:
    """Nearest-neighbor correspondences, the ``keep`` most similar (smallest L2) first."""
    best, d1, _ = _nn_ratio(model_desc, scene_desc)
    order = np.argsort(d1, kind="stable")[:keep]
    return [Correspondence(int(best[s]), int(s), float(d1[s])) for s in order]


# --- pose estimation -----------------------------------------------------------------


def kabsch(src, dst, weights=None) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape or len(src) < 1:
        raise InvalidInputError("kabsch needs matching non-empty point sets")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    h = ((src - cs) * w[:, None]).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, cd - rot @ cs)


def _keypoint(obj) -> np.ndarray:
    return obj.keypoint if isinstance(obj, LocalPatch) else as_point(obj)


def pose_from_correspondence(model_patch, scene_patch, lrf_m, lrf_s) -> RigidTransform:
    """Scene-to-model pose from one frame-equipped correspondence.

    Builds three virtual pairs (keypoint, keypoint + x, keypoint + z) in each
    frame and aligns them with SVD. ``model_patch``/``scene_patch`` may be
    patches or bare keypoints.
    """
    pm, ps = _keypoint(model_patch), _keypoint(scene_patch)
    lm, ls = np.asarray(lrf_m, dtype=np.float64), np.asarray(lrf_s, dtype=np.float64)
    src = np.stack([ps, ps + ls[:, 0], ps + ls[:, 2]])
    dst = np.stack([pm, pm + lm[:, 0], pm + lm[:, 2]])
    return kabsch(src, dst)


def rotation_error_deg(rot, rot_gt) -> float:
    c = (np.trace(np.asarray(rot_gt) @ np.asarray(rot).T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class PoseEstimate:
    transform: RigidTransform
    err_r: float
    err_t: float
    iterations: int
    inliers: int
    consensus_iteration: int  # 1-based hypothesis index where the best count first appeared


def _pairs(correspondences):
    arr = np.array(
        [(c.model_index, c.scene_index) if isinstance(c, Correspondence) else tuple(c)[:2] for c in correspondences],
        dtype=np.int64,
    ).reshape(-1, 2)
    if len(arr) == 0:
        raise InsufficientDataError("no correspondences")
    return arr[:, 0], arr[:, 1]


def _count_inliers(t: RigidTransform, m_pts, s_pts, thresh):
    return np.linalg.norm(t.apply(s_pts) - m_pts, axis=1) <= thresh


def _finish(best, best_mask, m_pts, s_pts, iterations, first, gt, mr):
    if best is None or not best_mask.any():
        raise PoseFailureError("no hypothesis gathered any inlier")
    if best_mask.sum() >= 3:
        best = kabsch(s_pts[best_mask], m_pts[best_mask])
    if gt is None:
        err_r, err_t = float("nan"), float("nan")
    else:
        err_r = rotation_error_deg(best.rotation, gt.rotation)
        err_t = float(np.linalg.norm(gt.translation - best.translation) / mr)
    return PoseEstimate(best, err_r, err_t, iterations, int(best_mask.sum()), first)


def one_point_ransac(
    correspondences,
    model_keypoints,
    scene_keypoints,
    model_lrfs,
    scene_lrfs,
    iterations: int = 100,
    inlier_radius: float = 2.0,
    seed: int = 0,
    mr: float = 1.0,
    gt: Optional[RigidTransform] = None,
    stop_inliers: Optional[int] = None,
) -> PoseEstimate:
    """RANSAC where each hypothesis comes from a single correspondence plus its two frames.

    ``inlier_radius`` is in mesh resolutions. The winning hypothesis (most
    inliers, earliest on ties) is refined by SVD over its inliers. With
    ``stop_inliers`` the loop ends as soon as that many inliers are reached;
    ``PoseEstimate.iterations`` then counts the hypotheses actually tried.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    mi, si = _pairs(correspondences)
    m_pts = np.asarray(model_keypoints, dtype=np.float64)[mi]
    s_pts = np.asarray(scene_keypoints, dtype=np.float64)[si]
    m_lrf = np.asarray(model_lrfs, dtype=np.float64)[mi]
    s_lrf = np.asarray(scene_lrfs, dtype=np.float64)[si]
    thresh = inlier_radius * mr
    rng = np.random.default_rng(seed)
    best, best_mask, first = None, np.zeros(len(mi), bool), 0
    for it in range(iterations):
        k = int(rng.integers(len(mi)))
        hyp = pose_from_correspondence(m_pts[k], s_pts[k], m_lrf[k], s_lrf[k])
        mask = _count_inliers(hyp, m_pts, s_pts, thresh)
        if mask.sum() > best_mask.sum():
            best, best_mask, first = hyp, mask, it + 1
        if stop_inliers is not None and best_mask.sum() >= stop_inliers:
            break
    return _finish(best, best_mask, m_pts, s_pts, it + 1, first, gt, mr)


def ransac3_baseline(
    correspondences,
    model_keypoints,
    scene_keypoints,
    iterations: int = 1000,
    inlier_radius: float = 2.0,
    seed: int = 0,
    mr: float = 1.0,
    gt: Optional[RigidTransform] = None,
    stop_inliers: Optional[int] = None,
) -> PoseEstimate:
    """Classical RANSAC: three distinct correspondences per hypothesis, SVD pose.

    ``stop_inliers`` works as in :func:`one_point_ransac`.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    mi, si = _pairs(correspondences)
    if len(mi) < 3:
        raise InsufficientDataError("three-point RANSAC needs at least 3 correspondences")
    m_pts = np.asarray(model_keypoints, dtype=np.float64)[mi]
    s_pts = np.asarray(scene_keypoints, dtype=np.float64)[si]
    thresh = inlier_radius * mr
    rng = np.random.default_rng(seed)
    best, best_mask, first = None, np.zeros(len(mi), bool), 0
    for it in range(iterations):
        k = rng.choice(len(mi), size=3, replace=False)
        hyp = kabsch(s_pts[k], m_pts[k])
        mask = _count_inliers(hyp, m_pts, s_pts, thresh)
        if mask.sum() > best_mask.sum():
            best, best_mask, first = hyp, mask, it + 1
        if stop_inliers is not None and best_mask.sum() >= stop_inliers:
            break
    return _finish(best, best_mask, m_pts, s_pts, it + 1, first, gt, mr)


# --- CSV -------------------------------------------------------------------------------

REPEAT_HEADER = "method,perturbation,level,mean_meancos,n_valid"
RPC_HEADER = "method,threshold,recall,one_minus_precision"
POSE_HEADER = "method,err_r_deg,err_t_mr,iters"


def csv_text(header: str, rows: Sequence[Sequence]) -> str:
    def fmt(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    return "\n".join([header] + [",".join(fmt(v) for v in row) for row in rows]) + "\n"

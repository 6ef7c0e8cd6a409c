"""Hand-crafted local reference frames: Mian, SHOT, RoPS and TOLDI.

Every method returns a 3x3 matrix whose columns are the x, y and z axes.
The eigen-solver's own sign and ordering conventions never reach the
caller: axes are sorted explicitly, re-signed by each method's rule, and y
is always rebuilt as ``z × x``.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError, EmptyPatchError
from .geometry import LocalPatch, TriangleMesh, as_point, estimate_normal

EIG_RTOL = 1e-9


def frame_from_axes(x, z) -> np.ndarray:
    """Assemble ``[x, z × x, z]`` (columns)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.column_stack([x, np.cross(z, x), z])


def check_lrf(lrf, atol: float = 1e-6) -> bool:
    lrf = np.asarray(lrf)
    return (
        lrf.shape == (3, 3)
        and np.allclose(lrf.T @ lrf, np.eye(3), atol=atol)
        and abs(np.linalg.det(lrf) - 1.0) <= atol
    )


def sorted_eig(cov: np.ndarray, full_rank: bool = False):
    """Eigenpairs of a symmetric 3x3 matrix in descending eigenvalue order.

    Raises if the largest eigenvalue vanishes, if two eigenvalues coincide
    (axes not unique), or, with ``full_rank``, if the matrix is singular.
    """
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    top = evals[0]
    if not top > 0:
        raise DegenerateGeometryError("covariance vanishes")
    tol = EIG_RTOL * top
    if evals[0] - evals[1] <= tol or evals[1] - evals[2] <= tol:
        raise DegenerateGeometryError("repeated covariance eigenvalues")
    if full_rank and evals[2] <= tol:
        raise DegenerateGeometryError("covariance is rank deficient")
    return evals, evecs


def lrf_mian(patch: LocalPatch, keypoint=None, normal=None) -> np.ndarray:
    """Principal axes of the neighbor scatter; only z is sign-disambiguated."""
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    if normal is None:
        normal = estimate_normal(patch, p)
    off = patch.neighbors - p
    cov = off.T @ off / len(off)
    _, evecs = sorted_eig(cov, full_rank=True)
    x, z = evecs[:, 0], evecs[:, 2]
    if z @ normal < 0:
        z = -z
    return frame_from_axes(x, z)


def shot_covariance(patch: LocalPatch, keypoint=None) -> np.ndarray:
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    off = patch.neighbors - p
    w = patch.radius - np.linalg.norm(off, axis=1)
    total = w.sum()
    if not total > 0:
        raise DegenerateGeometryError("all SHOT weights vanish")
    return (off * w[:, None]).T @ off / total


def _majority_sign(axis, off):
    proj = off @ axis
    pos = np.count_nonzero(proj >= 0)
    neg = len(off) - pos
    if pos == neg:
        # equal counts happen often with even patch sizes; the summed
        # projection is a rotation-invariant tie-break
        return -axis if proj.sum() < 0 else axis
    return -axis if pos < neg else axis


def lrf_shot(patch: LocalPatch, keypoint=None) -> np.ndarray:
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    cov = shot_covariance(patch, p)
    _, evecs = sorted_eig(cov)
    off = patch.neighbors - p
    x = _majority_sign(evecs[:, 0], off)
    z = _majority_sign(evecs[:, 2], off)
    return frame_from_axes(x, z)


def triangle_covariance(tri: np.ndarray, p) -> np.ndarray:
    """Scatter of one triangle (3x3 vertex array) about ``p``, 1/12-weighted."""
    d = tri - p
    s = d.sum(axis=0)
    return (np.outer(s, s) + d.T @ d) / 12.0


def rops_terms(mesh: TriangleMesh, keypoint, r: float):
    """Per-triangle covariances and combined weights ``w1 * w2`` for the support."""
    p = as_point(keypoint)
    tv = mesh.triangle_vertices()
    if len(tv) == 0:
        raise EmptyPatchError("mesh has no triangles")
    centroid = tv.mean(axis=1)
    cdist = np.linalg.norm(centroid - p, axis=1)
    sel = cdist <= r
    if not np.any(sel):
        raise EmptyPatchError("no triangle centroid inside the support radius")
    tv, cdist = tv[sel], cdist[sel]
    area2 = np.linalg.norm(np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]), axis=1)
    total = area2.sum()
    if not total > 0:
        raise DegenerateGeometryError("support triangles have zero total area")
    w1 = area2 / total
    w2 = (r - cdist) ** 2
    d = tv - p
    s = d.sum(axis=1)
    covs = (s[:, :, None] * s[:, None, :] + np.einsum("tia,tib->tab", d, d)) / 12.0
    return covs, w1 * w2, d


def rops_covariance(mesh: TriangleMesh, keypoint, r: float) -> np.ndarray:
    covs, w, _ = rops_terms(mesh, keypoint, r)
    return np.einsum("t,tab->ab", w, covs)


def lrf_rops(mesh: TriangleMesh, keypoint, r: float) -> np.ndarray:
    covs, w, d = rops_terms(mesh, keypoint, r)
    _, evecs = sorted_eig(np.einsum("t,tab->ab", w, covs))
    # h(axis) = sum_t w_t * (1/6) * sum_i d_ti . axis
    lever = w @ d.sum(axis=1) / 6.0
    x, z = evecs[:, 0], evecs[:, 2]
    if lever @ x < 0:
        x = -x
    if lever @ z < 0:
        z = -z
    return frame_from_axes(x, z)


def tangent_projections(offsets: np.ndarray, z: np.ndarray) -> np.ndarray:
    return offsets - np.outer(offsets @ z, z)


def normalized_sum(vectors: np.ndarray, weights: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Unit direction of ``sum_i w_i v_i``.

    The vanishing test is relative to ``sum_i |w_i| |v_i|`` so that it does
    not depend on the length unit of the cloud.
    """
    s = vectors.T @ weights
    norm = np.linalg.norm(s)
    scale = np.abs(weights) @ np.linalg.norm(vectors, axis=1)
    if not norm > tol * scale:
        raise DegenerateGeometryError("weighted vector sum vanishes")
    return s / norm


def toldi_weights(patch: LocalPatch, keypoint, z) -> np.ndarray:
    off = patch.neighbors - keypoint
    w_dist = (patch.radius - np.linalg.norm(off, axis=1)) ** 2
    w_depth = (off @ z) ** 2
    return w_dist * w_depth


def lrf_toldi(patch: LocalPatch, keypoint=None, normal=None) -> np.ndarray:
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    z = estimate_normal(patch, p) if normal is None else as_point(normal)
    off = patch.neighbors - p
    return frame_from_axes(normalized_sum(tangent_projections(off, z), toldi_weights(patch, p, z)), z)


METHODS = ("mian", "shot", "rops", "toldi")

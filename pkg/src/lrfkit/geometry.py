"""Point clouds, meshes, neighborhoods and rigid transforms.

All arrays are float64. Points are stored as ``(n, 3)`` arrays; a single
point is a length-3 array. Every function here is pure: clouds are never
modified in place and randomness is driven by an explicit integer seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateGeometryError, EmptyPatchError, InvalidInputError

SURFACE_KINDS = ("plane-with-bumps", "ridge", "hemisphere", "random-smooth")


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"expected an (n, 3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("points must be finite")
    return arr


def as_point(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"expected a finite 3-vector, got {p!r}")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = as_points(self.normals)
            if nrm.shape != pts.shape:
                raise InvalidInputError("normals must parallel points")
            if not np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-6):
                raise InvalidInputError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    @cached_property
    def resolution_mr(self) -> float:
        return compute_mesh_resolution(self)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        verts = as_points(self.vertices)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise InvalidInputError("triangle index out of range")
        if tris.size:
            a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
            area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            tris = tris[area2 > 0.0]
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @cached_property
    def resolution_mr(self) -> float:
        """Mean edge length over all triangle edges (shared edges counted once)."""
        if len(self.triangles) == 0:
            raise InvalidInputError("mesh has no triangles")
        edges = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        edges = np.unique(np.sort(edges, axis=1), axis=0)
        d = self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]]
        return float(np.linalg.norm(d, axis=1).mean())

    def triangle_vertices(self) -> np.ndarray:
        """``(m, 3, 3)`` array: triangle, vertex slot, coordinate."""
        return self.vertices[self.triangles]


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = as_point(self.translation)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InvalidInputError("rotation must be orthonormal with det +1")
        rot.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def random(cls, seed, translation_scale: float = 1.0) -> "RigidTransform":
        rng = np.random.default_rng(seed)
        rot = Rotation.random(random_state=rng).as_matrix()
        return cls(rot, rng.uniform(-translation_scale, translation_scale, 3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )


@dataclass(frozen=True, eq=False)
class LocalPatch:
    keypoint: np.ndarray
    neighbors: np.ndarray
    radius: float
    indices: Optional[np.ndarray] = None  # source-cloud indices of the neighbors

    def __post_init__(self):
        kp = as_point(self.keypoint)
        nb = as_points(self.neighbors) if len(self.neighbors) else np.zeros((0, 3))
        if self.radius <= 0:
            raise InvalidInputError("patch radius must be positive")
        if len(nb) == 0:
            raise EmptyPatchError("patch has no neighbors")
        object.__setattr__(self, "keypoint", kp)
        object.__setattr__(self, "neighbors", nb)
        object.__setattr__(self, "radius", float(self.radius))

    def __len__(self):
        return len(self.neighbors)

    @property
    def offsets(self) -> np.ndarray:
        return self.neighbors - self.keypoint

    def transformed(self, t: RigidTransform) -> "LocalPatch":
        return LocalPatch(t.apply(self.keypoint), t.apply(self.neighbors), self.radius, self.indices)


def compute_mesh_resolution(cloud: PointCloud) -> float:
    """Mean distance from every point to its nearest other point."""
    pts = cloud.points
    if len(pts) < 2:
        raise InvalidInputError("mesh resolution needs at least 2 points")
    d, _ = cloud.tree.query(pts, k=2)
    return float(d[:, 1].mean())


def radius_neighbors(cloud: PointCloud, center, r: float) -> np.ndarray:
    """Indices (ascending) of all points within distance ``r`` of ``center``, boundary included."""
    if not r > 0:
        raise InvalidInputError("radius must be positive")
    c = as_point(center)
    # widen the tree query slightly, then apply the exact test
    cand = np.asarray(cloud.tree.query_ball_point(c, r * (1 + 1e-9) + 1e-300), dtype=np.int64)
    if cand.size == 0:
        return cand
    d = np.linalg.norm(cloud.points[cand] - c, axis=1)
    return np.sort(cand[d <= r])


def extract_patch(cloud: PointCloud, keypoint_index: int, r: float) -> LocalPatch:
    if not 0 <= keypoint_index < len(cloud):
        raise InvalidInputError(f"keypoint index {keypoint_index} out of range")
    idx = radius_neighbors(cloud, cloud.points[keypoint_index], r)
    idx = idx[idx != keypoint_index]
    if idx.size == 0:
        raise EmptyPatchError(f"no neighbors within r={r} of point {keypoint_index}")
    return LocalPatch(cloud.points[keypoint_index], cloud.points[idx], r, idx)


def patch_around(cloud: PointCloud, center, r: float) -> LocalPatch:
    """Patch around an arbitrary location; the point nearest ``center`` is the keypoint."""
    _, k = cloud.tree.query(as_point(center))
    return extract_patch(cloud, int(k), r)


def subsample_patch(patch: LocalPatch, n: int, seed: int) -> LocalPatch:
    if n < 3:
        raise InvalidInputError("subsample size must be at least 3")
    if len(patch) <= n:
        return patch
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(patch), size=n, replace=False))
    idx = None if patch.indices is None else patch.indices[keep]
    return LocalPatch(patch.keypoint, patch.neighbors[keep], patch.radius, idx)


def estimate_normal(patch: LocalPatch, keypoint=None, subset_fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Keypoint normal from the scatter of the neighbors near the keypoint.

    Uses neighbors within ``subset_fraction * radius`` (at least 5 of them,
    otherwise the whole patch), scattered about their centroid. The returned
    normal points away from the bulk of the patch: the summed projection of
    the subset offsets onto it is non-positive.
    """
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    off = patch.neighbors - p
    dist = np.linalg.norm(off, axis=1)
    sub = off[dist <= subset_fraction * patch.radius]
    if len(sub) < 5:
        sub = off
    centered = sub - sub.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    if evals[2] <= 0 or evals[1] <= 1e-9 * evals[2]:
        raise DegenerateGeometryError("normal subset is collinear or coincident")
    n = evecs[:, 0]
    if np.sum(sub @ n) > 0:
        n = -n
    return n / np.linalg.norm(n)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply(cloud.points), normals)


def transform_mesh(mesh: TriangleMesh, t: RigidTransform) -> TriangleMesh:
    return TriangleMesh(t.apply(mesh.vertices), mesh.triangles)


def add_gaussian_noise(cloud: PointCloud, sigma_mr: float, seed: int, mr: Optional[float] = None) -> PointCloud:
    """Add i.i.d. Gaussian jitter of ``sigma_mr`` mesh resolutions per coordinate.

    ``mr`` defaults to the cloud's own resolution. Normals are dropped since
    they no longer describe the displaced points.
    """
    if sigma_mr < 0:
        raise InvalidInputError("sigma_mr must be non-negative")
    if sigma_mr == 0:
        return cloud
    scale = sigma_mr * (cloud.resolution_mr if mr is None else mr)
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, scale, size=cloud.points.shape))


def decimate(cloud: PointCloud, keep_fraction: float, seed: int) -> PointCloud:
    """Uniform random subset of ``ceil(keep_fraction * n)`` points."""
    if not 0 < keep_fraction <= 1:
        raise InvalidInputError("keep_fraction must lie in (0, 1]")
    n = len(cloud)
    m = math.ceil(keep_fraction * n - 1e-12)
    if m >= n:
        return cloud
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=m, replace=False))
    normals = None if cloud.normals is None else cloud.normals[keep]
    return PointCloud(cloud.points[keep], normals)


def triangulate_patch(patch: LocalPatch, normal=None) -> TriangleMesh:
    """Mesh a patch (keypoint included) by 2-D Delaunay in its tangent plane.

    The tangent basis is derived from the normal alone, so the connectivity
    is independent of the patch's pose.
    """
    if normal is None:
        normal = estimate_normal(patch, subset_fraction=1.0)
    pts = np.vstack([patch.keypoint, patch.neighbors])
    if len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 points to triangulate")
    off = pts - patch.keypoint
    # any in-plane basis works: Delaunay is invariant to in-plane rotation
    seed_axis = np.eye(3)[np.argmin(np.abs(normal))]
    u = np.cross(normal, seed_axis)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    try:
        tri = Delaunay(np.column_stack([off @ u, off @ v]))
    except Exception as exc:  # qhull raises its own error type
        raise DegenerateGeometryError(f"triangulation failed: {exc}") from exc
    return TriangleMesh(pts, tri.simplices)


# --- synthetic surfaces -----------------------------------------------------------


def _bumps(rng, count, amp=(0.03, 0.12), width=(0.06, 0.18)):
    centers = rng.uniform(0.0, 1.0, (count, 2))
    amps = rng.uniform(*amp, count) * rng.choice([-1.0, 1.0], count)
    widths = rng.uniform(*width, count)

    def f(xy):
        d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
        return (amps * np.exp(-d2 / (2 * widths**2))).sum(-1)

    return f


def _jittered_grid(rng, n):
    """``n`` distinct cells of a ceil(sqrt(n))^2 grid over the unit square, one jittered point each.

    Scanner-like sampling: far more even than i.i.d. uniform points.
    """
    g = math.ceil(math.sqrt(n))
    cells = np.sort(rng.choice(g * g, size=n, replace=False))
    ij = np.column_stack([cells // g, cells % g]).astype(np.float64)
    return (ij + 0.5 + rng.uniform(-0.35, 0.35, (n, 2))) / g


def _height_function(kind: str, rng, n_bumps: int):
    if kind == "plane-with-bumps":
        return _bumps(rng, n_bumps)
    if kind == "ridge":
        phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(0.6, 1.2)
        extra = _bumps(rng, 4, amp=(0.01, 0.03))

        def f(xy):
            x, y = xy[:, 0], xy[:, 1]
            center = 0.5 + 0.15 * np.sin(2 * np.pi * freq * y + phase)
            height = 0.18 * (1.0 + 0.6 * y)
            return height * np.exp(-((x - center) ** 2) / (2 * 0.12**2)) + extra(xy)

        return f
    if kind == "random-smooth":
        k = 10
        freqs = rng.normal(0.0, 2.0, (k, 2))
        phases = rng.uniform(0, 2 * np.pi, k)
        amps = rng.uniform(0.01, 0.04, k)

        def f(xy):
            return (amps * np.sin(2 * np.pi * xy @ freqs.T + phases)).sum(-1)

        return f
    raise InvalidInputError(f"unknown surface kind {kind!r}; choose from {SURFACE_KINDS}")


def synth_surface(kind: str, n: int, seed: int, n_bumps: int = 12, sample_seed: Optional[int] = None) -> PointCloud:
    """Sample ``n`` points of an analytic test surface of unit extent.

    Height-field kinds live over the unit square; ``hemisphere`` is the upper
    half of the sphere of radius 0.5 about the origin. Normals are analytic
    (finite-difference for the height fields) and point to +z.

    ``seed`` fixes the surface shape. Passing ``sample_seed`` draws a fresh
    sampling of that same shape, like a second scan of one object.
    """
    if n < 100:
        raise InvalidInputError("synth_surface needs n >= 100")
    rng = np.random.default_rng(seed)
    f = None if kind == "hemisphere" else _height_function(kind, rng, n_bumps)
    if sample_seed is not None:
        rng = np.random.default_rng([seed, sample_seed])
    if kind == "hemisphere":
        u = rng.uniform(0.0, 1.0, n)  # cos(polar) uniform on [0,1] gives uniform area
        phi = rng.uniform(0.0, 2 * np.pi, n)
        s = np.sqrt(1.0 - u**2)
        normals = np.column_stack([s * np.cos(phi), s * np.sin(phi), u])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(0.5 * normals, normals)
    xy = _jittered_grid(rng, n)
    z = f(xy)
    h = 1e-6
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    fx = (f(xy + ex) - f(xy - ex)) / (2 * h)
    fy = (f(xy + ey) - f(xy - ey)) / (2 * h)
    normals = np.column_stack([-fx, -fy, np.ones(n)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(np.column_stack([xy, z]), normals)


def random_rotations(count: int, seed) -> np.ndarray:
    return Rotation.random(count, random_state=np.random.default_rng(seed)).as_matrix().reshape(-1, 3, 3)


def pairwise_distances(points: Sequence) -> np.ndarray:
    pts = as_points(points)
    return np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)

"""Shared geometric primitives: clouds, cameras, rays, meshes, bounds and a k-NN index."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.spatial import cKDTree

POSE_TOL = 1e-6


def _as_points(a) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 0:
        pts = pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max component-wise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    def intersect_rays(self, origins: np.ndarray, directions: np.ndarray):
        """Slab test. Returns ``(t_near, t_far, hit)``; ``t_near`` is clipped at 0."""
        o = np.atleast_2d(origins)
        d = np.atleast_2d(directions)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (self.min - o) * inv
            t1 = (self.max - o) * inv
        lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        # Axis-parallel rays outside the slab never hit.
        parallel = d == 0
        outside = parallel & ((o < self.min) | (o > self.max))
        lo = np.where(parallel & ~outside, -np.inf, lo)
        hi = np.where(parallel & ~outside, np.inf, hi)
        t_near = np.maximum(lo.max(axis=1), 0.0)
        t_far = hi.min(axis=1)
        hit = (t_far > t_near) & ~outside.any(axis=1)
        return t_near, t_far, hit


@dataclass
class LabeledPointCloud:
    """Points with optional 8-bit colors and per-point instance ids (-1 = unlabeled).

    ``original_colors`` carries the input colors after an export recolors the cloud.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    instance_ids: Optional[np.ndarray] = None
    original_colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = _as_points(self.points)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        n = len(self.points)
        for name in ("colors", "original_colors"):
            value = getattr(self, name)
            if value is not None:
                c = np.asarray(value)
                if c.shape != (n, 3):
                    raise ValueError(f"{name} must have shape ({n}, 3), got {c.shape}")
                if np.any(c < 0) or np.any(c > 255):
                    raise ValueError(f"{name} must lie in 0..255")
                setattr(self, name, c.astype(np.uint8))
        if self.instance_ids is not None:
            ids = np.asarray(self.instance_ids)
            if ids.shape != (n,):
                raise ValueError(f"instance_ids must have shape ({n},), got {ids.shape}")
            if n and ids.min() < -1:
                raise ValueError("instance ids must be >= -1")
            self.instance_ids = ids.astype(np.int32)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> "LabeledPointCloud":
        def take(a):
            return None if a is None else a[mask_or_index]

        return LabeledPointCloud(
            self.points[mask_or_index],
            take(self.colors),
            take(self.instance_ids),
            take(self.original_colors),
        )

    def instance(self, instance_id: int) -> "LabeledPointCloud":
        if self.instance_ids is None:
            raise ValueError("cloud carries no instance ids")
        return self.subset(self.instance_ids == instance_id)

    def labels(self) -> list[int]:
        if self.instance_ids is None:
            return []
        return sorted(int(i) for i in np.unique(self.instance_ids) if i >= 0)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (isinstance(self.width, (int, np.integer)) and isinstance(self.height, (int, np.integer))):
            raise ValueError("image size must be integer")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-from-camera transform; rejects anything that is not a proper rotation."""

    world_from_camera: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError("pose must be a 4x4 matrix")
        if not np.all(np.isfinite(m)):
            raise ValueError("pose must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("pose bottom row must be exactly (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > POSE_TOL or abs(np.linalg.det(r) - 1.0) > POSE_TOL:
            raise ValueError("pose rotation block is not orthonormal with det +1")
        m.setflags(write=False)
        object.__setattr__(self, "world_from_camera", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target`` (camera -z forward, +y up)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        m = np.eye(4)
        m[:3, 0] = right
        m[:3, 1] = true_up
        m[:3, 2] = -forward
        m[:3, 3] = eye
        return cls(m)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class Rays:
    """A batch of rays stored as two ``(N, 3)`` arrays."""

    origins: np.ndarray
    directions: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i])

    def __iter__(self) -> Iterator[Ray]:
        for i in range(len(self)):
            yield self[i]

    def slice(self, start: int, stop: int) -> "Rays":
        return Rays(self.origins[start:stop], self.directions[start:stop])


def generate_camera_rays(pose: CameraPose, intr: CameraIntrinsics) -> Rays:
    """One ray per pixel center, row-major, camera looking along -z with +x right and +y up."""
    u, v = np.meshgrid(np.arange(intr.width) + 0.5, np.arange(intr.height) + 0.5)
    dirs_cam = np.stack(
        [(u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return Rays(origins, dirs)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _as_points(self.vertices)
        f = np.asarray(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (F, 3), got {f.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, each row sorted ascending."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.edges()) + self.n_faces

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "TriMesh":
        return TriMesh(self.vertices @ np.asarray(rotation).T + np.asarray(translation), self.faces)


@dataclass
class NnIndex:
    """k-NN index whose answers match an exhaustive scan, ties broken by ascending index."""

    points: np.ndarray
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = _as_points(self.points)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query_distances(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k <= 0:
            raise ValueError("k must be positive")
        if k > len(self.points):
            raise ValueError(f"k={k} exceeds the {len(self.points)} indexed points")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d, _ = self._tree.query(q, k=k)
        kth = float(np.atleast_1d(d)[-1])
        # Re-gather everything within the k-th radius so boundary ties resolve by index.
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        order = np.lexsort((cand, dist))[:k]
        return cand[order], dist[order]


def build_nn_index(points) -> NnIndex:
    return NnIndex(points)


def knn(index: NnIndex, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest indexed points, ascending by distance then index."""
    return index.query_distances(query, k)[0]

"""Deterministic synthetic scenes with known ground truth.

Blob scenes stand in for a trained radiance field plus 2D segmenter output; ribbon
leaves give meshes and clouds with closed-form length, width and area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Aabb, CameraIntrinsics, CameraPose, LabeledPointCloud, TriMesh, generate_camera_rays
from .lifting import DensityField, View, sample_rays

BLOB_SIGMA = 50.0
ORBIT_RADIUS_FACTOR = 1.5
ORBIT_ELEVATION_DEG = 20.0
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass
class BlobScene:
    density: DensityField
    occupancy: np.ndarray  # (n_objects, L, W, H) bool
    centers: np.ndarray  # (n_objects, 3) world units
    radii: np.ndarray  # (n_objects,) world units
    cloud: LabeledPointCloud
    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    samples_per_ray: int = 128

    @property
    def n_objects(self) -> int:
        return len(self.radii)

    def node_positions(self) -> np.ndarray:
        """World position of every grid node, shape ``(L, W, H, 3)``."""
        b = self.density.bounds
        axes = [np.linspace(b.min[a], b.max[a], n) for a, n in enumerate(self.density.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def orbit_poses(bounds: Aabb, n_views: int) -> list[CameraPose]:
    radius = ORBIT_RADIUS_FACTOR * float(np.linalg.norm(bounds.extent))
    elev = math.radians(ORBIT_ELEVATION_DEG)
    poses = []
    for k in range(n_views):
        az = 2 * math.pi * k / n_views
        eye = bounds.center + radius * np.array(
            [math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)]
        )
        poses.append(CameraPose.look_at(eye, bounds.center))
    return poses


def framing_intrinsics(bounds: Aabb, image_size: int, content_radius: float | None = None,
                       margin: float = 1.05) -> CameraIntrinsics:
    """Pinhole intrinsics whose field of view just contains a sphere about the bounds center.

    ``content_radius`` defaults to the bounds' circumradius.
    """
    dist = ORBIT_RADIUS_FACTOR * float(np.linalg.norm(bounds.extent))
    if content_radius is None:
        content_radius = 0.5 * float(np.linalg.norm(bounds.extent))
    half_angle = math.asin(min(1.0, margin * content_radius / dist))
    f = 0.5 * image_size / math.tan(half_angle)
    c = 0.5 * image_size
    return CameraIntrinsics(f, f, c, c, image_size, image_size)


def make_blob_scene(n_objects: int = 3, dims=(64, 64, 64), n_views: int = 24, seed: int = 0,
                    image_size: int = 128, half_extent: float = 0.5,
                    radius_range=(0.14, 0.18), cloud_stride: int = 4,
                    samples_per_ray: int = 128) -> BlobScene:
    """Disjoint spherical blobs of constant density in an otherwise empty grid.

    Radii are drawn as fractions of the smallest grid dimension (in node units);
    centers are rejection-sampled at least 2.5 max-radii apart. The cameras frame
    the blobs' bounding sphere. The point cloud is what a radiance-field exporter
    would produce: expected ray-termination points of the foreground rays in every ``cloud_stride``-th
    pixel row/column of each view, labelled by the dominant oracle mask.
    """
    dims = tuple(int(d) for d in dims)
    if n_objects < 1:
        raise ValueError("need at least one blob")
    if min(dims) < 16:
        raise ValueError("every grid dimension must be >= 16")
    if n_views < 4:
        raise ValueError("need at least four views")
    rng = np.random.default_rng(seed)
    d = np.array(dims, dtype=np.float64)
    radii_nodes = rng.uniform(*radius_range, size=n_objects) * d.min()
    sep = 2.5 * radii_nodes.max()
    centers_nodes: list[np.ndarray] = []
    attempts = 0
    for r in radii_nodes:
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise RuntimeError("could not place blobs without overlap")
            lo, hi = r + 1.0, d - 2.0 - r
            if np.any(hi <= lo):
                raise RuntimeError("blob radius too large for the grid")
            c = rng.uniform(lo, hi)
            if all(np.linalg.norm(c - o) >= sep for o in centers_nodes):
                centers_nodes.append(c)
                break
    bounds = Aabb(np.full(3, -half_extent), np.full(3, half_extent))
    node_size = bounds.extent / (d - 1)
    centers = bounds.min + np.array(centers_nodes) * node_size
    radii = radii_nodes * node_size[0]

    axes = [np.arange(n) for n in dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).astype(np.float64)
    occ = np.stack([np.linalg.norm(grid - c, axis=-1) <= r for c, r in zip(centers_nodes, radii_nodes)])
    sigma = np.where(occ.any(axis=0), BLOB_SIGMA, 0.0)

    content_radius = float(np.max(np.linalg.norm(centers - bounds.center, axis=1) + radii))

    density = DensityField(bounds, sigma)
    poses = orbit_poses(bounds, n_views)
    intrinsics = framing_intrinsics(bounds, image_size, content_radius)
    cloud = _termination_cloud(density, centers, radii, poses, intrinsics, cloud_stride, samples_per_ray)

    return BlobScene(density, occ, centers, radii, cloud, poses, intrinsics, samples_per_ray)


def support_pad(density: DensityField) -> float:
    """Distance beyond a blob's sphere where interpolated density can still be non-zero."""
    node = density.bounds.extent / (np.asarray(density.dims) - 1)
    return float(np.linalg.norm(node))


def _blob_fractions(pos, w, centers, radii, pad) -> np.ndarray:
    """``(n_objects, n_rays)`` weight mass of samples in each blob's density support.

    A sample belongs to the blob whose padded sphere it lies in, nearest surface first.
    """
    gap = np.stack([np.linalg.norm(pos - c, axis=-1) - r for c, r in zip(centers, radii)])
    owner = np.argmin(gap, axis=0)
    near = np.min(gap, axis=0) <= pad
    return np.stack([np.sum(w * (near & (owner == k)), axis=-1) for k in range(len(radii))])


def _termination_cloud(density, centers, radii, poses, intrinsics, stride, n) -> LabeledPointCloud:
    pts, ids = [], []
    keep = np.zeros((intrinsics.height, intrinsics.width), dtype=bool)
    keep[::stride, ::stride] = True
    keep = keep.ravel()
    for pose in poses:
        rays = generate_camera_rays(pose, intrinsics)
        t_near, t_far, hit = density.bounds.intersect_rays(rays.origins, rays.directions)
        rows = np.flatnonzero(hit & keep)
        o, d = rays.origins[rows], rays.directions[rows]
        t, _, w = sample_rays(density, o, d, t_near[rows], t_far[rows], n)
        opacity = w.sum(axis=1)
        frac = _blob_fractions(o[:, None, :] + t[..., None] * d[:, None, :], w, centers, radii,
                               support_pad(density))
        # Foreground pixels of the oracle segmentation only, so every label is well defined.
        solid = frac.sum(axis=0) > 0.5
        depth = (w[solid] * t[solid]).sum(axis=1) / opacity[solid]
        pts.append(o[solid] + depth[:, None] * d[solid])
        ids.append(np.argmax(frac[:, solid], axis=0))
    pts = np.concatenate(pts)
    ids = np.concatenate(ids)
    ext = density.bounds.extent
    shade = np.clip(255 * (pts - density.bounds.min) / ext, 0, 255).astype(np.uint8)
    return LabeledPointCloud(pts, shade, ids)


def render_view_masks(scene: BlobScene, pose: CameraPose) -> np.ndarray:
    """Oracle masks ``(n_objects, H, W)`` for one view: per-ray weight falling in each blob's support."""
    intr = scene.intrinsics
    rays = generate_camera_rays(pose, intr)
    out = np.zeros((scene.n_objects, len(rays)))
    t_near, t_far, hit = scene.density.bounds.intersect_rays(rays.origins, rays.directions)
    rows = np.flatnonzero(hit)
    step = 2048
    for s in range(0, len(rows), step):
        r = rows[s:s + step]
        t, _, w = sample_rays(scene.density, rays.origins[r], rays.directions[r],
                              t_near[r], t_far[r], scene.samples_per_ray)
        pos = rays.origins[r][:, None, :] + t[..., None] * rays.directions[r][:, None, :]
        out[:, r] = _blob_fractions(pos, w, scene.centers, scene.radii, support_pad(scene.density))
    return out.reshape(scene.n_objects, intr.height, intr.width)


def render_reference_masks(scene: BlobScene) -> list[np.ndarray]:
    return [render_view_masks(scene, p) for p in scene.poses]


def scene_views(scene: BlobScene, masks: list[np.ndarray] | None = None) -> list[View]:
    masks = render_reference_masks(scene) if masks is None else masks
    return [View(p, np.clip(m, 0.0, 1.0)) for p, m in zip(scene.poses, masks)]


def export_scene(scene: BlobScene, out_dir, masks: list[np.ndarray] | None = None) -> dict:
    """Write the scene in the pipeline's input formats; returns the written paths."""
    from . import io

    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    masks = render_reference_masks(scene) if masks is None else masks
    frames = [f"frame_{k:05d}.png" for k in range(len(scene.poses))]
    io.write_density_grid(out / "density.dgrd", scene.density)
    io.write_poses_json(out / "poses.json", frames, scene.poses, scene.intrinsics)
    for k, view in enumerate(masks):
        for i, m in enumerate(view):
            io.write_mask_png(out / "masks" / io.mask_filename(k, i), m)
    unlabeled = LabeledPointCloud(scene.cloud.points, scene.cloud.colors)
    io.write_cloud_ply(out / "cloud.ply", unlabeled)
    io.write_cloud_ply(out / "truth.ply", scene.cloud)
    np.save(out / "occupancy.npy", scene.occupancy)
    return {
        "density": str(out / "density.dgrd"),
        "poses": str(out / "poses.json"),
        "masks": str(out / "masks"),
        "cloud": str(out / "cloud.ply"),
        "truth": str(out / "truth.ply"),
        "occupancy": str(out / "occupancy.npy"),
    }


# -- ribbon leaves ---------------------------------------------------------------

@dataclass
class RibbonLeaf:
    cloud: LabeledPointCloud
    mesh: TriMesh
    truth: dict


def make_ribbon_leaf(length: float = 10.0, width: float = 2.0, bend_radius: float | None = None,
                     spacing: float = 0.05, seed: int = 0, jitter: float = 0.0,
                     instance_id: int = 0) -> RibbonLeaf:
    """Rectangular strip along +x, optionally wrapped across its width onto a cylinder.

    ``jitter`` adds in-surface uniform noise (fraction of ``spacing``) to the cloud only;
    point order is shuffled with ``seed``.
    """
    if length <= 0 or width <= 0 or spacing <= 0:
        raise ValueError("length, width and spacing must be positive")
    if bend_radius is not None and bend_radius < width / math.pi * (1 - 1e-12):
        raise ValueError("bend radius too small: the strip would wrap past a half cylinder")
    rng = np.random.default_rng(seed)
    nu = max(2, int(round(length / spacing)) + 1)
    nv = max(2, int(round(width / spacing)) + 1)
    s = np.linspace(0.0, length, nu)
    w = np.linspace(-width / 2, width / 2, nv)

    def embed(ss, ww):
        if bend_radius is None:
            return np.stack([ss, ww, np.zeros_like(ss)], axis=-1)
        phi = ww / bend_radius
        return np.stack([ss, bend_radius * np.sin(phi), bend_radius * (1 - np.cos(phi))], axis=-1)

    S, W = np.meshgrid(s, w, indexing="ij")
    verts = embed(S.ravel(), W.ravel())
    ij = np.arange(nu * nv).reshape(nu, nv)
    a, b, c, d = ij[:-1, :-1].ravel(), ij[1:, :-1].ravel(), ij[1:, 1:].ravel(), ij[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    mesh = TriMesh(verts, faces)

    cs, cw = S.ravel().copy(), W.ravel().copy()
    if jitter > 0:
        cs = np.clip(cs + rng.uniform(-0.5, 0.5, cs.shape) * jitter * spacing, 0, length)
        cw = np.clip(cw + rng.uniform(-0.5, 0.5, cw.shape) * jitter * spacing, -width / 2, width / 2)
    pts = embed(cs, cw)[rng.permutation(len(cs))]
    colors = np.tile(np.array([[40, 160, 60]], dtype=np.uint8), (len(pts), 1))
    cloud = LabeledPointCloud(pts, colors, np.full(len(pts), instance_id))
    return RibbonLeaf(cloud, mesh, {"length": length, "width": width, "area": length * width})


# -- closed-surface fixtures -------------------------------------------------------

def icosahedron() -> TriMesh:
    """Regular icosahedron inscribed in the unit sphere, outward winding."""
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TriMesh(v, f)


def icosphere(level: int) -> TriMesh:
    """Icosahedron split ``level`` times with midpoints pushed back onto the unit sphere."""
    from .meshing import edge_face_counts

    if level < 0:
        raise ValueError("level must be non-negative")
    m = icosahedron()
    for _ in range(level):
        v, f = m.vertices, m.faces
        edges, _, fe = edge_face_counts(m)
        mid = v[edges].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        nv = len(v)
        m01, m12, m20 = nv + fe[:, 0], nv + fe[:, 1], nv + fe[:, 2]
        faces = np.concatenate([np.stack([f[:, 0], m01, m20], 1), np.stack([f[:, 1], m12, m01], 1),
                                np.stack([f[:, 2], m20, m12], 1), np.stack([m01, m12, m20], 1)])
        m = TriMesh(np.concatenate([v, mid]), faces)
    return m


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def scanned_sphere(n_surface: int = 1500, n_interior: int = 500, noise: float = 0.01,
                   seed: int = 0) -> LabeledPointCloud:
    """Unit-sphere scan: surface samples with radial noise plus a sparse interior fill.

    The interior points keep the Delaunay complex solid so the alpha shape is a single
    closed sheet rather than a thin double-walled shell.
    """
    rng = np.random.default_rng(seed)
    shell = fibonacci_sphere(n_surface) * (1 + rng.normal(0.0, noise, (n_surface, 1)))
    d = rng.normal(size=(n_interior, 3))
    inner = d / np.linalg.norm(d, axis=1, keepdims=True) * 0.9 * rng.uniform(0, 1, (n_interior, 1)) ** (1 / 3)
    return LabeledPointCloud(np.concatenate([shell, inner]))

"""Point-cloud clean-up and surface reconstruction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .geometry import LabeledPointCloud, TriMesh

log = logging.getLogger(__name__)

MAX_FILL_EDGES = 64


@dataclass
class MeshingConfig:
    voxel_size: float = 0.01
    outlier_k: int = 20
    outlier_sigma: float = 2.0
    alpha: Optional[float] = None  # None -> 3 x voxel_size
    loop_iterations: int = 2

    def __post_init__(self):
        if self.voxel_size <= 0 or self.outlier_k <= 0 or self.outlier_sigma <= 0:
            raise ValueError("voxel_size, outlier_k and outlier_sigma must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.loop_iterations < 0:
            raise ValueError("loop_iterations must be non-negative")

    @property
    def resolved_alpha(self) -> float:
        return 3.0 * self.voxel_size if self.alpha is None else self.alpha


# -- preprocessing -------------------------------------------------------------

def voxel_downsample(cloud: LabeledPointCloud, voxel_size: float, anchor=None) -> LabeledPointCloud:
    """One point per occupied voxel: member centroid, mean color, majority id (ties -> lower id)."""
    if len(cloud) == 0:
        raise ValueError("cannot downsample an empty cloud")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if anchor is None:
        # Half-voxel offset keeps lattice-aligned clouds off the bin boundaries.
        origin = cloud.points.min(axis=0) - 0.5 * voxel_size
    else:
        origin = np.asarray(anchor, dtype=np.float64)
    keys = np.floor((cloud.points - origin) / voxel_size).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    if float(np.prod(span.astype(np.float64))) < 2.0 ** 62:
        # Row-major linear key sorts exactly like the rows themselves, but much faster.
        linear = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
        _, inverse, counts = np.unique(linear, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    n = len(counts)
    pts = np.stack([np.bincount(inverse, weights=cloud.points[:, a], minlength=n) for a in range(3)], 1)
    pts /= counts[:, None]
    colors = None
    if cloud.colors is not None:
        colors = np.stack(
            [np.bincount(inverse, weights=cloud.colors[:, a].astype(np.float64), minlength=n) for a in range(3)], 1
        )
        colors = np.rint(colors / counts[:, None]).astype(np.uint8)
    ids = None
    if cloud.instance_ids is not None:
        labels, lab_inv = np.unique(cloud.instance_ids, return_inverse=True)
        votes = np.zeros((n, len(labels)), dtype=np.int64)
        np.add.at(votes, (inverse, lab_inv.ravel()), 1)
        ids = labels[np.argmax(votes, axis=1)]
    return LabeledPointCloud(pts, colors, ids)


def remove_statistical_outliers(cloud: LabeledPointCloud, k: int, n_sigma: float) -> LabeledPointCloud:
    """Drop points whose mean distance to their k nearest neighbours exceeds mean + n_sigma * std."""
    n = len(cloud)
    if n < 2:
        return cloud
    k = min(k, n - 1)
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    keep = mean_d <= mean_d.mean() + n_sigma * mean_d.std()
    return cloud.subset(keep)


def preprocess_cloud(cloud: LabeledPointCloud, cfg: MeshingConfig, anchor=None) -> LabeledPointCloud:
    if len(cloud) == 0:
        raise ValueError("cannot preprocess an empty cloud")
    down = voxel_downsample(cloud, cfg.voxel_size, anchor)
    return remove_statistical_outliers(down, cfg.outlier_k, cfg.outlier_sigma)


# -- alpha shapes --------------------------------------------------------------

def _tet_circumradius(p: np.ndarray) -> np.ndarray:
    """Circumradii of tetrahedra ``p`` of shape ``(T, 4, 3)``; inf for flat ones."""
    a = p[:, 1:] - p[:, :1]
    rhs = 0.5 * np.sum(a * a, axis=2)
    det = np.linalg.det(a)
    r = np.full(len(p), np.inf)
    scale = np.max(np.abs(a), axis=(1, 2)) ** 3
    ok = np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)
    if np.any(ok):
        center = np.linalg.solve(a[ok], rhs[ok][..., None])[..., 0]
        r[ok] = np.linalg.norm(center, axis=1)
    return r


def _tri_circumradius(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    la = np.linalg.norm(b - c, axis=-1)
    lb = np.linalg.norm(a - c, axis=-1)
    lc = np.linalg.norm(a - b, axis=-1)
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(area2 > 0, la * lb * lc / (2 * area2), np.inf)


def _compact(vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
    if len(faces) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    used, inv = np.unique(faces, return_inverse=True)
    return TriMesh(vertices[used], inv.reshape(faces.shape))


def _planar_patch(pts: np.ndarray, alpha: float, normal: np.ndarray, basis: np.ndarray) -> TriMesh:
    uv = (pts - pts.mean(axis=0)) @ basis.T
    tri = Delaunay(uv).simplices
    r = _tri_circumradius(pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]])
    tri = tri[r <= alpha]
    # Orient every triangle along +normal.
    n = np.cross(pts[tri[:, 1]] - pts[tri[:, 0]], pts[tri[:, 2]] - pts[tri[:, 0]])
    flip = n @ normal < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return _compact(pts, tri)


def alpha_shape_mesh(cloud, alpha: float) -> TriMesh:
    """Boundary triangles of the alpha complex of the Delaunay tetrahedralization.

    A triangle is kept iff exactly one of its incident tetrahedra has circumradius
    <= ``alpha``; it is oriented away from that tetrahedron. Coplanar input yields
    the alpha-filtered planar Delaunay triangulation instead.
    """
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("alpha shape needs at least 3 points")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    centered = pts - pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    if sv[0] == 0:
        raise ValueError("all points coincide")
    if len(pts) < 4 or sv[2] <= 1e-9 * sv[0]:
        return _planar_patch(pts, alpha, vt[2], vt[:2])
    try:
        tets = Delaunay(pts).simplices
    except QhullError as exc:
        raise ValueError(f"Delaunay tetrahedralization failed: {exc}") from exc
    keep = tets[_tet_circumradius(pts[tets]) <= alpha]
    if len(keep) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # Face j of a tet omits vertex j.
    faces = np.concatenate([keep[:, [1, 2, 3]], keep[:, [0, 3, 2]], keep[:, [0, 1, 3]], keep[:, [0, 2, 1]]])
    opposite = np.concatenate([keep[:, 0], keep[:, 1], keep[:, 2], keep[:, 3]])
    _, inv, counts = np.unique(np.sort(faces, axis=1), axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inv.ravel()] == 1
    faces, opposite = faces[boundary], opposite[boundary]
    a, b, c = pts[faces[:, 0]], pts[faces[:, 1]], pts[faces[:, 2]]
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), pts[opposite] - a) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return _compact(pts, faces)


def surface_patch_mesh(cloud, alpha: float) -> TriMesh:
    """Single-sheet triangulation of a surface sample via its best-fit plane.

    Points are projected onto the two leading principal axes, triangulated there and
    filtered by the 3D circumradius. Suited to thin, height-field-like organs such as
    leaves where a volumetric alpha shape produces a double-sided shell.
    """
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    _, _, vt = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)
    return _planar_patch(pts, alpha, vt[2], vt[:2])


# -- topology helpers ----------------------------------------------------------

def edge_face_counts(mesh: TriMesh):
    """Unique sorted edges, their incident-face counts, and per-face edge ids ``(F, 3)``."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges, inv, counts = np.unique(np.sort(e, axis=1), axis=0, return_inverse=True, return_counts=True)
    face_edges = inv.ravel().reshape(3, -1).T
    return edges, counts, face_edges


def _require_manifold(counts: np.ndarray) -> None:
    if np.any(counts > 2):
        raise ValueError(f"non-manifold mesh: {int(np.sum(counts > 2))} edges with more than two faces")


def boundary_loops(mesh: TriMesh) -> list[list[int]]:
    """Boundary loops as vertex lists, each following the faces' winding."""
    if mesh.n_faces == 0:
        return []
    _, counts, _ = edge_face_counts(mesh)
    _require_manifold(counts)
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    edges, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bnd = directed[cnt[inv.ravel()] == 1]
    succ: dict[int, list[int]] = {}
    for a, b in bnd:
        succ.setdefault(int(a), []).append(int(b))
    for v in succ:
        succ[v].sort()
    loops = []
    for start in sorted(succ):
        while succ.get(start):
            loop = [start]
            cur = succ[start].pop(0)
            while cur != start:
                loop.append(cur)
                nxt = succ.get(cur)
                if not nxt:
                    raise ValueError("boundary does not close into loops")
                cur = nxt.pop(0)
            loops.append(loop)
    return loops


def fill_holes(mesh: TriMesh, max_edges: int = MAX_FILL_EDGES) -> TriMesh:
    """Close every boundary loop of at most ``max_edges`` edges with a centroid fan."""
    loops = boundary_loops(mesh)
    verts = [mesh.vertices]
    faces = [mesh.faces]
    nv = mesh.n_vertices
    left_open = []
    for loop in loops:
        if len(loop) > max_edges:
            left_open.append(len(loop))
            continue
        centroid = mesh.vertices[loop].mean(axis=0)
        verts.append(centroid[None])
        a = np.array(loop)
        b = np.roll(a, -1)
        # Boundary edges run a->b in their face; the fan must traverse them b->a.
        faces.append(np.stack([b, a, np.full(len(a), nv)], axis=1))
        nv += 1
    if left_open:
        log.warning("left %d boundary loop(s) open (edge counts %s > %d)", len(left_open), left_open, max_edges)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# -- Loop subdivision ----------------------------------------------------------

def _loop_once(mesh: TriMesh) -> TriMesh:
    v, f = mesh.vertices, mesh.faces
    nv = len(v)
    edges, counts, face_edges = edge_face_counts(mesh)
    _require_manifold(counts)
    ne = len(edges)

    # Edge k of a face is (f[k], f[k+1]) and its opposite vertex is f[k+2].
    eid = face_edges.T.ravel()
    ov = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    order = np.argsort(eid, kind="stable")
    eid, ov = eid[order], ov[order]
    first = np.searchsorted(eid, np.arange(ne))
    slot = np.arange(len(eid)) - first[eid]
    opp = np.full((ne, 2), -1, dtype=np.int64)
    opp[eid, slot] = ov
    boundary_edge = counts == 1

    a, b = edges[:, 0], edges[:, 1]
    odd = np.where(
        boundary_edge[:, None],
        0.5 * (v[a] + v[b]),
        0.375 * (v[a] + v[b]) + 0.125 * (v[opp[:, 0]] + v[np.maximum(opp[:, 1], 0)]),
    )

    valence = np.bincount(edges.ravel(), minlength=nv)
    nbr_sum = np.zeros((nv, 3))
    np.add.at(nbr_sum, a, v[b])
    np.add.at(nbr_sum, b, v[a])
    with np.errstate(divide="ignore", invalid="ignore"):
        n = valence.astype(np.float64)
        beta = (0.625 - (0.375 + 0.25 * np.cos(2 * math.pi / n)) ** 2) / n
    even = np.where(
        (valence > 0)[:, None],
        (1 - n * beta)[:, None] * v + beta[:, None] * nbr_sum,
        v,
    )
    be = edges[boundary_edge]
    b_count = np.bincount(be.ravel(), minlength=nv)
    b_sum = np.zeros((nv, 3))
    np.add.at(b_sum, be[:, 0], v[be[:, 1]])
    np.add.at(b_sum, be[:, 1], v[be[:, 0]])
    crease = b_count == 2
    even[crease] = 0.75 * v[crease] + 0.125 * b_sum[crease]
    # Non-manifold boundary vertices (more than two boundary edges) stay put.
    pinned = b_count > 2
    even[pinned] = v[pinned]

    m01 = nv + face_edges[:, 0]
    m12 = nv + face_edges[:, 1]
    m20 = nv + face_edges[:, 2]
    new_faces = np.concatenate([
        np.stack([f[:, 0], m01, m20], 1),
        np.stack([f[:, 1], m12, m01], 1),
        np.stack([f[:, 2], m20, m12], 1),
        np.stack([m01, m12, m20], 1),
    ])
    return TriMesh(np.concatenate([even, odd]), new_faces)


def loop_subdivide(mesh: TriMesh, iterations: int) -> TriMesh:
    """Loop subdivision with the usual boundary (crease) rules."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    for _ in range(iterations):
        mesh = _loop_once(mesh)
    return mesh

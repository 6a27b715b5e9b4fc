"""Organ traits: volume, surface area, leaf length and ARAP-based leaf width."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import LabeledPointCloud, NnIndex, TriMesh
from .meshing import (MeshingConfig, alpha_shape_mesh, boundary_loops, edge_face_counts, fill_holes,
                      loop_subdivide, preprocess_cloud, surface_patch_mesh, voxel_downsample)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("instance_id", "class", "volume_cm3", "area_cm2", "length_cm", "width_cm",
               "alpha", "loop_iterations", "k", "n", "scale_cm_per_unit")


@dataclass
class TraitReport:
    instance_id: int
    organ_class: str
    volume: float  # scene units^3
    area: float | None  # scene units^2; None when no valid surface could be built
    length: float
    width: float | None  # None when the organ has no disk surface to flatten
    scale_cm_per_unit: float = 1.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [v for v in (self.volume, self.area, self.length, self.width) if v is not None]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"instance {self.instance_id}: trait values must be finite and >= 0")
        if self.scale_cm_per_unit <= 0:
            raise ValueError("scale_cm_per_unit must be positive")

    @property
    def volume_cm3(self) -> float:
        return self.volume * self.scale_cm_per_unit ** 3

    @property
    def area_cm2(self) -> float | None:
        return None if self.area is None else self.area * self.scale_cm_per_unit ** 2

    @property
    def length_cm(self) -> float:
        return self.length * self.scale_cm_per_unit

    @property
    def width_cm(self) -> float | None:
        return None if self.width is None else self.width * self.scale_cm_per_unit

    def row(self) -> dict:
        c = self.config
        return {
            "instance_id": self.instance_id,
            "class": self.organ_class,
            "volume_cm3": repr(self.volume_cm3),
            "area_cm2": "" if self.area is None else repr(self.area_cm2),
            "length_cm": repr(self.length_cm),
            "width_cm": "" if self.width is None else repr(self.width_cm),
            "alpha": c.get("alpha", ""),
            "loop_iterations": c.get("loop_iterations", ""),
            "k": c.get("k", ""),
            "n": c.get("n", ""),
            "scale_cm_per_unit": self.scale_cm_per_unit,
        }


def write_trait_csv(path, reports: list[TraitReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def read_trait_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- volume and area -----------------------------------------------------------

def instance_volume(cloud: LabeledPointCloud, voxel_size: float = 0.01, anchor=None) -> float:
    """Occupied-voxel count times the voxel volume; the cloud is re-downsampled first."""
    if len(cloud) == 0:
        raise ValueError("cannot measure the volume of an empty cloud")
    ds = voxel_downsample(cloud, voxel_size, anchor)
    return len(ds) * voxel_size ** 3


def surface_area(mesh: TriMesh) -> float:
    if mesh.n_faces == 0:
        return 0.0
    v = mesh.vertices[mesh.faces]
    return float(0.5 * np.linalg.norm(np.cross(v[:, 0] - v[:, 1], v[:, 0] - v[:, 2]), axis=1).sum())


# -- leaf length ---------------------------------------------------------------

@dataclass
class MidribTrace:
    base_points: np.ndarray
    principal_axis: np.ndarray
    e_s: np.ndarray
    e_t: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.base_points, axis=0), axis=1).sum())


def principal_axis(points: np.ndarray) -> np.ndarray:
    """Leading covariance eigenvector, signed to agree with the axis of largest extent."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-300:
        raise ValueError("zero-variance cloud has no principal axis")
    v1 = evecs[:, -1]
    extent_axis = int(np.argmax(np.ptp(points, axis=0)))
    if v1[extent_axis] < 0:
        v1 = -v1
    return v1 / np.linalg.norm(v1)


def mean_nn_spacing(points: np.ndarray) -> float:
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())


def _unvisited_neighbors(index: NnIndex, q: np.ndarray, k: int, visited: np.ndarray) -> np.ndarray:
    """The ``k`` nearest points to ``q`` not yet visited, ascending by distance then index."""
    n = len(index)
    n_free = n - int(visited.sum())
    want = min(k, n_free)
    if want == 0:
        return np.empty(0, dtype=np.int64)
    kq = min(n, k + int(visited.sum()))
    while True:
        idx = index.query_distances(q, kq)[0]
        free = idx[~visited[idx]]
        if len(free) >= want or kq == n:
            return free[:want]
        kq = min(n, 2 * kq)


def _extreme_point(pts: np.ndarray, proj: np.ndarray, v1: np.ndarray, sign: int) -> int:
    """Extreme point along ``sign * v1``; exact ties go to the point nearest the central axis."""
    target = proj.max() if sign > 0 else proj.min()
    tie_tol = 1e-9 * max(float(np.ptp(proj)), 1e-300)
    tied = np.flatnonzero(np.abs(proj - target) <= tie_tol)
    if len(tied) == 1:
        return int(tied[0])
    off = pts[tied] - pts.mean(axis=0)
    radial = np.linalg.norm(off - np.outer(off @ v1, v1), axis=1)
    return int(tied[np.lexsort((tied, radial))[0]])


def leaf_length(cloud, k: int = 8, theta_max: float = math.pi / 2, epsilon: float | None = None,
                m_max: int = 500) -> tuple[float, MidribTrace]:
    """Greedy midrib walk along the principal axis; returns the polyline length and its trace.

    ``epsilon`` defaults to twice the mean nearest-neighbour spacing.
    """
    pts = cloud.points if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be positive")
    if len(pts) < k + 1:
        raise ValueError(f"leaf_length needs at least k+1={k + 1} points, got {len(pts)}")
    v1 = principal_axis(pts)
    proj = pts @ v1
    s, t = _extreme_point(pts, proj, v1, -1), _extreme_point(pts, proj, v1, +1)
    if epsilon is None:
        epsilon = 2.0 * mean_nn_spacing(pts)
    index = NnIndex(pts)
    visited = np.zeros(len(pts), dtype=bool)
    visited[s] = True
    path = [s]
    # Steps at exactly theta_max (lateral lattice neighbours) are rejected regardless of rounding.
    cos_max = math.cos(theta_max) + 1e-9
    while len(path) < m_max and np.linalg.norm(pts[path[-1]] - pts[t]) > epsilon:
        b = pts[path[-1]]
        cand = _unvisited_neighbors(index, b, k, visited)
        if len(cand) == 0:
            break
        step = pts[cand] - b
        cosang = (step @ v1) / np.maximum(np.linalg.norm(step, axis=1), 1e-300)
        ok = np.flatnonzero(cosang > cos_max)
        # Ties in angle go to the nearer (earlier) candidate.
        nxt = int(cand[ok[0]]) if len(ok) else int(cand[np.argmax(cosang)])
        visited[nxt] = True
        path.append(nxt)
    if path[-1] != t:
        path.append(t)
    keep = path[::2]
    if keep[-1] != path[-1]:
        keep.append(path[-1])
    trace = MidribTrace(pts[keep].copy(), v1, pts[s].copy(), pts[t].copy())
    return trace.length, trace


# -- ARAP parameterization -----------------------------------------------------

@dataclass
class Parameterization2D:
    uv: np.ndarray
    arap_energy: float
    iterations_used: int
    energy_history: list[float] = field(default_factory=list)


def _cotangents(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """``cot[t, i]`` is the cotangent of the angle at corner ``i`` of face ``t``."""
    cot = np.empty((len(f), 3))
    for i in range(3):
        a = v[f[:, (i + 1) % 3]] - v[f[:, i]]
        b = v[f[:, (i + 2) % 3]] - v[f[:, i]]
        cot[:, i] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
    return cot


def _local_frames(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Each triangle isometrically placed in 2D: ``x[t, i]`` for corner ``i``."""
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    e1 = p1 - p0
    l1 = np.linalg.norm(e1, axis=1)
    ex = e1 / l1[:, None]
    e2 = p2 - p0
    x2 = np.einsum("ij,ij->i", e2, ex)
    y2 = np.linalg.norm(e2 - x2[:, None] * ex, axis=1)
    x = np.zeros((len(f), 3, 2))
    x[:, 1, 0] = l1
    x[:, 2, 0] = x2
    x[:, 2, 1] = y2
    return x


def _cot_laplacian(n: int, f: np.ndarray, cot: np.ndarray) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for i in range(3):
        a, b = f[:, (i + 1) % 3], f[:, (i + 2) % 3]
        w = cot[:, i]
        rows += [a, b, a, b]
        cols += [b, a, a, b]
        vals += [-w, -w, w, w]
    return sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()


def check_disk(mesh: TriMesh) -> list[int]:
    """Return the single boundary loop of a connected manifold disk, else raise."""
    if mesh.n_faces == 0:
        raise ValueError("empty mesh")
    _, counts, _ = edge_face_counts(mesh)
    if np.any(counts > 2):
        raise ValueError("non-manifold mesh cannot be parameterized")
    used = np.unique(mesh.faces)
    if len(used) != mesh.n_vertices:
        raise ValueError("mesh has unreferenced vertices")
    n_comp, _ = connected_components(
        sparse.coo_matrix((np.ones(mesh.n_faces * 3), (mesh.faces.ravel(), np.roll(mesh.faces, 1, 1).ravel())),
                          shape=(mesh.n_vertices,) * 2))
    loops = boundary_loops(mesh)
    if n_comp != 1 or len(loops) != 1 or mesh.euler_characteristic() != 1:
        raise ValueError(f"expected a connected disk, got {n_comp} component(s), {len(loops)} boundary loop(s), "
                         f"Euler characteristic {mesh.euler_characteristic()}")
    return loops[0]


def tutte_embedding(mesh: TriMesh, loop: list[int], cot: np.ndarray) -> np.ndarray:
    """Boundary on the unit circle by arc length, interior by a cotangent harmonic solve."""
    v = mesh.vertices
    loop = np.asarray(loop)
    seg = np.linalg.norm(v[np.roll(loop, -1)] - v[loop], axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / seg.sum()
    uv = np.zeros((mesh.n_vertices, 2))
    uv[loop] = np.stack([np.cos(2 * np.pi * arc), np.sin(2 * np.pi * arc)], 1)
    interior = np.setdiff1d(np.arange(mesh.n_vertices), loop)
    if len(interior):
        lap = _cot_laplacian(mesh.n_vertices, mesh.faces, cot).tocsc()
        a_ii = lap[interior][:, interior]
        a_ib = lap[interior][:, loop]
        uv[interior] = splu(a_ii.tocsc()).solve(-(a_ib @ uv[loop]))
    return uv


def _arap_energy(uv, f, x, cot, rot) -> float:
    e = 0.0
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        du = uv[f[:, a]] - uv[f[:, b]]
        dx = np.einsum("tij,tj->ti", rot, x[:, a] - x[:, b])
        e += float(np.sum(cot[:, i] * np.sum((du - dx) ** 2, axis=1)))
    return 0.5 * e


def _fit_rotations(uv, f, x, cot) -> np.ndarray:
    s = np.zeros((len(f), 2, 2))
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        du = uv[f[:, a]] - uv[f[:, b]]
        dx = x[:, a] - x[:, b]
        s += cot[:, i, None, None] * du[:, :, None] * dx[:, None, :]
    u, _, vt = np.linalg.svd(s)
    r = u @ vt
    neg = np.linalg.det(r) < 0
    if np.any(neg):
        u[neg, :, 1] *= -1
        r[neg] = u[neg] @ vt[neg]
    return r


def arap_parameterize(mesh: TriMesh, max_iterations: int = 100, tol: float = 1e-7) -> Parameterization2D:
    """Flatten a disk mesh by local/global ARAP iterations from a Tutte start."""
    if max_iterations < 0 or tol < 0:
        raise ValueError("max_iterations and tol must be non-negative")
    loop = check_disk(mesh)
    v, f = mesh.vertices, mesh.faces
    areas = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    scale = max(float(np.ptp(v, axis=0).max()), 1e-300)
    if np.any(areas <= 1e-12 * scale * scale):
        raise ValueError(f"{int(np.sum(areas <= 1e-12 * scale * scale))} degenerate (zero-area) triangle(s)")
    cot = _cotangents(v, f)
    x = _local_frames(v, f)
    uv = tutte_embedding(mesh, loop, cot)

    n = mesh.n_vertices
    lap = _cot_laplacian(n, f, cot).tolil()
    # Pin vertex 0 to remove the translational null space.
    lap[0, :] = 0
    lap[0, 0] = 1.0
    solver = splu(lap.tocsc())

    def global_step(rot):
        rhs = np.zeros((n, 2))
        for i in range(3):
            a, b = (i + 1) % 3, (i + 2) % 3
            dx = np.einsum("tij,tj->ti", rot, x[:, a] - x[:, b]) * cot[:, i, None]
            np.add.at(rhs, f[:, a], dx)
            np.add.at(rhs, f[:, b], -dx)
        rhs[0] = uv[0]
        return solver.solve(rhs)

    rot = _fit_rotations(uv, f, x, cot)
    energy = _arap_energy(uv, f, x, cot, rot)
    history = [energy]
    it = 0
    for it in range(1, max_iterations + 1):
        new_uv = global_step(rot)
        new_rot = _fit_rotations(new_uv, f, x, cot)
        new_energy = _arap_energy(new_uv, f, x, cot, new_rot)
        if not np.all(np.isfinite(new_uv)) or new_energy > energy:
            # Negative cotangent weights can break monotonicity; keep the best iterate.
            log.debug("ARAP stopped at iteration %d: energy would rise to %.3g", it, new_energy)
            it -= 1
            break
        decrease = energy - new_energy
        uv, rot, energy = new_uv, new_rot, new_energy
        history.append(energy)
        if decrease < tol:
            break
    return Parameterization2D(uv, max(energy, 0.0), it, history)


# -- leaf width ----------------------------------------------------------------

def width_from_uv(uv: np.ndarray, n: int = 100) -> float:
    """Widest strip across the main axis of the flattened coordinates."""
    if n < 1:
        raise ValueError("n must be positive")
    centered = uv - uv.mean(axis=0)
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    if evals[0] <= 1e-12 * max(evals[1], 1e-300):
        log.warning("degenerate parameterization (collinear uv); width reported as 0")
        return 0.0
    w, w_perp = evecs[:, 1], evecs[:, 0]
    s = uv @ w
    t = uv @ w_perp
    s_min, s_max = float(s.min()), float(s.max())
    half = (s_max - s_min) / (2 * n)
    best = 0.0
    for k in range(n + 1):
        sk = s_min + (k / n) * (s_max - s_min)
        in_strip = np.abs(s - sk) <= half
        if np.any(in_strip):
            best = max(best, float(np.ptp(t[in_strip])))
    return best


def leaf_width(mesh: TriMesh, n: int = 100, max_iterations: int = 100, tol: float = 1e-7) -> float:
    return width_from_uv(arap_parameterize(mesh, max_iterations, tol).uv, n)


# -- per-instance extraction ---------------------------------------------------

LEAF_ELONGATION = 3.0


@dataclass
class TraitConfig:
    k: int = 8
    theta_max: float = math.pi / 2
    epsilon: float | None = None
    m_max: int = 500
    n: int = 100
    arap_max_iterations: int = 100
    arap_tol: float = 1e-7
    scale_cm_per_unit: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.m_max < 2 or self.n < 1 or self.arap_max_iterations < 0:
            raise ValueError("k, m_max, n must be positive and arap_max_iterations non-negative")
        if not 0 < self.theta_max <= math.pi:
            raise ValueError("theta_max must lie in (0, pi]")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.scale_cm_per_unit <= 0:
            raise ValueError("scale_cm_per_unit must be positive")


def classify_organ(points: np.ndarray) -> str:
    """``leaf`` for elongated clouds (leading std at least 3x the second), else ``panicle``."""
    c = points - points.mean(axis=0)
    sd = np.sqrt(np.maximum(np.linalg.eigvalsh(c.T @ c / len(points)), 0.0))
    return "leaf" if sd[2] >= LEAF_ELONGATION * max(sd[1], 1e-300) else "panicle"


def extract_traits(instance_id: int, cloud: LabeledPointCloud, mcfg: MeshingConfig, tcfg: TraitConfig,
                   organ_class: str | None = None, anchor=None) -> TraitReport:
    """Volume, area, length and (for disk surfaces) width of one instance cloud."""
    clean = preprocess_cloud(cloud, mcfg, anchor)
    organ_class = organ_class or classify_organ(clean.points)
    alpha = mcfg.resolved_alpha
    volume = instance_volume(clean, mcfg.voxel_size, anchor)
    length, _ = leaf_length(clean, tcfg.k, tcfg.theta_max, tcfg.epsilon, tcfg.m_max)
    area = width = None
    try:
        raw = surface_patch_mesh(clean, alpha) if organ_class == "leaf" else alpha_shape_mesh(clean, alpha)
        repaired = fill_holes(raw)
        area = surface_area(loop_subdivide(repaired, mcfg.loop_iterations))
    except ValueError as exc:
        log.warning("instance %d: surface reconstruction failed (%s); area left blank", instance_id, exc)
        repaired = None
    if repaired is not None and organ_class == "leaf":
        try:
            width = leaf_width(repaired, tcfg.n, tcfg.arap_max_iterations, tcfg.arap_tol)
        except ValueError as exc:
            log.warning("instance %d: no width (%s)", instance_id, exc)
    cfg_echo = {"alpha": alpha, "loop_iterations": mcfg.loop_iterations, "k": tcfg.k, "n": tcfg.n}
    return TraitReport(instance_id, organ_class, volume, area, length, width, tcfg.scale_cm_per_unit, cfg_echo)

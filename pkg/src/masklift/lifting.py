"""Mask inverse rendering: per-object voxel score grids rendered through a density field.

Grids use a node convention: value ``[i, j, k]`` sits at
``bounds.min + (i, j, k) * bounds.extent / (dims - 1)``. Flat indices are x-fastest,
matching the on-disk layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import Aabb, CameraIntrinsics, CameraPose, LabeledPointCloud, Ray, Rays, generate_camera_rays

log = logging.getLogger(__name__)

# Rays evaluated together inside one optimisation chunk; bounds peak memory only.
_TILE_RAYS = 4096

PALETTE = np.array(
    [
        [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
        [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
        [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
        [170, 255, 195], [128, 128, 0], [255, 215, 180], [0, 0, 128], [128, 128, 128],
    ],
    dtype=np.uint8,
)
UNLABELED_COLOR = np.array([96, 96, 96], dtype=np.uint8)


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"grid dims must be three integers >= 2, got {dims}")
    return dims


@dataclass
class DensityField:
    bounds: Aabb
    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        _check_dims(self.sigma.shape)
        if not np.all(np.isfinite(self.sigma)) or np.any(self.sigma < 0):
            raise ValueError("densities must be finite and non-negative")
        if np.any(self.bounds.extent <= 0):
            raise ValueError("density bounds must have positive extent")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.sigma.shape

    def flat(self) -> np.ndarray:
        return self.sigma.ravel(order="F")


@dataclass
class MaskField:
    """``scores`` has shape ``(n_objects, L, W, H)``; values are unconstrained reals."""

    bounds: Aabb
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 4 or self.scores.shape[0] < 1:
            raise ValueError("scores must have shape (n_objects >= 1, L, W, H)")
        _check_dims(self.scores.shape[1:])

    @classmethod
    def zeros(cls, n_objects: int, like: DensityField) -> "MaskField":
        if n_objects < 1:
            raise ValueError("need at least one object")
        return cls(like.bounds, np.zeros((n_objects, *like.dims)))

    @property
    def n_objects(self) -> int:
        return self.scores.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.scores.shape[1:]

    def flat(self) -> np.ndarray:
        """``(n_objects, L*W*H)`` view in x-fastest order."""
        return self.scores.transpose(0, 3, 2, 1).reshape(self.n_objects, -1)

    def set_flat(self, flat: np.ndarray) -> None:
        l, w, h = self.dims
        self.scores = np.ascontiguousarray(flat.reshape(self.n_objects, h, w, l).transpose(0, 3, 2, 1))

    def sample(self, points: np.ndarray, clamp: bool = False) -> np.ndarray:
        """Trilinear scores at ``points``; ``(n_objects, N)``, zero outside bounds."""
        idx, wts = trilinear_corners(self.bounds, self.dims, points)
        vals = np.einsum("onc,nc->on", self.flat()[:, idx], wts)
        return np.clip(vals, 0.0, 1.0) if clamp else vals

    def check_compatible(self, density: DensityField) -> None:
        if self.dims != density.dims or not (
            np.array_equal(self.bounds.min, density.bounds.min)
            and np.array_equal(self.bounds.max, density.bounds.max)
        ):
            raise ValueError("mask field and density field disagree on dims or bounds")


@dataclass
class RaySamples:
    t_values: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __len__(self) -> int:
        return len(self.t_values)

    def positions(self) -> np.ndarray:
        return self.origin + self.t_values[:, None] * self.direction


@dataclass
class LiftingConfig:
    learning_rate: float = 0.1
    lam: float = 1.0
    chunk_rays: int = 16384
    passes: int = 3
    samples_per_ray: int = 128
    export_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("chunk_rays", "passes", "samples_per_ray"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not 0 < self.export_threshold < 1:
            raise ValueError("export_threshold must lie in (0, 1)")


# -- interpolation -------------------------------------------------------------

def trilinear_corners(bounds: Aabb, dims, points: np.ndarray):
    """Corner flat indices and weights, both ``(N, 8)``; points outside bounds get zero weights."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.asarray(dims)
    g = (pts - bounds.min) / bounds.extent * (d - 1)
    inside = np.all((g >= 0) & (g <= d - 1), axis=1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, d - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    idx = np.empty((len(pts), 8), dtype=np.int64)
    wts = np.empty((len(pts), 8))
    c = 0
    for dz in (0, 1):
        wz = f[:, 2] if dz else 1.0 - f[:, 2]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dx in (0, 1):
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                idx[:, c] = (i0[:, 0] + dx) + d[0] * ((i0[:, 1] + dy) + d[1] * (i0[:, 2] + dz))
                wts[:, c] = wx * wy * wz
                c += 1
    wts[~inside] = 0.0
    idx[~inside] = 0
    return idx, wts


def sample_density(field: DensityField, points: np.ndarray) -> np.ndarray:
    """Trilinear density at ``points``, zero outside the bounds."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.asarray(field.dims)
    g = (pts - field.bounds.min) / field.bounds.extent * (d - 1)
    inside = np.all((g >= 0) & (g <= d - 1), axis=1)
    vals = ndimage.map_coordinates(field.sigma, g[inside].T, order=1, mode="nearest", prefilter=False)
    out = np.zeros(len(pts))
    out[inside] = vals
    return out


# -- quadrature ----------------------------------------------------------------

def weights_from_sigma(sigma: np.ndarray, delta) -> np.ndarray:
    """Emission-absorption weights ``T_i (1 - exp(-sigma_i delta))`` along the last axis."""
    tau = sigma * np.asarray(delta)[..., None] if np.ndim(delta) else sigma * delta
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    return trans * (-np.expm1(-tau))


def sample_rays(field: DensityField, origins, directions, t_near, t_far, n: int):
    """Midpoint samples and weights for a batch of rays. Returns ``(t, delta, weights)``."""
    if n < 2:
        raise ValueError("need at least two samples per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    delta = (t_far - t_near) / n
    t = t_near[:, None] + (np.arange(n) + 0.5) * delta[:, None]
    pos = origins[:, None, :] + t[..., None] * directions[:, None, :]
    sigma = sample_density(field, pos.reshape(-1, 3)).reshape(t.shape)
    return t, delta, weights_from_sigma(sigma, delta)


def compute_ray_weights(field: DensityField, ray: Ray, t_near: float, t_far: float, n: int) -> RaySamples:
    """Uniform midpoint quadrature of the transmittance weights on ``[t_near, t_far]``.

    A ray that misses the field bounds yields empty samples.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if not t_near < t_far:
        raise ValueError("t_near must be smaller than t_far")
    _, _, hit = field.bounds.intersect_rays(ray.origin[None], ray.direction[None])
    if not hit[0]:
        empty = np.zeros(0)
        return RaySamples(empty, empty.copy(), empty.copy(), ray.origin, ray.direction)
    t, delta, w = sample_rays(
        field, ray.origin[None], ray.direction[None], np.array([t_near]), np.array([t_far]), n
    )
    return RaySamples(t[0], np.full(n, delta[0]), w[0], ray.origin, ray.direction)


# -- rendering, loss, gradient -------------------------------------------------

def render_mask(mask: MaskField, ray: Ray, samples: RaySamples) -> np.ndarray:
    """Per-object rendered value ``sum_k w_k * V_i(r(t_k))``; linear in the scores."""
    if mask.n_objects == 0:
        raise ValueError("mask field has no objects")
    if len(samples) == 0:
        return np.zeros(mask.n_objects)
    return mask.sample(samples.positions()) @ samples.weights


def projection_loss(m_ext: np.ndarray, m_render: np.ndarray, lam: float) -> float:
    """``-sum m_ext * M + lam * sum (1 - m_ext) * M`` over objects and rays."""
    m_ext = np.asarray(m_ext, dtype=np.float64)
    m_render = np.asarray(m_render, dtype=np.float64)
    if m_ext.shape != m_render.shape:
        raise ValueError(f"shape mismatch: external {m_ext.shape} vs rendered {m_render.shape}")
    return float(np.sum(-m_ext * m_render + lam * (1.0 - m_ext) * m_render))


def loss_coefficients(m_ext: np.ndarray, lam: float) -> np.ndarray:
    """dL/dM per object and ray."""
    return -m_ext + lam * (1.0 - m_ext)


@dataclass
class _SparseSamples:
    """Non-zero-weight samples of a ray batch, flattened."""

    ray: np.ndarray
    weight: np.ndarray
    corner_idx: np.ndarray
    corner_wts: np.ndarray


def _nonzero_samples(density: DensityField, rays: Rays, n: int):
    """Ray index, weight and position of every sample with non-zero weight."""
    t_near, t_far, hit = density.bounds.intersect_rays(rays.origins, rays.directions)
    rows = np.flatnonzero(hit)
    if len(rows) == 0:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3))
    o, d = rays.origins[rows], rays.directions[rows]
    t, _, w = sample_rays(density, o, d, t_near[rows], t_far[rows], n)
    r, k = np.nonzero(w > 0)
    return rows[r], w[r, k], o[r] + t[r, k][:, None] * d[r]


def _with_corners(density: DensityField, ray, weight, pos) -> _SparseSamples:
    idx, wts = trilinear_corners(density.bounds, density.dims, pos)
    return _SparseSamples(ray, weight, idx, wts)


def _gather_samples(density: DensityField, rays: Rays, n: int) -> _SparseSamples:
    return _with_corners(density, *_nonzero_samples(density, rays, n))


def _render_sparse(flat_scores: np.ndarray, s: _SparseSamples, n_rays: int) -> np.ndarray:
    vals = np.einsum("onc,nc->on", flat_scores[:, s.corner_idx], s.corner_wts)
    return np.stack([np.bincount(s.ray, weights=s.weight * v, minlength=n_rays) for v in vals])


def _grad_sparse(coef: np.ndarray, s: _SparseSamples, n_voxels: int) -> np.ndarray:
    grad = np.empty((coef.shape[0], n_voxels))
    for i, c in enumerate(coef):
        contrib = (c[s.ray] * s.weight)[:, None] * s.corner_wts
        grad[i] = np.bincount(s.corner_idx.ravel(), weights=contrib.ravel(), minlength=n_voxels)
    return grad


def render_rays(mask: MaskField, density: DensityField, rays: Rays, n: int) -> np.ndarray:
    """Rendered mask values ``(n_objects, n_rays)`` over each ray's span inside the bounds."""
    s = _gather_samples(density, rays, n)
    return _render_sparse(mask.flat(), s, len(rays))


def projection_loss_and_grad(mask: MaskField, density: DensityField, rays: Rays,
                             m_ext: np.ndarray, lam: float, n: int):
    """Loss and analytic gradient w.r.t. the scores (same shape as ``mask.scores``)."""
    m_ext = np.asarray(m_ext, dtype=np.float64)
    if m_ext.shape != (mask.n_objects, len(rays)):
        raise ValueError(f"external masks must have shape {(mask.n_objects, len(rays))}")
    s = _gather_samples(density, rays, n)
    rendered = _render_sparse(mask.flat(), s, len(rays))
    grad_flat = _grad_sparse(loss_coefficients(m_ext, lam), s, int(np.prod(mask.dims)))
    g = MaskField(mask.bounds, np.zeros_like(mask.scores))
    g.set_flat(grad_flat)
    return projection_loss(m_ext, rendered, lam), g.scores


# -- optimisation --------------------------------------------------------------

@dataclass
class View:
    pose: CameraPose
    masks: np.ndarray  # (n_objects, height, width), values in [0, 1]


def _validate_views(views: Sequence[View], intr: CameraIntrinsics) -> int:
    if not views:
        raise ValueError("need at least one view")
    n_obj = None
    for i, v in enumerate(views):
        m = np.asarray(v.masks)
        if m.ndim != 3 or m.shape[1:] != (intr.height, intr.width):
            raise ValueError(
                f"view {i}: masks of shape {m.shape[1:]} do not match image size "
                f"{(intr.height, intr.width)}"
            )
        if not np.all(np.isfinite(m)):
            raise ValueError(f"view {i}: non-finite mask values")
        if m.min() < 0 or m.max() > 1:
            raise ValueError(f"view {i}: mask values outside [0, 1]")
        if n_obj is None:
            n_obj = m.shape[0]
        elif m.shape[0] != n_obj:
            raise ValueError(f"view {i}: object count {m.shape[0]} differs from {n_obj}")
    if not n_obj:
        raise ValueError("need at least one object")
    return n_obj


def lift_masks(density: DensityField, views: Sequence[View], intrinsics: CameraIntrinsics,
               cfg: LiftingConfig | None = None, callback=None) -> MaskField:
    """Optimise a zero-initialised mask field against per-view 2D masks.

    Views are visited in order for ``cfg.passes`` epochs; each view's rays are split
    into chunks of ``cfg.chunk_rays`` and every chunk takes one plain gradient step.
    ``callback(pass_idx, view_idx, chunk_idx, loss)`` is invoked after each step.
    """
    cfg = cfg or LiftingConfig()
    n_obj = _validate_views(views, intrinsics)
    field = MaskField.zeros(n_obj, density)
    flat = field.flat().copy()
    n_vox = flat.shape[1]
    view_rays = [generate_camera_rays(v.pose, intrinsics) for v in views]
    view_masks = [np.asarray(v.masks, dtype=np.float64).reshape(n_obj, -1) for v in views]
    # Weights depend only on the density, so tiles are sampled once and reused every pass.
    cache: dict[tuple[int, int], tuple] = {}
    for p in range(cfg.passes):
        for vi, (rays, m_ext) in enumerate(zip(view_rays, view_masks)):
            for ci, start in enumerate(range(0, len(rays), cfg.chunk_rays)):
                stop = min(start + cfg.chunk_rays, len(rays))
                grad = np.zeros_like(flat)
                loss = 0.0
                for ts in range(start, stop, _TILE_RAYS):
                    te = min(ts + _TILE_RAYS, stop)
                    key = (vi, ts)
                    if key not in cache:
                        cache[key] = _nonzero_samples(density, rays.slice(ts, te), cfg.samples_per_ray)
                    s = _with_corners(density, *cache[key])
                    if len(s.ray) == 0:
                        continue
                    m = m_ext[:, ts:te]
                    loss += projection_loss(m, _render_sparse(flat, s, te - ts), cfg.lam)
                    grad += _grad_sparse(loss_coefficients(m, cfg.lam), s, n_vox)
                flat -= cfg.learning_rate * grad
                if callback is not None:
                    callback(p, vi, ci, loss)
            log.debug("pass %d view %d done", p, vi)
        log.info("pass %d/%d complete", p + 1, cfg.passes)
    field.set_flat(flat)
    return field


# -- export --------------------------------------------------------------------

def assign_labels(mask: MaskField, points: np.ndarray, threshold: float) -> np.ndarray:
    """Argmax object of clamped scores per point, or -1 below ``threshold`` / outside bounds."""
    scores = mask.sample(points, clamp=True)
    best = np.argmax(scores, axis=0)
    top = scores[best, np.arange(scores.shape[1])]
    inside = mask.bounds.contains(points)
    return np.where((top >= threshold) & inside, best, -1).astype(np.int32)


def export_instances(mask: MaskField, cloud: LabeledPointCloud, threshold: float = 0.5) -> LabeledPointCloud:
    """Label every cloud point with its winning object and recolor by id."""
    if len(cloud) == 0:
        raise ValueError("cannot export onto an empty cloud")
    ids = assign_labels(mask, cloud.points, threshold)
    colors = np.where(ids[:, None] >= 0, PALETTE[np.maximum(ids, 0) % len(PALETTE)], UNLABELED_COLOR)
    return LabeledPointCloud(cloud.points.copy(), colors, ids, cloud.colors)


def occupancy(mask: MaskField, threshold: float = 0.5) -> np.ndarray:
    """Per-object boolean node grids using the same rule as :func:`export_instances`."""
    clamped = np.clip(mask.scores, 0.0, 1.0)
    best = np.argmax(clamped, axis=0)
    top = np.take_along_axis(clamped, best[None], axis=0)[0]
    return np.stack([(best == i) & (top >= threshold) for i in range(mask.n_objects)])

import numpy as np
import pytest

from masklift.geometry import Aabb, LabeledPointCloud, Ray, Rays
from masklift.lifting import (DensityField, LiftingConfig, MaskField, assign_labels, compute_ray_weights,
                              export_instances, lift_masks, projection_loss, projection_loss_and_grad, render_mask,
                              render_rays, sample_density, trilinear_corners, weights_from_sigma)
from masklift.synth import make_blob_scene, scene_views

BOX = Aabb([-1, -1, -1], [1, 1, 1])


def random_rays(rng, n):
    o = rng.uniform(-1, 1, (n, 3))
    o /= np.linalg.norm(o, axis=1, keepdims=True)
    o *= 3.0
    target = rng.uniform(-0.5, 0.5, (n, 3))
    d = target - o
    return Rays(o, d / np.linalg.norm(d, axis=1, keepdims=True))


def test_weights_match_loop():
    sigma = np.array([0.0, 1.0, 3.0, 0.5])
    w = weights_from_sigma(sigma, 0.2)
    trans, ref = 1.0, []
    for s in sigma:
        ref.append(trans * (1 - np.exp(-s * 0.2)))
        trans *= np.exp(-s * 0.2)
    np.testing.assert_allclose(w, ref, rtol=1e-14)


def test_constant_density_opacity_is_exact():
    field = DensityField(BOX, np.full((4, 4, 4), 2.0))
    ray = Ray([0, 0, -3.0], [0, 0, 1.0])
    s = compute_ray_weights(field, ray, 2.0, 4.0, 64)
    assert s.weights.sum() == pytest.approx(1 - np.exp(-4.0), rel=1e-12)
    np.testing.assert_allclose(s.t_values[:2], [2.0 + 1 / 64, 2.0 + 3 / 64])


def test_quadrature_converges_to_refined(rng):
    sigma = rng.uniform(0, 3, (6, 6, 6))
    field = DensityField(BOX, sigma)
    ray = Ray([-3, 0.1, 0.2], np.array([1.0, 0.05, -0.02]) / np.linalg.norm([1.0, 0.05, -0.02]))
    coarse = compute_ray_weights(field, ray, 1.5, 4.5, 256).weights.sum()
    fine = compute_ray_weights(field, ray, 1.5, 4.5, 16384).weights.sum()
    assert abs(coarse - fine) < 1e-3
    assert 0 <= fine <= 1


def test_missed_ray_has_no_samples():
    field = DensityField(BOX, np.ones((3, 3, 3)))
    s = compute_ray_weights(field, Ray([5, 5, 5], [0, 0, 1.0]), 0.1, 2.0, 8)
    assert len(s) == 0
    mask = MaskField.zeros(2, field)
    np.testing.assert_array_equal(render_mask(mask, Ray([5, 5, 5], [0, 0, 1.0]), s), [0, 0])


def test_trilinear_reproduces_linear_functions(rng):
    dims = (5, 6, 7)
    axes = [np.linspace(-1, 1, n) for n in dims]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    field = DensityField(BOX, 2 + 0.3 * X - 0.2 * Y + 0.5 * Z)
    pts = rng.uniform(-1, 1, (200, 3))
    np.testing.assert_allclose(sample_density(field, pts), 2 + pts @ [0.3, -0.2, 0.5], atol=1e-12)
    idx, wts = trilinear_corners(BOX, dims, pts)
    np.testing.assert_allclose((field.flat()[idx] * wts).sum(1), sample_density(field, pts), atol=1e-12)
    assert sample_density(field, [[1.5, 0, 0]])[0] == 0.0


def test_flat_roundtrip(rng):
    m = MaskField(BOX, rng.normal(size=(2, 3, 4, 5)))
    flat = m.flat().copy()
    assert flat[0, 1] == m.scores[0, 1, 0, 0] and flat[0, 3] == m.scores[0, 0, 1, 0]
    m2 = MaskField.zeros(2, DensityField(BOX, np.zeros((3, 4, 5))))
    m2.set_flat(flat)
    np.testing.assert_array_equal(m2.scores, m.scores)


def test_render_rays_matches_per_ray(rng):
    field = DensityField(BOX, rng.uniform(0, 2, (6, 6, 6)))
    mask = MaskField(BOX, rng.normal(size=(2, 6, 6, 6)))
    rays = random_rays(rng, 12)
    batch = render_rays(mask, field, rays, 32)
    t0, t1, _ = BOX.intersect_rays(rays.origins, rays.directions)
    for i, ray in enumerate(rays):
        s = compute_ray_weights(field, ray, t0[i], t1[i], 32)
        np.testing.assert_allclose(batch[:, i], render_mask(mask, ray, s), atol=1e-12)


def test_gradient_matches_finite_differences(rng):
    field = DensityField(BOX, rng.uniform(0, 2, (6, 6, 6)))
    mask = MaskField(BOX, rng.normal(size=(2, 6, 6, 6)))
    rays = random_rays(rng, 8)
    m_ext = rng.uniform(0, 1, (2, 8))
    _, grad = projection_loss_and_grad(mask, field, rays, m_ext, 0.7, 24)
    h = 1e-4
    for flat_i in rng.choice(mask.scores.size, 40, replace=False):
        idx = np.unravel_index(flat_i, mask.scores.shape)
        up = MaskField(BOX, mask.scores.copy())
        dn = MaskField(BOX, mask.scores.copy())
        up.scores[idx] += h
        dn.scores[idx] -= h
        lu = projection_loss(m_ext, render_rays(up, field, rays, 24), 0.7)
        ld = projection_loss(m_ext, render_rays(dn, field, rays, 24), 0.7)
        assert abs((lu - ld) / (2 * h) - grad[idx]) < 1e-8 * max(1.0, abs(grad[idx]))


def test_loss_validation():
    with pytest.raises(ValueError):
        projection_loss(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)
    assert projection_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.25]]), 2.0) == pytest.approx(-0.5 + 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        LiftingConfig(learning_rate=0)
    with pytest.raises(ValueError):
        LiftingConfig(export_threshold=1.0)
    with pytest.raises(ValueError):
        LiftingConfig(chunk_rays=0)


@pytest.fixture(scope="module")
def small_scene():
    return make_blob_scene(n_objects=2, dims=(24, 24, 24), n_views=12, seed=3, image_size=48)


def test_lift_decreases_loss_and_labels_blobs(small_scene):
    losses = []
    cfg = LiftingConfig(passes=3, chunk_rays=1024)
    field = lift_masks(small_scene.density, scene_views(small_scene), small_scene.intrinsics, cfg,
                       callback=lambda p, v, c, loss: losses.append((p, v, loss)))
    first = sum(l for p, v, l in losses if p == 0)
    second = sum(l for p, v, l in losses if p == 2)
    assert second < first
    inside = assign_labels(field, small_scene.centers + 0.0, 0.5)
    # Blob centers are deep inside opaque blobs; only a label or -1 is possible, never the wrong one.
    assert all(i in (-1, k) for k, i in enumerate(inside))
    # A short run labels only part of the surface, but never with the wrong object.
    out = export_instances(field, small_scene.cloud)
    labeled = out.instance_ids >= 0
    assert labeled.mean() > 0.3
    np.testing.assert_array_equal(out.instance_ids[labeled], small_scene.cloud.instance_ids[labeled])
    np.testing.assert_array_equal(out.original_colors, small_scene.cloud.colors)


def test_lift_rejects_bad_views(small_scene):
    views = scene_views(small_scene)
    views[1].masks = views[1].masks[:, :-1]
    with pytest.raises(ValueError):
        lift_masks(small_scene.density, views, small_scene.intrinsics)


def test_export_outside_bounds_is_unlabeled():
    field = MaskField(BOX, np.ones((1, 3, 3, 3)))
    ids = assign_labels(field, np.array([[0, 0, 0], [2, 0, 0]]), 0.5)
    assert ids.tolist() == [0, -1]
    with pytest.raises(ValueError):
        export_instances(field, LabeledPointCloud(np.zeros((0, 3))))

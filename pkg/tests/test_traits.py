import logging

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from masklift.geometry import LabeledPointCloud, TriMesh
from masklift.meshing import MeshingConfig
from masklift.synth import make_ribbon_leaf
from masklift.traits import (TraitConfig, TraitReport, arap_parameterize, classify_organ, extract_traits,
                             instance_volume, leaf_length, leaf_width, read_trait_csv, surface_area, width_from_uv,
                             write_trait_csv)

ROT37 = Rotation.from_rotvec(np.radians(37) * np.array([1.0, 2.0, 0.5]) / np.linalg.norm([1.0, 2.0, 0.5]))


def unit_cube_mesh():
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    f = [[0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6], [0, 1, 4], [1, 5, 4],
         [2, 6, 3], [3, 6, 7], [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5]]
    return TriMesh(v, f)


def solid_cube(spacing=0.005):
    g = spacing / 2 + np.arange(int(round(1 / spacing))) * spacing
    return LabeledPointCloud(np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3))


def grid_mesh(nx=6, ny=4, dx=0.5):
    g = np.array([[i * dx, j * dx, 0.0] for i in range(nx) for j in range(ny)])
    ij = np.arange(nx * ny).reshape(nx, ny)
    a, b, c, d = ij[:-1, :-1].ravel(), ij[1:, :-1].ravel(), ij[1:, 1:].ravel(), ij[:-1, 1:].ravel()
    return TriMesh(g, np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)]))


# -- volume and area -------------------------------------------------------------

def test_volume_arithmetic():
    idx = np.arange(100000)
    pts = np.stack([idx % 100, (idx // 100) % 100, idx // 10000], 1) * 0.01 + 0.005
    assert instance_volume(LabeledPointCloud(pts), 0.01) == pytest.approx(0.1, rel=1e-12)
    assert instance_volume(LabeledPointCloud(np.zeros((1, 3))), 0.01) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        instance_volume(LabeledPointCloud(np.zeros((0, 3))))


def test_volume_monotone_in_voxel_count():
    pts = np.arange(50)[:, None] * np.array([[0.02, 0, 0]])
    vols = [instance_volume(LabeledPointCloud(pts[:n]), 0.01) for n in range(1, 50)]
    assert np.all(np.diff(vols) > 0)


def test_solid_cube_volume():
    assert abs(instance_volume(solid_cube(), 0.01) - 1.0) <= 0.03


def test_area_exact_cases():
    tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert surface_area(tri) == 0.5
    assert surface_area(unit_cube_mesh()) == 6.0
    assert surface_area(TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))) == 0.0


def test_area_rigid_invariance():
    m = unit_cube_mesh()
    moved = m.transformed(ROT37.as_matrix(), [3.0, -1.0, 2.0])
    assert surface_area(moved) == pytest.approx(6.0, rel=1e-14)


# -- leaf length -----------------------------------------------------------------

def test_collinear_length_exact():
    d = 0.1
    pts = np.column_stack([np.arange(101) * d, np.zeros(101), np.zeros(101)])
    length, trace = leaf_length(pts)
    assert length == pytest.approx(100 * d, rel=1e-12)
    np.testing.assert_array_equal(trace.base_points[0], trace.e_s)
    assert np.all(np.linalg.norm(np.diff(trace.base_points, axis=0), axis=1) > 0)


def test_quarter_arc_length():
    th = np.linspace(0, np.pi / 2, 500)
    arc = np.column_stack([10 * np.cos(th), 10 * np.sin(th), np.zeros_like(th)])
    length, _ = leaf_length(arc, epsilon=0.05)
    assert abs(length / (5 * np.pi) - 1) < 0.05


def test_length_errors():
    with pytest.raises(ValueError):
        leaf_length(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        leaf_length(np.zeros((20, 3)))


def test_length_invariant_to_rigid_motion_and_order():
    leaf = make_ribbon_leaf(seed=1)
    base, _ = leaf_length(leaf.cloud)
    moved = ROT37.apply(leaf.cloud.points) + [1.0, 2.0, 3.0]
    assert leaf_length(moved)[0] == pytest.approx(base, rel=1e-9)
    perm = np.random.default_rng(2).permutation(len(moved))
    assert leaf_length(moved[perm])[0] == pytest.approx(base, rel=1e-9)
    assert base == pytest.approx(10.0, rel=1e-9)


def test_principal_axis_sign_points_along_extent():
    pts = np.column_stack([-np.arange(30.0), np.zeros(30), np.zeros(30)])
    _, trace = leaf_length(pts)
    assert trace.principal_axis[0] > 0
    assert trace.e_s[0] == -29.0 and trace.e_t[0] == 0.0


# -- ARAP and width --------------------------------------------------------------

def rigid_residual(uv, xy):
    """Residual of the best 2D rigid fit of ``uv`` onto ``xy`` (reflection allowed)."""
    a, b = uv - uv.mean(0), xy - xy.mean(0)
    u, _, vt = np.linalg.svd(a.T @ b)
    return np.abs(a @ (u @ vt) - b).max()


def test_planar_mesh_is_its_own_flattening():
    m = grid_mesh()
    p = arap_parameterize(m)
    assert p.arap_energy <= 1e-6
    assert rigid_residual(p.uv, m.vertices[:, :2]) < 1e-3
    assert np.all(np.diff(p.energy_history) <= 0)


def test_half_cylinder_unrolls():
    leaf = make_ribbon_leaf(length=10, width=4, bend_radius=4 / np.pi, spacing=0.1)
    m = leaf.mesh
    p = arap_parameterize(m)
    area = surface_area(m)
    assert p.arap_energy <= 1e-4 * area
    f = m.faces
    a3 = 0.5 * np.linalg.norm(np.cross(m.vertices[f[:, 1]] - m.vertices[f[:, 0]],
                                       m.vertices[f[:, 2]] - m.vertices[f[:, 0]]), axis=1)
    uv = p.uv
    e1, e2 = uv[f[:, 1]] - uv[f[:, 0]], uv[f[:, 2]] - uv[f[:, 0]]
    a2 = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    assert np.max(np.abs(a2 / a3 - 1)) <= 0.01
    assert abs(width_from_uv(uv) / 4 - 1) < 0.03


@pytest.mark.parametrize("rotate", [False, True])
def test_ribbon_width(rotate):
    m = make_ribbon_leaf().mesh
    if rotate:
        m = m.transformed(ROT37.as_matrix(), [0.3, 0.0, -2.0])
    assert abs(leaf_width(m) / 2 - 1) < 0.02


def test_width_rigid_invariance():
    m = make_ribbon_leaf(bend_radius=3.0, spacing=0.1).mesh
    w0 = leaf_width(m)
    w1 = leaf_width(m.transformed(ROT37.as_matrix(), [5, 5, 5]))
    assert abs(w1 / w0 - 1) < 0.01


def test_arap_rejects_non_disks():
    # An annulus has two boundary loops.
    n = 16
    ang = np.arange(n) * 2 * np.pi / n
    v = np.concatenate([np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n)]),
                        np.column_stack([2 * np.cos(ang), 2 * np.sin(ang), np.zeros(n)])])
    f = [[i, (i + 1) % n, n + i] for i in range(n)] + [[(i + 1) % n, n + (i + 1) % n, n + i] for i in range(n)]
    with pytest.raises(ValueError, match="boundary loop"):
        arap_parameterize(TriMesh(v, f))
    flat = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]], [[0, 1, 2]])
    with pytest.raises(ValueError, match="degenerate"):
        arap_parameterize(flat)


def test_collinear_uv_width_zero(caplog):
    with caplog.at_level(logging.WARNING):
        assert width_from_uv(np.column_stack([np.arange(5.0), np.zeros(5)])) == 0.0
    assert "degenerate" in caplog.text


# -- reports ---------------------------------------------------------------------

def test_report_calibration_and_csv(tmp_path):
    r = TraitReport(3, "leaf", 0.5, 2.0, 4.0, 1.0, scale_cm_per_unit=2.0,
                    config={"alpha": 0.03, "loop_iterations": 2, "k": 8, "n": 100})
    assert (r.volume_cm3, r.area_cm2, r.length_cm, r.width_cm) == (4.0, 8.0, 8.0, 2.0)
    blank = TraitReport(4, "panicle", 0.1, None, 1.0, None)
    write_trait_csv(tmp_path / "t.csv", [r, blank])
    rows = read_trait_csv(tmp_path / "t.csv")
    assert list(rows[0]) == ["instance_id", "class", "volume_cm3", "area_cm2", "length_cm", "width_cm",
                             "alpha", "loop_iterations", "k", "n", "scale_cm_per_unit"]
    assert float(rows[0]["area_cm2"]) == 8.0 and rows[1]["width_cm"] == ""
    with pytest.raises(ValueError):
        TraitReport(0, "leaf", -1.0, 0.0, 0.0, 0.0)


def test_extract_traits_on_ribbon():
    leaf = make_ribbon_leaf()
    r = extract_traits(0, leaf.cloud, MeshingConfig(alpha=0.15, outlier_sigma=5.0), TraitConfig())
    assert r.organ_class == "leaf"
    assert abs(r.length / 10 - 1) < 0.05
    assert abs(r.width / 2 - 1) < 0.02
    assert abs(r.area / 20 - 1) < 0.02
    assert classify_organ(np.random.default_rng(0).normal(size=(500, 3))) == "panicle"


def test_default_outlier_filter_erodes_clean_sheet_edges():
    # The 2-sigma rule strips the boundary rows of a noise-free sheet (one spacing per side).
    leaf = make_ribbon_leaf()
    r = extract_traits(0, leaf.cloud, MeshingConfig(alpha=0.15), TraitConfig())
    assert r.width == pytest.approx(2.0 - 2 * 0.05, abs=0.01)

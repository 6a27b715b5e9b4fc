"""Readers and writers for the pipeline's on-disk formats."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .geometry import Aabb, CameraIntrinsics, CameraPose, LabeledPointCloud, TriMesh

DENSITY_MAGIC = b"DGRD"
MASKFIELD_MAGIC = b"MFLD"
MASK_NAME = re.compile(r"frame_(\d{5})_obj_(\d{2})\.png$")


# -- point clouds ------------------------------------------------------------

def write_cloud_ply(path, cloud: LabeledPointCloud) -> None:
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if cloud.instance_ids is not None:
        fields += [("instance_id", "<i4")]
    if cloud.original_colors is not None:
        fields += [("orig_red", "u1"), ("orig_green", "u1"), ("orig_blue", "u1")]
    data = np.empty(n, dtype=fields)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.colors is not None:
        data["red"], data["green"], data["blue"] = cloud.colors.T
    if cloud.instance_ids is not None:
        data["instance_id"] = cloud.instance_ids
    if cloud.original_colors is not None:
        data["orig_red"], data["orig_green"], data["orig_blue"] = cloud.original_colors.T
    PlyData([PlyElement.describe(data, "vertex")], text=False, byte_order="<").write(str(path))


def read_cloud_ply(path) -> LabeledPointCloud:
    """Read ASCII or binary PLY with x,y,z and optional colors / instance_id."""
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    names = v.dtype.names
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)

    def triple(a, b, c):
        if all(k in names for k in (a, b, c)):
            return np.stack([v[a], v[b], v[c]], axis=1).astype(np.uint8)
        return None

    ids = v["instance_id"].astype(np.int32) if "instance_id" in names else None
    return LabeledPointCloud(
        pts,
        triple("red", "green", "blue"),
        ids,
        triple("orig_red", "orig_green", "orig_blue"),
    )


# -- meshes ------------------------------------------------------------------

def write_mesh_ply(path, mesh: TriMesh) -> None:
    # Vertices stored as doubles so a read-back is bit-exact.
    verts = np.empty(mesh.n_vertices, dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8")])
    verts["x"], verts["y"], verts["z"] = mesh.vertices.T
    faces = np.empty(mesh.n_faces, dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(verts, "vertex"),
         PlyElement.describe(faces, "face", len_types={"vertex_indices": "u1"})],
        text=False, byte_order="<",
    ).write(str(path))


def read_mesh_ply(path) -> TriMesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if "face" in ply and len(ply["face"].data):
        faces = np.vstack(ply["face"].data["vertex_indices"]).astype(np.int64)
    else:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriMesh(verts, faces)


# -- poses -------------------------------------------------------------------

def read_poses_json(path) -> tuple[list[str], list[CameraPose], CameraIntrinsics]:
    doc = json.loads(Path(path).read_text())
    try:
        intr = doc["intrinsics"]
        intrinsics = CameraIntrinsics(
            float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
            int(intr["width"]), int(intr["height"]),
        )
        frames = doc["frames"]
        files = [str(f["file"]) for f in frames]
        poses = []
        for f in frames:
            t = [float(x) for x in f["transform"]]
            if len(t) != 16:
                raise ValueError("transform must hold 16 numbers")
            poses.append(CameraPose(np.array(t).reshape(4, 4)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed pose file {path}: {exc}") from exc
    return files, poses, intrinsics


def write_poses_json(path, files, poses, intrinsics: CameraIntrinsics) -> None:
    doc = {
        "intrinsics": intrinsics.to_dict(),
        "frames": [
            {"file": f, "transform": [float(x) for x in p.world_from_camera.ravel()]}
            for f, p in zip(files, poses)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


# -- voxel grids -------------------------------------------------------------

def _write_grid(fh, dims, bounds: Aabb, grids) -> None:
    fh.write(struct.pack("<3I", *dims))
    fh.write(struct.pack("<6f", *bounds.min, *bounds.max))
    for g in grids:
        fh.write(np.asarray(g, dtype="<f4").ravel(order="F").tobytes())


def _read_grid(buf: bytes, offset: int, n_grids: int):
    dims = struct.unpack_from("<3I", buf, offset)
    offset += 12
    b = struct.unpack_from("<6f", buf, offset)
    offset += 24
    count = dims[0] * dims[1] * dims[2]
    expected = offset + 4 * count * n_grids
    if len(buf) != expected:
        raise ValueError(f"grid file has {len(buf)} bytes, expected {expected}")
    flat = np.frombuffer(buf, dtype="<f4", count=count * n_grids, offset=offset).astype(np.float64)
    grids = [flat[i * count:(i + 1) * count].reshape(dims, order="F") for i in range(n_grids)]
    return tuple(int(d) for d in dims), Aabb(np.array(b[:3]), np.array(b[3:])), grids


def write_density_grid(path, field) -> None:
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        _write_grid(fh, field.dims, field.bounds, [field.sigma])


def read_density_grid(path):
    from .lifting import DensityField

    buf = Path(path).read_bytes()
    if buf[:4] != DENSITY_MAGIC:
        raise ValueError(f"{path}: not a density grid (bad magic)")
    dims, bounds, (sigma,) = _read_grid(buf, 4, 1)
    return DensityField(bounds, sigma)


def write_mask_field(path, field) -> None:
    with open(path, "wb") as fh:
        fh.write(MASKFIELD_MAGIC)
        fh.write(struct.pack("<I", field.n_objects))
        _write_grid(fh, field.dims, field.bounds, field.scores)


def read_mask_field(path):
    from .lifting import MaskField

    buf = Path(path).read_bytes()
    if buf[:4] != MASKFIELD_MAGIC:
        raise ValueError(f"{path}: not a mask field checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 4)
    dims, bounds, grids = _read_grid(buf, 8, n)
    return MaskField(bounds, np.stack(grids))


# -- images ------------------------------------------------------------------

def mask_filename(frame: int, obj: int) -> str:
    return f"frame_{frame:05d}_obj_{obj:02d}.png"


def write_mask_png(path, mask: np.ndarray) -> None:
    """Write a [0, 1] mask as 8-bit grayscale (value * 255, rounded)."""
    m = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(m * 255).astype(np.uint8), mode="L").save(path)


def read_gray_png(path) -> np.ndarray:
    """8-bit image as float array in 0..255; RGB is reduced with Rec.601 luma."""
    img = Image.open(path)
    a = np.asarray(img)
    if a.ndim == 3:
        rgb = a[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    return a.astype(np.float64)


def read_mask_dir(directory, n_frames: int | None = None) -> dict[int, dict[int, np.ndarray]]:
    """Collect ``frame_XXXXX_obj_YY.png`` files as ``{frame: {obj: mask in [0, 1]}}``."""
    out: dict[int, dict[int, np.ndarray]] = {}
    for p in sorted(Path(directory).iterdir()):
        m = MASK_NAME.search(p.name)
        if not m:
            continue
        frame, obj = int(m.group(1)), int(m.group(2))
        if n_frames is not None and frame >= n_frames:
            continue
        out.setdefault(frame, {})[obj] = read_gray_png(p) / 255.0
    return out

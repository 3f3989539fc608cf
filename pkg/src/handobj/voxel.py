"""Depth maps, the voxel domain, 3-D keypoint heatmaps, and their files.

Conventions used throughout:

* Camera space is millimeters, +z away from the camera, pinhole intrinsics
  (fx, fy, cx, cy) in pixels.
* The interaction cube is axis-aligned, 200 mm per side by default, and
  everything voxel-shaped lives on a cubic grid of resolution R: the depth
  occupancy V_D at R=88, heatmaps and shape grids at R=44.
* Voxel i covers [i*pitch, (i+1)*pitch) along each axis measured from the
  cube's low corner; its center is at (i + 0.5) * pitch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ParseError
from .mesh import sample_surface

DEFAULT_SIDE_MM = 200.0
DEPTH_RESOLUTION = 88
SHAPE_RESOLUTION = 44
N_HAND_JOINTS = 21
N_OBJECT_CORNERS = 8
N_KEYPOINTS = N_HAND_JOINTS + N_OBJECT_CORNERS
DEFAULT_HEATMAP_SIGMA = 1.7  # in voxels


@dataclass
class DepthFrame:
    """A single depth image with intrinsics and the interaction cube center."""

    depth: np.ndarray  # (H, W) millimeters, 0 marks invalid pixels
    fx: float
    fy: float
    cx: float
    cy: float
    cube_center: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if min(self.fx, self.fy) <= 0:
            raise ContractViolation("intrinsics must be positive")
        if self.cube_center is not None:
            self.cube_center = np.asarray(self.cube_center, dtype=np.float64).reshape(3)

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]


@dataclass
class VoxelGrid:
    values: np.ndarray  # (R, R, R), axis order (x, y, z)
    center: np.ndarray
    side: float = DEFAULT_SIDE_MM

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def pitch(self):
        return self.side / self.resolution


@dataclass
class PoseSet:
    joints: np.ndarray  # (21, 3) millimeters
    corners: np.ndarray  # (8, 3) millimeters

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.corners = np.asarray(self.corners, dtype=np.float64)
        if self.joints.shape != (N_HAND_JOINTS, 3):
            raise ContractViolation(f"expected {N_HAND_JOINTS} joints, got {self.joints.shape}")
        if self.corners.shape != (N_OBJECT_CORNERS, 3):
            raise ContractViolation(f"expected {N_OBJECT_CORNERS} corners, got {self.corners.shape}")

    def stacked(self):
        return np.concatenate([self.joints, self.corners], axis=0)

    @staticmethod
    def from_stacked(arr):
        arr = np.asarray(arr).reshape(N_KEYPOINTS, 3)
        return PoseSet(arr[:N_HAND_JOINTS], arr[N_HAND_JOINTS:])


def depth_to_points(frame):
    """Back-project valid depth pixels to camera-space points (K, 3)."""
    valid = frame.depth > 0
    v, u = np.nonzero(valid)
    z = frame.depth[v, u]
    x = (u - frame.cx) * z / frame.fx
    y = (v - frame.cy) * z / frame.fy
    return np.stack([x, y, z], axis=1)


def voxel_centers(resolution, center, side=DEFAULT_SIDE_MM):
    """Per-axis voxel center coordinates, shape (R,) for each axis."""
    pitch = side / resolution
    base = (np.arange(resolution) + 0.5) * pitch - side / 2.0
    return base[None, :] + np.asarray(center).reshape(3, 1)


def points_to_indices(points, center, side, resolution):
    rel = points - np.asarray(center) + side / 2.0
    # Multiply before dividing: side/resolution is usually inexact and a
    # point exactly on a voxel boundary must land in the upper voxel.
    return np.floor(rel * (resolution / side)).astype(np.int64)


def voxelize(points, center, side=DEFAULT_SIDE_MM, resolution=DEPTH_RESOLUTION):
    """Binary occupancy of the cube: 1 where any point falls in the voxel."""
    if resolution < 2:
        raise ContractViolation("resolution must be >= 2")
    grid = np.zeros((resolution,) * 3, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        idx = points_to_indices(pts, center, side, resolution)
        keep = ((idx >= 0) & (idx < resolution)).all(axis=1)
        idx = idx[keep]
        grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelGrid(grid, center=center, side=side)


def make_heatmaps(pose, center, side=DEFAULT_SIDE_MM, resolution=SHAPE_RESOLUTION,
                  sigma=DEFAULT_HEATMAP_SIGMA):
    """One Gaussian heatmap per keypoint (21 hand joints then 8 corners).

    The Gaussian is centered on the keypoint's continuous position and
    rescaled so the voxel center nearest the keypoint reads exactly 1.
    Keypoints outside the cube produce an all-zero map and a False entry in
    the validity mask.
    """
    if sigma <= 0:
        raise ContractViolation("sigma must be positive")
    pts = pose.stacked()
    pitch = side / resolution
    axes = voxel_centers(resolution, center, side)
    maps = np.zeros((N_KEYPOINTS, resolution, resolution, resolution))
    valid = np.ones(N_KEYPOINTS, dtype=bool)
    half = side / 2.0
    lo = np.asarray(center) - half
    hi = np.asarray(center) + half
    denom = 2.0 * (sigma * pitch) ** 2
    for k, p in enumerate(pts):
        if (p < lo).any() or (p >= hi).any():
            valid[k] = False
            continue
        dx2 = (axes[0] - p[0]) ** 2
        dy2 = (axes[1] - p[1]) ** 2
        dz2 = (axes[2] - p[2]) ** 2
        g = np.exp(-(dx2[:, None, None] + dy2[None, :, None] + dz2[None, None, :]) / denom)
        maps[k] = g / g.max()
    return maps, valid


def extract_pose(heatmaps, center, side=DEFAULT_SIDE_MM, top_k=9):
    """Decode keypoints by soft-argmax over each map's top_k voxels.

    Returns (PoseSet, missing) where missing marks all-zero maps; their
    rows are NaN.
    """
    heatmaps = np.asarray(heatmaps)
    if heatmaps.shape[0] != N_KEYPOINTS:
        raise ContractViolation(f"expected {N_KEYPOINTS} heatmaps, got {heatmaps.shape}")
    resolution = heatmaps.shape[1]
    axes = voxel_centers(resolution, center, side)
    out = np.full((N_KEYPOINTS, 3), np.nan)
    missing = np.zeros(N_KEYPOINTS, dtype=bool)
    for k in range(N_KEYPOINTS):
        flat = heatmaps[k].reshape(-1)
        if flat.max() <= 0:
            missing[k] = True
            continue
        sel = np.argpartition(flat, -top_k)[-top_k:]
        w = flat[sel]
        ix, iy, iz = np.unravel_index(sel, heatmaps[k].shape)
        pos = np.stack([axes[0][ix], axes[1][iy], axes[2][iz]], axis=1)
        out[k] = (w[:, None] * pos).sum(axis=0) / w.sum()
    return PoseSet.from_stacked(out), missing


def voxelize_shape(mesh, center, side=DEFAULT_SIDE_MM, resolution=SHAPE_RESOLUTION,
                   samples=20000, seed=0):
    """Soft surface occupancy in [0, 1] from trilinearly splatted samples.

    Covers the full surface, not just depth-visible parts. Returns the grid
    and a flag that is False when the mesh missed the cube entirely.
    """
    pts = sample_surface(mesh, samples, rng=seed).points
    grid = np.zeros((resolution,) * 3)
    pitch = side / resolution
    rel = (pts - np.asarray(center) + side / 2.0) / pitch - 0.5
    base = np.floor(rel).astype(np.int64)
    frac = rel - base
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        keep = ((idx >= 0) & (idx < resolution)).all(axis=1) & (w > 0)
        if keep.any():
            np.add.at(grid, (idx[keep, 0], idx[keep, 1], idx[keep, 2]), w[keep])
    hit = grid.max() > 0
    np.clip(grid, 0.0, 1.0, out=grid)
    return VoxelGrid(grid, center=center, side=side), hit


def estimate_cube_center(frame):
    """Centroid of the valid depth points; the inference-time cube center."""
    pts = depth_to_points(frame)
    if len(pts) == 0:
        raise ContractViolation("no valid depth pixels to center the cube on")
    return pts.mean(axis=0)


# --------------------------------------------------------------------------
# File formats.

GRID_MAGIC = b"VOXGRID1"


def save_voxel_grid(path, grid):
    """magic, uint32 R, f64 side, 3 x f64 center, then R^3 little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", grid.resolution))
        fh.write(struct.pack("<d", float(grid.side)))
        fh.write(struct.pack("<3d", *grid.center))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def load_voxel_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != GRID_MAGIC:
        raise ParseError(f"{path}: not a voxel grid file")
    (res,) = struct.unpack_from("<I", raw, 8)
    (side,) = struct.unpack_from("<d", raw, 12)
    center = struct.unpack_from("<3d", raw, 20)
    values = np.frombuffer(raw, dtype="<f4", count=res**3, offset=44)
    return VoxelGrid(values.reshape(res, res, res).astype(np.float64), center=center, side=side)


def save_depth_pgm(path, depth_mm):
    """16-bit binary PGM; values are millimeters, big-endian per the format."""
    depth = np.asarray(depth_mm)
    clipped = np.clip(np.round(depth), 0, 65535).astype(">u2")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(clipped.tobytes())


def load_depth_image(path):
    """Read a 16-bit PGM (or PNG via Pillow) as a millimeter depth array."""
    path = str(path)
    if path.endswith(".png"):
        from PIL import Image

        img = np.asarray(Image.open(path))
        return img.astype(np.float64)
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: expected binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64)


_META_KEYS = {"fx", "fy", "cx", "cy", "cube_center", "hand_mesh", "object_mesh", "pose",
              "object_id"}


def save_meta(path, fx, fy, cx, cy, cube_center=None, **extra):
    unknown = set(extra) - _META_KEYS
    if unknown:
        raise ContractViolation(f"unknown metadata keys: {sorted(unknown)}")
    with open(path, "w") as fh:
        fh.write(f"fx={fx}\nfy={fy}\ncx={cx}\ncy={cy}\n")
        if cube_center is not None:
            cc = np.asarray(cube_center, dtype=np.float64)
            fh.write(f"cube_center={cc[0]},{cc[1]},{cc[2]}\n")
        for key, value in extra.items():
            if value is not None:
                fh.write(f"{key}={value}\n")


def load_meta(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value", line=lineno)
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in _META_KEYS:
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}", line=lineno)
            out[key] = value.strip()
    for key in ("fx", "fy", "cx", "cy"):
        if key in out:
            out[key] = float(out[key])
    if "cube_center" in out:
        out["cube_center"] = np.array([float(t) for t in out["cube_center"].split(",")])
    return out


def save_pose(path, pose):
    with open(path, "w") as fh:
        fh.write("# 21 hand joints then 8 object corners, x y z in mm\n")
        for x, y, z in pose.stacked():
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def load_pose(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(t) for t in line.split()])
    arr = np.array(rows)
    if arr.shape != (N_KEYPOINTS, 3):
        raise ParseError(f"{path}: expected {N_KEYPOINTS} rows of x y z, got {arr.shape}")
    return PoseSet.from_stacked(arr)

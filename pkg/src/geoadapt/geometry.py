"""Pinhole camera model, SE(3) transforms, view synthesis, surface normals.

Conventions: camera looks down +Z, u (column) grows right, v (row) grows
down. A transform maps points from the frame it is attached to into the
reference frame: X_ref = R @ X + t.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

Z_EPS = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor):
        """Intrinsics for the image subsampled/resized by ``factor`` (< 1 shrinks)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def to_json(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(obj):
        return Intrinsics(
            float(obj["fx"]),
            float(obj["fy"]),
            float(obj["cx"]),
            float(obj["cy"]),
            int(obj["width"]),
            int(obj["height"]),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @staticmethod
    def load(path):
        with open(path) as fh:
            return Intrinsics.from_json(json.load(fh))


class RigidTransform:
    """SE(3) pose: 3x3 rotation (orthonormal, det +1) plus translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, check=True):
        r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if check:
            if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
                raise ValueError("rotation is not orthonormal")
            if abs(np.linalg.det(r) - 1.0) > 1e-9:
                raise ValueError("rotation determinant is not +1")
        self.rotation = r
        self.translation = t

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3), check=False)

    def compose(self, other):
        """self after other: (self * other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            check=False,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, check=False)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_json(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @staticmethod
    def from_json(obj):
        return RigidTransform(np.array(obj["rotation"]), np.array(obj["translation"]))

    def __repr__(self):
        return f"RigidTransform(t={self.translation})"


def euler6_to_transform(v):
    """[tx,ty,tz,rx,ry,rz] -> RigidTransform with R = Rz @ Ry @ Rx."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    sx, cx = np.sin(v[3]), np.cos(v[3])
    sy, cy = np.sin(v[4]), np.cos(v[4])
    sz, cz = np.sin(v[5]), np.cos(v[5])
    r = np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    )
    return RigidTransform(r, v[:3], check=False)


def unproject(pixel, depth, K):
    """Pixel (u, v) at ``depth`` meters -> 3D point in the camera frame."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    return np.array(
        [depth * (u - K.cx) / K.fx, depth * (v - K.cy) / K.fy, depth], dtype=np.float64
    )


def project(point, K):
    """3D point -> (u, v, z, valid); points with z <= Z_EPS are flagged, not NaN."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= Z_EPS:
        return 0.0, 0.0, float(z), False
    return float(K.fx * x / z + K.cx), float(K.fy * y / z + K.cy), float(z), True


# -- differentiable batch machinery ----------------------------------------


def _pixel_rays(K, h, w, dtype):
    """Constant maps (u-cx)/fx and (v-cy)/fy of shape [1,1,H,W]."""
    us = (np.arange(w, dtype=np.float64) - K.cx) / K.fx
    vs = (np.arange(h, dtype=np.float64) - K.cy) / K.fy
    xn = np.broadcast_to(us[None, :], (h, w)).astype(dtype)
    yn = np.broadcast_to(vs[:, None], (h, w)).astype(dtype)
    return (
        dc.constant(xn[None, None]),
        dc.constant(yn[None, None]),
    )


def _pose_terms(pose, m, dtype):
    """Rotation entries and translation as broadcastable tensors [M,1,1,1].

    ``pose`` is a RigidTransform, a sequence of them, or a Tensor [M,6]
    of (tx,ty,tz,rx,ry,rz) rows; the tensor form is differentiable.
    """
    if isinstance(pose, RigidTransform):
        pose = [pose] * m
    if isinstance(pose, (list, tuple)):
        if len(pose) != m:
            raise ValueError(f"expected {m} poses, got {len(pose)}")
        rot = np.stack([p.rotation for p in pose]).astype(dtype)
        tr = np.stack([p.translation for p in pose]).astype(dtype)
        entries = [[dc.constant(rot[:, i, j].reshape(m, 1, 1, 1)) for j in range(3)] for i in range(3)]
        trans = [dc.constant(tr[:, i].reshape(m, 1, 1, 1)) for i in range(3)]
        return entries, trans
    if pose.shape != (m, 6):
        raise ValueError(f"pose tensor must be [{m},6], got {pose.shape}")
    shp = (m, 1, 1, 1)
    tx = dc.reshape(pose[:, 0], shp)
    ty = dc.reshape(pose[:, 1], shp)
    tz = dc.reshape(pose[:, 2], shp)
    sx, cx = dc.sin(pose[:, 3]), dc.cos(pose[:, 3])
    sy, cy = dc.sin(pose[:, 4]), dc.cos(pose[:, 4])
    sz, cz = dc.sin(pose[:, 5]), dc.cos(pose[:, 5])
    sx, cx, sy, cy, sz, cz = (dc.reshape(t, shp) for t in (sx, cx, sy, cy, sz, cz))
    entries = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
    return entries, [tx, ty, tz]


def warp_grid(depth, pose, K):
    """Reprojection grid for view synthesis.

    For every pixel of the (virtual) target view: unproject with
    ``depth`` [M,1,H,W], transform by ``pose``, and project back. Returns
    (grid Tensor [M,H,W,2], positive-depth mask ndarray [M,1,H,W]).
    """
    m, one, h, w = depth.shape
    dtype = depth.dtype
    xn, yn = _pixel_rays(K, h, w, dtype)
    r, t = _pose_terms(pose, m, dtype)

    px = depth * xn
    py = depth * yn
    qx = r[0][0] * px + r[0][1] * py + r[0][2] * depth + t[0]
    qy = r[1][0] * px + r[1][1] * py + r[1][2] * depth + t[1]
    qz = r[2][0] * px + r[2][1] * py + r[2][2] * depth + t[2]

    zvalid = qz.data > Z_EPS
    zsafe = dc.clamp(qz, lo=Z_EPS)
    u = qx / zsafe * np.asarray(K.fx, dtype) + np.asarray(K.cx, dtype)
    v = qy / zsafe * np.asarray(K.fy, dtype) + np.asarray(K.cy, dtype)
    grid = dc.stack([dc.reshape(u, (m, h, w)), dc.reshape(v, (m, h, w))], axis=-1)
    return grid, zvalid


def warp_image(i_ref, depth, pose, K):
    """Synthesize the target view from ``i_ref`` [M,C,H,W].

    Differentiable with respect to the reference image, the depth map and
    (tensor-valued) pose. Returns (image Tensor [M,C,H,W], valid ndarray
    [M,1,H,W]) where valid requires both in-bounds sampling and positive
    projected depth.
    """
    grid, zvalid = warp_grid(depth, pose, K)
    warped, svalid = dc.grid_sample(i_ref, grid)
    return warped, svalid[:, None] & zvalid


def surface_normals(depth, K):
    """Unit normals from forward differences of unprojected points.

    ``depth`` is [M,1,H,W] (or [H,W]); the normal at (u, v) is the cross
    product (P(u+1,v) - P(u,v)) x (P(u,v+1) - P(u,v)). The last row and
    column replicate their inward neighbor. Returns (normals Tensor
    [M,3,H,W], degenerate mask ndarray [M,1,H,W]): degenerate entries had
    near-zero cross products and should be excluded from losses.
    """
    squeeze = False
    if isinstance(depth, np.ndarray):
        depth = dc.constant(depth)
    if depth.ndim == 2:
        depth = dc.reshape(depth, (1, 1) + depth.shape)
        squeeze = True
    m, one, h, w = depth.shape
    dtype = depth.dtype
    xn, yn = _pixel_rays(K, h, w, dtype)
    px = depth * xn
    py = depth * yn
    pz = depth

    def du(t):
        return t[:, :, : h - 1, 1:] - t[:, :, : h - 1, : w - 1]

    def dv(t):
        return t[:, :, 1:, : w - 1] - t[:, :, : h - 1, : w - 1]

    ax, ay, az = du(px), du(py), du(pz)
    bx, by, bz = dv(px), dv(py), dv(pz)
    nx = ay * bz - az * by
    ny = az * bx - ax * bz
    nz = ax * by - ay * bx

    nsq = nx * nx + ny * ny + nz * nz
    degenerate = nsq.data < 1e-12
    nrm = dc.sqrt(nsq + np.asarray(1e-20, dtype))
    unit = dc.concat([nx / nrm, ny / nrm, nz / nrm], axis=1)

    unit = dc.concat([unit, unit[:, :, :, w - 2 : w - 1]], axis=3)
    unit = dc.concat([unit, unit[:, :, h - 2 : h - 1, :]], axis=2)
    degenerate = np.concatenate([degenerate, degenerate[:, :, :, -1:]], axis=3)
    degenerate = np.concatenate([degenerate, degenerate[:, :, -1:, :]], axis=2)
    if squeeze:
        return dc.reshape(unit, (3, h, w)), degenerate[0, 0]
    return unit, degenerate

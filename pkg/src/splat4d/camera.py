"""Pinhole cameras, per-pixel rays, Plücker ray encoding and splat projection.

Conventions: the camera frame is +x right, +y down, +z forward; pixel
``(u, v)`` has its centre at ``(u + 0.5, v + 0.5)``; poses are stored as
camera-to-world matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import BehindCameraError, FormatError, InvalidInputError

_MIN_DEPTH = 1e-6


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
            raise InvalidInputError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise InvalidInputError("width and height must be positive integers")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise InvalidInputError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_fov(cls, width, height, fov_y_deg=50.0):
        """Square-pixel intrinsics with the principal point at the image centre."""
        f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    c2w: np.ndarray

    def __post_init__(self):
        c2w = np.array(self.c2w, dtype=np.float64).reshape(4, 4)
        if not np.array_equal(c2w[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidInputError("c2w bottom row must be (0, 0, 0, 1)")
        rot = c2w[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("c2w rotation block is not orthonormal")
        c2w.setflags(write=False)
        object.__setattr__(self, "c2w", c2w)

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def center(self):
        return self.c2w[:3, 3]

    def world_to_camera(self):
        """``(R, t)`` with ``x_cam = R @ x_world + t``; uses the transpose, no general inverse."""
        rot = self.rotation.T
        return rot, -rot @ self.center


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "time", float(self.time))

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height

    def at_time(self, time):
        return CameraView(self.intrinsics, self.pose, time)


@dataclass(frozen=True)
class RayMap:
    """Per-pixel world-space ray origins and unit directions, shape ``(H, W, 3)``."""

    origins: np.ndarray
    directions: np.ndarray


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera-to-world pose at ``eye`` looking at ``target`` with world ``up`` mapped to -y."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise InvalidInputError("up vector is parallel to the viewing direction")
    right /= norm
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return CameraPose(c2w)


def compute_ray_map(view: CameraView) -> RayMap:
    intr = view.intrinsics
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ view.pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(view.pose.center, dirs.shape).copy()
    return RayMap(origins, dirs)


def plucker_encode(ray_o, ray_d):
    """``[d, o - <o, d> d]``: direction plus the ray's closest point to the origin."""
    ray_o = np.asarray(ray_o, dtype=np.float64)
    ray_d = np.asarray(ray_d, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(ray_d, axis=-1) - 1.0) > 1e-6):
        raise InvalidInputError("ray directions must be unit length")
    along = np.sum(ray_o * ray_d, axis=-1, keepdims=True)
    return np.concatenate([ray_d, ray_o - along * ray_d], axis=-1)


def projection_jacobian(point_cam, intr: CameraIntrinsics):
    """``d(u, v) / d(x, y, z)`` of the pinhole projection at a camera-frame point."""
    x, y, z = np.asarray(point_cam, dtype=np.float64)
    if not z > _MIN_DEPTH:
        raise BehindCameraError(f"depth {z} is not in front of the camera")
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ]
    )


def project_points(points, view: CameraView):
    """World points ``(..., 3)`` to pixel coordinates ``(..., 2)`` and depths."""
    rot, trans = view.pose.world_to_camera()
    cam = np.asarray(points, dtype=np.float64) @ rot.T + trans
    intr = view.intrinsics
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * cam[..., 0] / z + intr.cx, intr.fy * cam[..., 1] / z + intr.cy], axis=-1)
    return uv, z


@dataclass(frozen=True)
class Splat:
    """Screen-space footprint of a conditional 3D Gaussian."""

    mean_uv: np.ndarray
    cov_uv: np.ndarray
    depth: float


def project_gaussian(cg, view: CameraView):
    """Linearised (EWA) projection of one conditional Gaussian.

    Returns None when the mean is not in front of the camera.
    """
    rot, trans = view.pose.world_to_camera()
    cam = rot @ np.asarray(cg.mean, dtype=np.float64) + trans
    if not cam[2] > _MIN_DEPTH:
        return None
    jac = projection_jacobian(cam, view.intrinsics)
    m = jac @ rot
    cov_uv = m @ np.asarray(cg.cov) @ m.T
    intr = view.intrinsics
    mean_uv = np.array([intr.fx * cam[0] / cam[2] + intr.cx, intr.fy * cam[1] / cam[2] + intr.cy])
    return Splat(mean_uv, 0.5 * (cov_uv + cov_uv.T), float(cam[2]))


def _view_to_dict(view: CameraView):
    intr = view.intrinsics
    return {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
        "c2w": [float(x) for x in view.pose.c2w.reshape(-1)],
        "time": view.time,
    }


def _view_from_dict(entry, index):
    try:
        intr = CameraIntrinsics(
            float(entry["fx"]), float(entry["fy"]), float(entry["cx"]), float(entry["cy"]),
            int(entry["width"]), int(entry["height"]),
        )
        c2w = np.array([float(x) for x in entry["c2w"]], dtype=np.float64)
        if c2w.size != 16:
            raise FormatError(f"camera {index}: c2w must hold 16 numbers")
        return CameraView(intr, CameraPose(c2w.reshape(4, 4)), float(entry.get("time", 0.0)))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"camera {index}: malformed entry ({exc})") from exc


def write_cameras(path, views):
    """Write views as a JSON list; floats use shortest repr so poses round-trip exactly."""
    Path(path).write_text(json.dumps([_view_to_dict(v) for v in views], indent=1))


def read_cameras(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(data, dict) and "cameras" in data:
        data = data["cameras"]
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a list of cameras")
    return [_view_from_dict(entry, i) for i, entry in enumerate(data)]

"""Planar pose algebra, pinhole cameras and pillar lifting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

Z_NEAR = 0.1


def wrap_angle(a):
    """Wrap angles to (-pi, pi]; works on scalars and arrays."""
    if np.ndim(a) == 0:
        w = math.remainder(float(a), 2.0 * math.pi)
        return math.pi if w <= -math.pi else w
    a = np.asarray(a, dtype=np.float64)
    w = np.remainder(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, np.pi, w)


@dataclass(frozen=True)
class SE2Pose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"pose field {name} is not finite")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def __matmul__(self, other: "SE2Pose") -> "SE2Pose":
        return se2_compose(self, other)

    def inverse(self) -> "SE2Pose":
        return se2_invert(self)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        """Map ``(..., 2)`` points from this pose's frame to the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(p)
        out[..., 0] = c * p[..., 0] - s * p[..., 1] + self.x
        out[..., 1] = s * p[..., 0] + c * p[..., 1] + self.y
        return out

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    @classmethod
    def from_array(cls, v) -> "SE2Pose":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def from_matrix(cls, m) -> "SE2Pose":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def se2_compose(a: SE2Pose, b: SE2Pose) -> SE2Pose:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return SE2Pose(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def se2_invert(a: SE2Pose) -> SE2Pose:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return SE2Pose(-c * a.x - s * a.y, s * a.x - c * a.y, -a.yaw)


def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class PinholeCamera:
    """Rectified pinhole camera.

    ``quaternion`` (w, x, y, z) and ``translation`` map vehicle-frame points
    into the camera frame: ``p_cam = R p_vehicle + t``.  The camera looks along
    its +z axis with +x right and +y down in the image.
    """

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"quaternion must be unit-norm (w, x, y, z), got {self.quaternion}")
        object.__setattr__(self, "quaternion", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        rot = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        object.__setattr__(self, "rotation", rot)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + np.asarray(self.translation)

    @classmethod
    def looking(
        cls,
        id: str,
        heading: float,
        fx: float,
        width: int,
        height: int,
        position=(0.0, 0.0, 0.0),
    ) -> "PinholeCamera":
        """Horizontal camera at ``position`` (vehicle frame) facing ``heading``."""
        c, s = math.cos(heading), math.sin(heading)
        # Rows are the camera axes expressed in the vehicle frame (x fwd, y left, z up).
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        q = Rotation.from_matrix(rot).as_quat()
        t = -rot @ np.asarray(position, dtype=np.float64)
        return cls(
            id, fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
            (q[3], q[0], q[1], q[2]), tuple(t),
        )


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[PinholeCamera, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if not cams:
            raise ValueError("a camera rig needs at least one camera")
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate camera ids in rig: {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def slot_order(self) -> list[int]:
        """List positions of the cameras sorted by id."""
        return sorted(range(len(self.cameras)), key=lambda i: self.cameras[i].id)


def se3_matrix(cam: PinholeCamera) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = cam.rotation
    m[:3, 3] = cam.translation
    return m


def lift_pillar(center, z: int, h_min: float, h_max: float) -> np.ndarray:
    """``z`` points above a BEV cell centre, heights evenly spaced with both ends included."""
    if z < 2:
        raise ValueError("a pillar needs at least two points")
    if not h_max > h_min:
        raise ValueError("h_max must exceed h_min")
    heights = np.linspace(h_min, h_max, z)
    pts = np.empty((z, 3))
    pts[:, 0] = center[0]
    pts[:, 1] = center[1]
    pts[:, 2] = heights
    return pts


def project_points(points, cam: PinholeCamera, z_near: float = Z_NEAR):
    """Vectorised projection; returns ``(uv, inside)`` for ``(..., 3)`` points."""
    pc = cam.to_camera(points)
    depth = pc[..., 2]
    front = depth > z_near
    safe = np.where(front, depth, 1.0)
    u = cam.fx * pc[..., 0] / safe + cam.cx
    v = cam.fy * pc[..., 1] / safe + cam.cy
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=-1), inside


def project_point(point, cam: PinholeCamera, z_near: float = Z_NEAR) -> Optional[tuple[float, float]]:
    """Pixel of a vehicle-frame point, or ``None`` outside the frustum."""
    uv, inside = project_points(np.asarray(point, dtype=np.float64)[None], cam, z_near)
    if not inside[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def vehicle_frame_error(pred: SE2Pose, gt: SE2Pose) -> tuple[float, float, float]:
    """``(lateral, longitudinal, angular)`` error in the ground-truth heading frame."""
    c, s = math.cos(gt.yaw), math.sin(gt.yaw)
    dx, dy = pred.x - gt.x, pred.y - gt.y
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return abs(across), abs(along), abs(wrap_angle(pred.yaw - gt.yaw))


def compose_many(poses: Sequence[SE2Pose]) -> SE2Pose:
    out = SE2Pose()
    for p in poses:
        out = out @ p
    return out

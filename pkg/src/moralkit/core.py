"""Shared types and primitive geometry.

Coordinates are ego-centric and right-handed: x forward, y left, z up.
Radial velocities are signed, positive when the target recedes.

Point clouds are plain float64 arrays. A radar cloud has the columns in
:data:`RADAR_COLUMNS`; the velocity-enhanced cloud appends three more
(:data:`ENHANCED_COLUMNS`). A LiDAR cloud is ``x y z intensity``.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DegeneratePoint

RADAR_COLUMNS = ("x", "y", "z", "rcs", "v_rel", "v_abs", "t")
ENHANCED_COLUMNS = RADAR_COLUMNS + ("v_mag", "v_sq", "v_dir")
LIDAR_COLUMNS = ("x", "y", "z", "intensity")

X, Y, Z, RCS, V_REL, V_ABS, T = range(7)
V_MAG, V_SQ, V_DIR = 7, 8, 9

EPS = 1e-6


class ObjectClass(str, Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"


CLASSES = (ObjectClass.CAR, ObjectClass.PEDESTRIAN, ObjectClass.CYCLIST)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


def empty_radar(width=7):
    return np.zeros((0, width))


def empty_lidar():
    return np.zeros((0, 4))


@dataclass(frozen=True)
class EgoPose:
    translation: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def rotation(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"translation": list(self.translation), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["translation"]), d["yaw"])


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # length, width, height
    yaw: float
    cls: ObjectClass = ObjectClass.CAR

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if not all(np.isfinite(center)) or not np.isfinite(self.yaw):
            raise ValueError("box parameters must be finite")
        if min(size) <= 0:
            raise ValueError(f"box size must be strictly positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "cls", ObjectClass(self.cls))

    def bev(self):
        """``(x, y, l, w, yaw)`` row used by the IoU kernel."""
        return np.array([self.center[0], self.center[1], self.size[0], self.size[1], self.yaw])

    def translated(self, offset):
        c = np.asarray(self.center) + np.asarray(offset, dtype=np.float64)
        return Box3D(tuple(c), self.size, self.yaw, self.cls)

    def to_dict(self):
        return {"class": self.cls.value, "center": list(self.center),
                "size": list(self.size), "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["size"]), d["yaw"], ObjectClass(d["class"]))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    frame_id: str = ""

    def to_dict(self):
        d = self.box.to_dict()
        d["score"] = float(self.score)
        d["frame"] = self.frame_id
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(Box3D.from_dict(d), float(d["score"]), str(d.get("frame", "")))


@dataclass(frozen=True)
class FeatureMap:
    """Dense ``C x H x W`` BEV tensor; ``H`` indexes x cells, ``W`` y cells."""

    data: np.ndarray
    grid_origin: tuple = (0.0, 0.0)
    cell_size: float = 0.32
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"FeatureMap needs C x H x W data, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("FeatureMap values must be finite")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


def radial_unit_vector(p, eps=EPS):
    """Unit line-of-sight vector(s) from the sensor origin to ``p``.

    Accepts a single 3-vector or an ``(N, 3)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegeneratePoint("point at the sensor origin has no line of sight")
    return p / norm


def transform_to_frame(points, pose_src, pose_dst):
    """Map points from ``pose_src``'s ego frame into ``pose_dst``'s.

    Only the xyz columns are touched; any extra columns ride along.
    """
    points = np.asarray(points, dtype=np.float64)
    out = points.copy()
    if len(points) == 0:
        return out
    r_src = pose_src.rotation()
    r_dst = pose_dst.rotation()
    rot = r_dst.T @ r_src
    shift = r_dst.T @ (np.asarray(pose_src.translation) - np.asarray(pose_dst.translation))
    out[:, :3] = points[:, :3] @ rot.T + shift
    return out


def transform_box(box, pose_src, pose_dst):
    c = transform_to_frame(np.asarray([box.center]), pose_src, pose_dst)[0]
    return Box3D(tuple(c), box.size, box.yaw + pose_src.yaw - pose_dst.yaw, box.cls)


def enhance(cloud):
    """Append ``|v_abs|``, ``v_abs**2`` and ``sign(v_abs)`` to a 7-column cloud."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 7:
        raise ValueError(f"expected an N x 7 radar cloud, got {cloud.shape}")
    v = cloud[:, V_ABS]
    return np.concatenate([cloud, np.abs(v)[:, None], (v * v)[:, None], np.sign(v)[:, None]], axis=1)


def boxes_to_array(boxes):
    """Stack boxes as rows ``(x, y, z, l, w, h, yaw, class_index)``."""
    if not boxes:
        return np.zeros((0, 8))
    return np.array([[*b.center, *b.size, b.yaw, CLASSES.index(b.cls)] for b in boxes])


def points_in_box(points, box, margin=0.0):
    """Mask of points inside ``box`` (BEV footprint and height), grown by ``margin``."""
    pts = np.asarray(points)[:, :3] - np.asarray(box.center)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    lx = pts[:, 0] * c + pts[:, 1] * s
    ly = -pts[:, 0] * s + pts[:, 1] * c
    l, w, h = box.size
    return ((np.abs(lx) <= l / 2 + margin) & (np.abs(ly) <= w / 2 + margin)
            & (np.abs(pts[:, 2]) <= h / 2 + margin))

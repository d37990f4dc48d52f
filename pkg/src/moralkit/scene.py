"""Deterministic synthetic multi-frame radar + LiDAR scenes.

Every random draw comes from a generator keyed by ``(seed, stream, frame,
object)`` so a frame can be produced independently of the others and the
whole sequence is bit-identical across runs.
"""
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, replace, asdict

import numpy as np

from .core import (
    Box3D, EgoPose, ObjectClass, CLASSES, radial_unit_vector, transform_to_frame,
)
from .errors import InvalidConfig, FormatError

FORMAT_VERSION = "moralkit-frames/1"
MOVING_SPEED = 0.1
SURFACE_CLEARANCE = 0.15
MAX_SPEED = 40.0

# mean RCS (dBsm) and LiDAR intensity per class
_CLASS_RCS = {ObjectClass.CAR: 10.0, ObjectClass.PEDESTRIAN: -2.0, ObjectClass.CYCLIST: 2.0}
_CLASS_INTENSITY = {ObjectClass.CAR: 0.7, ObjectClass.PEDESTRIAN: 0.3, ObjectClass.CYCLIST: 0.5}
CLASS_SIZE = {
    ObjectClass.CAR: (4.2, 1.8, 1.5),
    ObjectClass.PEDESTRIAN: (0.6, 0.6, 1.7),
    ObjectClass.CYCLIST: (1.8, 0.6, 1.6),
}

# LiDAR source codes kept alongside each frame (not part of the text format)
GROUND, OBJECT, CLUTTER = 0, 1, 2


def named_rng(seed, *keys):
    """Counter-style generator: one independent stream per key tuple."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class SceneObject:
    cls: ObjectClass
    box: Box3D
    velocity: tuple = (0.0, 0.0, 0.0)
    point_density: int = 12
    lidar_density: int = 150

    def __post_init__(self):
        object.__setattr__(self, "cls", ObjectClass(self.cls))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))

    @property
    def speed(self):
        return float(np.linalg.norm(self.velocity))

    @property
    def moving(self):
        return self.speed > MOVING_SPEED

    def to_dict(self):
        return {"class": self.cls.value, "box": self.box.to_dict(),
                "velocity": list(self.velocity), "point_density": int(self.point_density),
                "lidar_density": int(self.lidar_density)}

    @classmethod
    def from_dict(cls, d):
        return cls(ObjectClass(d["class"]), Box3D.from_dict(d["box"]), tuple(d["velocity"]),
                   int(d.get("point_density", 12)), int(d.get("lidar_density", 150)))


@dataclass(frozen=True)
class SceneConfig:
    n_frames: int = 5
    frame_period: float = 0.1
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    objects: tuple = ()
    clutter_rate: int = 100
    multipath_rate: int = 10
    noise_sigma_pos: float = 0.05
    noise_sigma_vel: float = 0.1
    seed: int = 0
    x_range: tuple = (0.0, 51.2)
    y_range: tuple = (-25.6, 25.6)
    lidar_ground_points: int = 3000
    lidar_clutter_rate: int = 0
    lidar_noise: float = 0.02
    multipath_wall: float = 6.0
    spurious_doppler_frac: float = 0.05
    spurious_doppler_sigma: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(
            o if isinstance(o, SceneObject) else SceneObject.from_dict(o) for o in self.objects))
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))

    def validate(self):
        if int(self.n_frames) < 1:
            raise InvalidConfig("n_frames", f"must be >= 1, got {self.n_frames}")
        if not self.frame_period > 0:
            raise InvalidConfig("frame_period", f"must be > 0, got {self.frame_period}")
        for name in ("clutter_rate", "multipath_rate", "lidar_ground_points", "lidar_clutter_rate"):
            if getattr(self, name) < 0:
                raise InvalidConfig(name, f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.spurious_doppler_frac <= 1.0:
            raise InvalidConfig("spurious_doppler_frac", f"must lie in [0, 1], got {self.spurious_doppler_frac}")
        for name in ("noise_sigma_pos", "noise_sigma_vel", "lidar_noise", "spurious_doppler_sigma"):
            if getattr(self, name) < 0:
                raise InvalidConfig(name, f"must be >= 0, got {getattr(self, name)}")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise InvalidConfig("x_range/y_range", "ranges must be non-degenerate")
        for i, o in enumerate(self.objects):
            if o.point_density < 0 or o.lidar_density < 0:
                raise InvalidConfig(f"objects[{i}]", "densities must be >= 0")
            if o.speed > MAX_SPEED:
                raise InvalidConfig(f"objects[{i}].velocity", f"speed {o.speed:.2f} exceeds {MAX_SPEED} m/s")
        return self

    def to_dict(self):
        d = asdict(self)
        d["objects"] = [o.to_dict() for o in self.objects]
        d["x_range"] = list(self.x_range)
        d["y_range"] = list(self.y_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(sorted(unknown)[0], "unknown scene field")
        d["objects"] = tuple(SceneObject.from_dict(o) for o in d.get("objects", ()))
        return cls(**d)


@dataclass(frozen=True)
class Frame:
    index: int
    radar: np.ndarray
    labels: np.ndarray
    lidar: np.ndarray
    pose: EgoPose
    boxes: tuple
    velocities: tuple = ()
    lidar_source: np.ndarray = None

    @property
    def frame_id(self):
        return f"{self.index:04d}"


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple
    config: SceneConfig
    name: str = ""

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


def radar_project(point_pos, point_world_vel, ego_vel):
    """Relative and absolute radial velocity seen from the sensor origin.

    All vectors must be expressed in the same (ego) frame. Works row-wise on
    ``(N, 3)`` arrays as well as single vectors.
    """
    u = radial_unit_vector(point_pos)
    v_abs = np.sum(np.asarray(point_world_vel, dtype=np.float64) * u, axis=-1)
    v_rel = np.sum((np.asarray(point_world_vel, dtype=np.float64) - np.asarray(ego_vel)) * u, axis=-1)
    return v_rel, v_abs


def ego_poses(config):
    poses = []
    pos = np.zeros(3)
    yaw = 0.0
    for _ in range(int(config.n_frames)):
        poses.append(EgoPose(tuple(pos), yaw))
        pos = pos + config.ego_speed * config.frame_period * np.array([np.cos(yaw), np.sin(yaw), 0.0])
        yaw = yaw + config.ego_yaw_rate * config.frame_period
    return poses


def _visible_faces(box):
    """Vertical faces of ``box`` facing a sensor at the origin: list of (center, u_axis, half_u, height)."""
    c = np.asarray(box.center)
    l, w, h = box.size
    cy, sy = np.cos(box.yaw), np.sin(box.yaw)
    ax = np.array([cy, sy, 0.0])
    ay = np.array([-sy, cy, 0.0])
    faces = []
    for normal, half_n, along, half_a in ((ax, l / 2, ay, w / 2), (-ax, l / 2, ay, w / 2),
                                          (ay, w / 2, ax, l / 2), (-ay, w / 2, ax, l / 2)):
        fc = c + normal * half_n
        if normal[:2] @ fc[:2] < 0:
            faces.append((fc, along, half_a, h))
    return faces


def sample_visible_surface(box, n, rng):
    """``n`` points on the sensor-facing vertical faces, area-weighted."""
    faces = _visible_faces(box)
    if n <= 0 or not faces:
        return np.zeros((0, 3))
    areas = np.array([2 * f[2] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    s = rng.uniform(-1.0, 1.0, size=n)
    zr = rng.uniform(0.0, 1.0, size=n)
    out = np.empty((n, 3))
    bottom = box.center[2] - box.size[2] / 2
    for k, (fc, along, half_a, h) in enumerate(faces):
        m = which == k
        out[m] = fc + np.outer(s[m] * half_a, along)
        out[m, 2] = bottom + SURFACE_CLEARANCE + zr[m] * (h - SURFACE_CLEARANCE)
    return out


def _object_state(obj, pose, f, tau):
    """Box and velocity of ``obj`` at frame ``f`` expressed in that frame's ego coordinates."""
    world_center = np.asarray(obj.box.center) + np.asarray(obj.velocity) * tau * f
    world_box = Box3D(tuple(world_center), obj.box.size, obj.box.yaw, obj.cls)
    origin = EgoPose()
    c = transform_to_frame(np.asarray([world_box.center]), origin, pose)[0]
    box = Box3D(tuple(c), world_box.size, world_box.yaw - pose.yaw, obj.cls)
    vel = pose.rotation().T @ np.asarray(obj.velocity)
    return box, vel


def _simulate_frame(config, f, pose):
    seed = config.seed
    tau = config.frame_period
    sp, sv = config.noise_sigma_pos, config.noise_sigma_vel
    ego_vel = np.array([config.ego_speed, 0.0, 0.0])
    x0, x1 = config.x_range
    y0, y1 = config.y_range

    radar_parts, label_parts = [], []
    lidar_parts, source_parts = [], []
    boxes, vels = [], []
    moving_pts = []

    for k, obj in enumerate(config.objects):
        box, vel = _object_state(obj, pose, f, tau)
        boxes.append(box)
        vels.append(tuple(vel))
        rng = named_rng(seed, "radar", f, k)
        pts = sample_visible_surface(box, int(obj.point_density), rng)
        n = len(pts)
        if n:
            v_rel, v_abs = radar_project(pts, np.broadcast_to(vel, pts.shape), ego_vel)
            noise = rng.normal(0.0, 1.0, size=(n, 3)) * np.array([sp, sp, 3 * sp])
            dv = rng.normal(0.0, sv, size=n)
            rcs = _CLASS_RCS[obj.cls] + rng.normal(0.0, 3.0, size=n)
            noisy = pts + noise
            radar_parts.append(np.column_stack([noisy, rcs, v_rel + dv, v_abs + dv, np.zeros(n)]))
            label_parts.append(np.full(n, int(obj.moving), dtype=np.int8))
            if obj.moving:
                moving_pts.append(np.column_stack([noisy, v_abs + dv]))
        lrng = named_rng(seed, "lidar", f, k)
        lp = sample_visible_surface(box, int(obj.lidar_density), lrng)
        if len(lp):
            lp = lp + lrng.normal(0.0, config.lidar_noise, size=lp.shape)
            inten = np.clip(_CLASS_INTENSITY[obj.cls] + lrng.normal(0.0, 0.05, size=len(lp)), 0.0, 1.0)
            lidar_parts.append(np.column_stack([lp, inten]))
            source_parts.append(np.full(len(lp), OBJECT, dtype=np.int8))

    n_cl = int(config.clutter_rate)
    if n_cl:
        rng = named_rng(seed, "clutter", f)
        pos = np.column_stack([rng.uniform(max(x0, 1.0), x1, n_cl), rng.uniform(y0, y1, n_cl),
                               rng.uniform(0.0, 2.5, n_cl)])
        v_rel, v_abs = radar_project(pos, np.zeros_like(pos), ego_vel)
        dv = rng.normal(0.0, sv, size=n_cl)
        rcs = rng.normal(0.0, 5.0, size=n_cl)
        # sidelobe/ambiguity outliers: static returns with a spurious Doppler reading
        srng = named_rng(seed, "spurious-doppler", f)
        hit = srng.uniform(size=n_cl) < config.spurious_doppler_frac
        dv = dv + hit * srng.normal(0.0, config.spurious_doppler_sigma, size=n_cl)
        radar_parts.append(np.column_stack([pos, rcs, v_rel + dv, v_abs + dv, np.zeros(n_cl)]))
        label_parts.append(np.zeros(n_cl, dtype=np.int8))

    n_mp = int(config.multipath_rate)
    if n_mp and moving_pts:
        rng = named_rng(seed, "multipath", f)
        src = np.concatenate(moving_pts)
        pick = src[rng.integers(0, len(src), size=n_mp)]
        side = np.where(pick[:, 1] >= 0, 1.0, -1.0)
        wall = side * config.multipath_wall
        ghost = pick[:, :3].copy()
        ghost[:, 1] = 2 * wall - pick[:, 1]
        v_abs = pick[:, 3] * (1.0 + rng.normal(0.0, 0.3, size=n_mp))
        u = radial_unit_vector(ghost)
        v_rel = v_abs - u @ ego_vel
        rcs = rng.normal(-5.0, 3.0, size=n_mp)
        radar_parts.append(np.column_stack([ghost, rcs, v_rel, v_abs, np.zeros(n_mp)]))
        label_parts.append(np.ones(n_mp, dtype=np.int8))

    n_g = int(config.lidar_ground_points)
    if n_g:
        rng = named_rng(seed, "ground", f)
        g = np.column_stack([rng.uniform(x0, x1, n_g), rng.uniform(y0, y1, n_g),
                             rng.normal(0.0, config.lidar_noise, n_g),
                             np.clip(rng.normal(0.1, 0.03, n_g), 0.0, 1.0)])
        lidar_parts.append(g)
        source_parts.append(np.full(n_g, GROUND, dtype=np.int8))

    n_lc = int(config.lidar_clutter_rate)
    if n_lc:
        rng = named_rng(seed, "lidar-clutter", f)
        c = np.column_stack([rng.uniform(max(x0, 1.0), x1, n_lc), rng.uniform(y0, y1, n_lc),
                             rng.uniform(0.5, 3.0, n_lc), rng.uniform(0.0, 1.0, n_lc)])
        lidar_parts.append(c)
        source_parts.append(np.full(n_lc, CLUTTER, dtype=np.int8))

    radar = np.concatenate(radar_parts) if radar_parts else np.zeros((0, 7))
    labels = np.concatenate(label_parts) if label_parts else np.zeros(0, dtype=np.int8)
    lidar = np.concatenate(lidar_parts) if lidar_parts else np.zeros((0, 4))
    source = np.concatenate(source_parts) if source_parts else np.zeros(0, dtype=np.int8)
    return Frame(f, radar, labels, lidar, pose, tuple(boxes), tuple(vels), source)


def simulate(config, name=""):
    """Generate the full :class:`FrameSequence` for ``config``."""
    config.validate()
    poses = ego_poses(config)
    frames = tuple(_simulate_frame(config, f, poses[f]) for f in range(int(config.n_frames)))
    return FrameSequence(frames, config, name)


# ---------------------------------------------------------------- scene presets

def tail_scene_config(seed=0, speed=10.0, n_frames=5, frame_period=0.1, **overrides):
    """One car driving straight away from the sensor, the setting that shows the tail."""
    car = SceneObject(ObjectClass.CAR, Box3D((15.0, 0.0, 0.75), CLASS_SIZE[ObjectClass.CAR], 0.0,
                                             ObjectClass.CAR),
                      (speed, 0.0, 0.0), point_density=25, lidar_density=200)
    base = dict(n_frames=n_frames, frame_period=frame_period, objects=(car,), clutter_rate=40,
                multipath_rate=0, noise_sigma_pos=0.05, noise_sigma_vel=0.1, seed=seed)
    base.update(overrides)
    return SceneConfig(**base)


_SPEED_RANGE = {ObjectClass.CAR: (4.0, 12.0), ObjectClass.PEDESTRIAN: (0.8, 2.0),
                ObjectClass.CYCLIST: (2.5, 6.0)}
_RADAR_DENSITY = {ObjectClass.CAR: (10, 18), ObjectClass.PEDESTRIAN: (3, 6), ObjectClass.CYCLIST: (4, 8)}
_LIDAR_DENSITY = {ObjectClass.CAR: 300, ObjectClass.PEDESTRIAN: 50, ObjectClass.CYCLIST: 70}


def random_scene_config(seed, template=None, n_objects=(4, 8), moving_fraction=0.6,
                        class_weights=(0.4, 0.3, 0.3), lidar_range_ref=12.0, max_heading=0.35):
    """Draw a random traffic scene on top of ``template``'s sensor settings.

    Objects drive roughly along the ego heading (within ``max_heading`` rad),
    so most of their motion is radial. LiDAR point counts fall off with range
    beyond ``lidar_range_ref`` metres while radar density does not.
    """
    template = template or SceneConfig()
    rng = named_rng(seed, "scene-layout")
    x0, x1 = template.x_range
    y0, y1 = template.y_range
    T = template.n_frames * template.frame_period
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    objects, placed = [], []
    attempts = 0
    while len(objects) < n and attempts < 200:
        attempts += 1
        cls = CLASSES[int(rng.choice(3, p=np.asarray(class_weights) / np.sum(class_weights)))]
        l, w, h = CLASS_SIZE[cls]
        scale = rng.uniform(0.9, 1.1, size=3)
        size = (l * scale[0], w * scale[1], h * scale[2])
        moving = rng.uniform() < moving_fraction
        heading = rng.uniform(-max_heading, max_heading) + (np.pi if rng.uniform() < 0.5 else 0.0)
        speed = rng.uniform(*_SPEED_RANGE[cls]) if moving else 0.0
        vel = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        margin = 2.5
        cx = rng.uniform(x0 + 4.0, x1 - margin)
        cy = rng.uniform(y0 + margin, y1 - margin)
        end = np.array([cx, cy]) + vel[:2] * T
        if not (x0 + 3.0 < end[0] < x1 - margin and y0 + margin < end[1] < y1 - margin):
            continue
        r = max(size[0], size[1]) / 2
        if any(np.hypot(cx - px, cy - py) < r + pr + 0.8 or np.hypot(end[0] - ex, end[1] - ey) < r + pr + 0.8
               for px, py, ex, ey, pr in placed):
            continue
        placed.append((cx, cy, end[0], end[1], r))
        dist = np.hypot(cx, cy)
        lo, hi = _RADAR_DENSITY[cls]
        lidar_n = int(round(_LIDAR_DENSITY[cls] * min(1.0, (lidar_range_ref / max(dist, 1.0)) ** 2)))
        box = Box3D((cx, cy, size[2] / 2), size, heading if moving else rng.uniform(-np.pi, np.pi), cls)
        objects.append(SceneObject(cls, box, tuple(vel), int(rng.integers(lo, hi + 1)), lidar_n))
    return replace(template, objects=tuple(objects), seed=int(seed))


# ---------------------------------------------------------------- file format

_RADAR_FMT = ["%.17g"] * 7 + ["%d"]
_LIDAR_FMT = ["%.17g"] * 4


def _frame_meta(frame):
    return {"index": frame.index, "pose": frame.pose.to_dict(),
            "boxes": [b.to_dict() for b in frame.boxes],
            "velocities": [list(map(float, v)) for v in frame.velocities]}


def write_sequence(seq, directory):
    """Write ``radar_NNNN.txt``, ``lidar_NNNN.txt`` and ``sequence.json`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for fr in seq.frames:
        radar = np.column_stack([fr.radar, fr.labels]) if len(fr.radar) else np.zeros((0, 8))
        np.savetxt(os.path.join(directory, f"radar_{fr.index:04d}.txt"), radar, fmt=_RADAR_FMT)
        np.savetxt(os.path.join(directory, f"lidar_{fr.index:04d}.txt"), fr.lidar, fmt=_LIDAR_FMT)
    meta = {"format": FORMAT_VERSION, "name": seq.name, "config": seq.config.to_dict(),
            "frames": [_frame_meta(fr) for fr in seq.frames]}
    with open(os.path.join(directory, "sequence.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return directory


def _load_table(path, width):
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", "loadtxt: input contained no data")
            arr = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.size == 0:
        return np.zeros((0, width))
    if arr.shape[1] != width:
        raise FormatError(f"{path}: expected {width} columns, found {arr.shape[1]}")
    return arr


def read_sequence(directory):
    path = os.path.join(directory, "sequence.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if meta.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format {meta.get('format')!r}, want {FORMAT_VERSION!r}")
    config = SceneConfig.from_dict(meta["config"])
    frames = []
    for fm in meta["frames"]:
        i = fm["index"]
        radar = _load_table(os.path.join(directory, f"radar_{i:04d}.txt"), 8)
        lidar = _load_table(os.path.join(directory, f"lidar_{i:04d}.txt"), 4)
        boxes = tuple(Box3D.from_dict(b) for b in fm["boxes"])
        vels = tuple(tuple(v) for v in fm.get("velocities", []))
        frames.append(Frame(i, radar[:, :7].copy(), radar[:, 7].astype(np.int8), lidar,
                            EgoPose.from_dict(fm["pose"]), boxes, vels, None))
    return FrameSequence(tuple(frames), config, meta.get("name", ""))


def sequence_digest(seq):
    """SHA-256 over every array and box of a sequence; equal digests mean identical data."""
    h = hashlib.sha256()
    for fr in seq.frames:
        for arr in (fr.radar, fr.labels, fr.lidar):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(_frame_meta(fr), sort_keys=True).encode())
    return h.hexdigest()


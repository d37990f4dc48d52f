"""One TOML file drives the whole pipeline: ``PipelineConfig`` and its (de)serialisation."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import tomli
import tomli_w

from .detect import HeadConfig
from .encoders import GridSpec
from .errors import InvalidConfig, ParseError
from .evaluation import DRIVING_CORRIDOR, ENTIRE_AREA, EvalConfig, RegionSpec
from .ground import GroundParams
from .model import STAGED, END_TO_END, DetectorConfig
from .mre.pointnet import MosConfig
from .scene import SceneConfig, SceneObject, random_scene_config, tail_scene_config
from .training import TrainConfig

SCENE_PRESETS = ("tail", "random", "custom")


@dataclass(frozen=True)
class MreParams:
    alpha: float = 0.5
    tau: float = 0.1
    frames: int = 5
    strict: bool = False
    network: MosConfig = MosConfig()
    train: TrainConfig = TrainConfig(epochs=80)


@dataclass(frozen=True)
class DetectorParams:
    use_mre: bool = True
    use_magf: bool = True
    reduction: int = 4
    gate_kernel: int = 1
    mode: str = STAGED
    head: HeadConfig = HeadConfig()
    train: TrainConfig = TrainConfig(epochs=80, warmup=0.05, grad_clip=10.0)


@dataclass(frozen=True)
class EvalParams:
    iou_car: float = 0.5
    iou_pedestrian: float = 0.25
    iou_cyclist: float = 0.25
    corridor: tuple = DRIVING_CORRIDOR.bounds
    recall_points: int = 40

    def build(self):
        return EvalConfig({"Car": self.iou_car, "Pedestrian": self.iou_pedestrian, "Cyclist": self.iou_cyclist},
                          (ENTIRE_AREA, RegionSpec("DrivingCorridor", self.corridor)), self.recall_points)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Desk-scale synthetic benchmark behind ``ablate`` and the trend checks."""
    scene: SceneConfig = SceneConfig(n_frames=5, x_range=(0.0, 25.6), y_range=(-12.8, 12.8),
                                     clutter_rate=40, lidar_ground_points=1000)
    grid: GridSpec = GridSpec(x_range=(0.0, 25.6), y_range=(-12.8, 12.8), feature_width=32)
    n_objects: tuple = (3, 6)
    ego_speed: tuple = (0.0, 8.0)
    lidar_range_ref: float = 3.0     # sparse beyond a few metres so radar carries the far field
    n_train: int = 64
    n_test: int = 48
    mos_sequences: int = 20
    mos_test_sequences: int = 4
    mos_frames: int = 8
    test_frames: int = 12
    mos_every: int = 2
    mos_epochs: int = 30
    det_epochs: int = 60


@dataclass(frozen=True)
class SimulateParams:
    mode: str = "scene"      # "scene": one sequence; "benchmark": all benchmark splits
    preset: str = "tail"     # objects when [scene] lists none: "tail" or "random"


@dataclass(frozen=True)
class AblateParams:
    seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    out: str = "out"
    simulate: SimulateParams = SimulateParams()
    scene: SceneConfig = SceneConfig()
    ground: GroundParams = GroundParams()
    mre: MreParams = MreParams()
    encoder: GridSpec = GridSpec()
    detector: DetectorParams = DetectorParams()
    eval: EvalParams = EvalParams()
    benchmark: BenchmarkConfig = BenchmarkConfig()
    ablate: AblateParams = AblateParams()

    def validate(self):
        if not self.mre.tau > 0:
            raise InvalidConfig("mre.tau", f"must be > 0, got {self.mre.tau}")
        if not 0.0 < self.mre.alpha < 1.0:
            raise InvalidConfig("mre.alpha", f"must lie in (0, 1), got {self.mre.alpha}")
        if self.mre.frames < 1:
            raise InvalidConfig("mre.frames", f"must be >= 1, got {self.mre.frames}")
        if self.detector.mode not in (STAGED, END_TO_END):
            raise InvalidConfig("detector.mode", f"must be {STAGED!r} or {END_TO_END!r}")
        if self.simulate.preset not in SCENE_PRESETS:
            raise InvalidConfig("simulate.preset", f"must be one of {SCENE_PRESETS}")
        if self.simulate.mode not in ("scene", "benchmark"):
            raise InvalidConfig("simulate.mode", "must be 'scene' or 'benchmark'")
        for name in ("mre.train", "detector.train"):
            tc = self.mre.train if name == "mre.train" else self.detector.train
            if tc.epochs < 0 or tc.batch_size < 1 or not tc.lr > 0 or tc.weight_decay < 0:
                raise InvalidConfig(name, "epochs >= 0, batch_size >= 1, lr > 0 and weight_decay >= 0 required")
            if not 0 <= tc.warmup <= 1 or tc.grad_clip < 0:
                raise InvalidConfig(name, "warmup in [0, 1] and grad_clip >= 0 required")
        if self.detector.head.norm_groups < 0:
            raise InvalidConfig("detector.head.norm_groups", "must be >= 0")
        if self.encoder.feature_width % self.detector.reduction:
            raise InvalidConfig("detector.reduction", "must divide encoder.feature_width")
        try:
            self.scene_config().validate()
        except InvalidConfig as exc:
            raise InvalidConfig(f"scene.{exc.field}", str(exc).split(": ", 1)[-1]) from None
        self.eval.build()
        return self

    def scene_config(self):
        """The simulator config, with objects filled in from the preset when none are listed."""
        sc = replace(self.scene, seed=self.seed)
        if sc.objects or self.simulate.preset == "custom":
            return sc
        if self.simulate.preset == "tail":
            return replace(sc, objects=tail_scene_config(self.seed).objects)
        return random_scene_config(self.seed, sc)

    def ground_params(self):
        return replace(self.ground, seed=self.seed)

    def detector_config(self, grid=None):
        d = self.detector
        return DetectorConfig(grid or self.encoder, d.head, d.use_mre, d.use_magf, d.reduction, d.gate_kernel,
                              self.mre.network.sa_mlps[-1][-1], self.mre.network.fp_mlps[-1][-1])

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    # ------------------------------------------------------------ serialisation

    def to_dict(self):
        d = _plain(self)
        # stage seeds are derived from the root seed, so they are not part of the file
        d["scene"].pop("seed", None)
        d["ground"].pop("seed", None)
        d["mre"]["train"].pop("seed", None)
        d["detector"]["train"].pop("seed", None)
        d["scene"]["objects"] = [o.to_dict() for o in self.scene.objects]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        scene = d.pop("scene", None)
        cfg = _build(cls, d, "")
        if scene is not None:
            scene = dict(scene)
            objects = scene.pop("objects", [])
            base = _build(SceneConfig, scene, "scene")
            try:
                objs = tuple(SceneObject.from_dict(o) for o in objects)
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidConfig("scene.objects", f"bad object entry: {exc}") from None
            cfg = replace(cfg, scene=replace(base, objects=objs))
        return cfg

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text, source="<config>"):
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ParseError(f"{source}: {exc}") from None
        return cls.from_dict(data)

    def digest(self):
        """Stable hash of the canonical config; the output directory does not affect results and is left out."""
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path=None, seed=None):
    """Read and validate a config file (defaults when ``path`` is None)."""
    if path is None:
        cfg = PipelineConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ParseError(f"{p}: cannot read config: {exc.strerror}") from None
        cfg = PipelineConfig.from_toml(text, str(p))
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()


# ---------------------------------------------------------------- generic dataclass plumbing

def _plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                continue
            out[f.name] = _plain(v)
        return out
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(_plain(k)): _plain(v) for k, v in obj.items()}
    return obj


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidConfig(path, f"expected an array, got {value!r}")
        return _tuplify(value)
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise InvalidConfig(path or "<root>", "expected a table")
    defaults = cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise InvalidConfig(where, "unknown field")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            if key == "scene" and cls is not PipelineConfig:
                value = dict(value)
                objects = value.pop("objects", [])
                sub = _build(SceneConfig, value, where)
                kwargs[key] = replace(sub, objects=tuple(SceneObject.from_dict(o) for o in objects))
            else:
                kwargs[key] = _build(type(default), value, where)
        else:
            kwargs[key] = _coerce(default, value, where)
    try:
        return cls(**kwargs)
    except InvalidConfig as exc:
        field_name = exc.field if exc.field.startswith(path) else (f"{path}.{exc.field}" if path else exc.field)
        raise InvalidConfig(field_name, str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(path or "<root>", str(exc)) from None

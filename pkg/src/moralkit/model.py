"""The radar/LiDAR fusion detector, its training samples and training loop."""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .core import V_MAG, Box3D, wrap_angle
from .detect import DetectionHead, HeadConfig, build_targets, decode, detection_loss
from .encoders import LIDAR, RADAR, GridSpec, PillarEncoder, pillarize
from .errors import EmptyDataset, NoGroundFound
from .fusion import AdaptiveFusion, Magf
from .ground import GroundParams, remove_ground
from .mre.compensation import accumulate
from .mre.pointnet import velocity_encode
from .scene import named_rng
from .training import TrainConfig, fit

STAGED = "staged"
END_TO_END = "end2end"


@dataclass(frozen=True)
class DetectorConfig:
    grid: GridSpec = GridSpec()
    head: HeadConfig = HeadConfig()
    use_mre: bool = True
    use_magf: bool = True
    reduction: int = 4
    gate_kernel: int = 1
    sa_channels: int = 256
    fp_channels: int = 128


class FusionDetector(nn.Module):
    """Radar + LiDAR pillar encoders, MAGF, adaptive fusion and the center head."""

    def __init__(self, config=DetectorConfig()):
        super().__init__()
        self.config = config
        c = config.grid.feature_width
        self.radar_encoder = PillarEncoder(config.grid, RADAR)
        self.lidar_encoder = PillarEncoder(config.grid, LIDAR)
        self.magf = Magf(c, config.reduction, config.sa_channels, config.fp_channels, config.gate_kernel)
        self.fusion = AdaptiveFusion(c, c)
        self.head = DetectionHead(c, config.head)

    def fuse(self, radar_pillars, lidar_pillars, sa_mean, fp_mean):
        f_r = torch.stack([self.radar_encoder(p) for p in radar_pillars])
        f_l = torch.stack([self.lidar_encoder(p) for p in lidar_pillars])
        if self.config.use_magf:
            f_l = self.magf(f_l, sa_mean, fp_mean)
        return self.fusion(f_l, f_r)

    def forward(self, radar_pillars, lidar_pillars, sa_mean, fp_mean):
        return self.head(self.fuse(radar_pillars, lidar_pillars, sa_mean, fp_mean))


def build_detector(config=DetectorConfig(), seed=0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        det = FusionDetector(config)
    return det.to(dtype)


# ---------------------------------------------------------------- samples

@dataclass
class DetectionSample:
    radar: np.ndarray       # accumulated, enhanced (N, 10), target-frame coordinates
    lidar: np.ndarray       # ground-filtered (M, 4)
    boxes: tuple
    frame_id: str
    sa_mean: np.ndarray     # pooled motion features from the MOS pass
    fp_mean: np.ndarray
    stacked: np.ndarray = None  # MOS input, kept for end-to-end training
    plan: object = None
    meta: dict = field(default_factory=dict)


def radar_input(cloud, use_mre=True):
    """Enhanced radar columns for the encoder; without MRE the velocity encoding is zeroed."""
    enh = velocity_encode(cloud[:, :7])
    if not use_mre:
        enh[:, V_MAG:] = 0.0
    return enh


def build_sample(seq, mos_net, k=5, alpha=0.5, target=None, use_mre=True, ground=GroundParams(),
                 keep_mos_input=False, prefix="", tau=None, strict=False):
    """Accumulate radar, filter LiDAR ground and pool the MOS motion features for one target frame."""
    target = len(seq) - 1 if target is None else int(target)
    acc = accumulate(seq, k, mos_net, alpha, target, tau=tau, compensate_motion=use_mre, strict=strict)
    fr = seq[target]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoGroundFound)
        lidar = remove_ground(fr.lidar, ground) if len(fr.lidar) >= 3 else fr.lidar
    plan = None
    if keep_mos_input:
        plan = mos_net.plan(acc.stacked[:, :3])
    return DetectionSample(
        radar_input(acc.cloud, use_mre), lidar, tuple(fr.boxes), prefix + fr.frame_id,
        acc.features.f_sa.mean(axis=0), acc.features.f_fp.mean(axis=0),
        velocity_encode(acc.stacked) if keep_mos_input else None, plan,
        {"n_moving": int(acc.mask.labels.sum()), "target": target})


def build_samples(sequences, mos_net, k=5, alpha=0.5, use_mre=True, ground=GroundParams(), every=1,
                  keep_mos_input=False, first_target=None, tau=None, strict=False):
    """Samples for target frames ``first_target, first_target + every, ...`` (default ``k - 1``).

    Pin ``first_target`` when comparing different ``k`` so every variant sees the same frames.
    """
    first = k - 1 if first_target is None else int(first_target)
    if first < k - 1:
        raise ValueError(f"first_target {first} leaves fewer than K={k} frames")
    out = []
    for s, seq in enumerate(sequences):
        targets = list(range(first, len(seq)))[::every]
        for t in targets:
            out.append(build_sample(seq, mos_net, k, alpha, t, use_mre, ground, keep_mos_input,
                                    f"{seq.name or s}/", tau, strict))
    return out


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class Augment:
    flip: bool = False
    scale: float = 1.0
    rotation: float = 0.0  # radians

    @classmethod
    def draw(cls, rng, enabled=True):
        if not enabled:
            return cls()
        return cls(bool(rng.uniform() < 0.5), float(rng.uniform(0.95, 1.05)),
                   float(np.deg2rad(rng.uniform(-10.0, 10.0))))

    def points(self, pts):
        out = np.array(pts, dtype=np.float64, copy=True)
        if len(out) == 0:
            return out
        if self.flip:
            out[:, 1] = -out[:, 1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = self.scale * (c * x - s * y)
        out[:, 1] = self.scale * (s * x + c * y)
        out[:, 2] = self.scale * out[:, 2]
        return out

    def box(self, b):
        cx, cy, cz = b.center
        yaw = b.yaw
        if self.flip:
            cy, yaw = -cy, -yaw
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        center = (self.scale * (c * cx - s * cy), self.scale * (s * cx + c * cy), self.scale * cz)
        size = tuple(self.scale * v for v in b.size)
        return Box3D(center, size, wrap_angle(yaw + self.rotation), b.cls)


def prepare(sample, grid, aug=Augment()):
    """Pillars and targets for one (optionally augmented) sample."""
    radar = aug.points(sample.radar)
    lidar = aug.points(sample.lidar)
    boxes = [aug.box(b) for b in sample.boxes]
    hm, reg, pos = build_targets(boxes, grid)
    return pillarize(radar, grid, RADAR), pillarize(lidar, grid, LIDAR), (hm, reg, pos)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class DetectorTrainConfig:
    train: TrainConfig = TrainConfig(warmup=0.05, grad_clip=10.0)
    mode: str = STAGED
    augment: bool = True


def _pooled(samples, idx, dtype, mos_net=None):
    if mos_net is None:
        sa = torch.as_tensor(np.stack([samples[i].sa_mean for i in idx]), dtype=dtype)
        fp = torch.as_tensor(np.stack([samples[i].fp_mean for i in idx]), dtype=dtype)
        return sa, fp
    sas, fps = [], []
    for i in idx:
        s = samples[i]
        _, f_sa, f_fp, _ = mos_net(torch.as_tensor(s.stacked, dtype=dtype), s.plan)
        sas.append(f_sa.mean(dim=0))
        fps.append(f_fp.mean(dim=0))
    return torch.stack(sas), torch.stack(fps)


def batch_loss(model, samples, idx, augs, mos_net=None):
    """Mean per-sample detection loss over ``idx`` with the given augmentations."""
    dtype = next(model.parameters()).dtype
    grid = model.config.grid
    prepared = [prepare(samples[i], grid, a) for i, a in zip(idx, augs)]
    sa, fp = _pooled(samples, idx, dtype, mos_net)
    hm, reg = model([p[0] for p in prepared], [p[1] for p in prepared], sa, fp)
    total = 0.0
    for b, (_, _, (t_hm, t_reg, pos)) in enumerate(prepared):
        total = total + detection_loss(hm[b], reg[b], torch.as_tensor(t_hm, dtype=dtype),
                                       torch.as_tensor(t_reg, dtype=dtype), torch.as_tensor(pos),
                                       model.config.head.reg_weight)
    return total / len(prepared)


def train_detector(model, samples, cfg=DetectorTrainConfig(), mos_net=None, history=None, start_epoch=0,
                   optimizer=None, on_epoch=None):
    """Focal + smooth-L1 training with flip/scale/rotation augmentation.

    ``staged`` keeps the MOS network frozen (pooled motion features are read
    from the samples); ``end2end`` also optimises ``mos_net`` through the
    motion features, which needs samples built with ``keep_mos_input``.
    """
    if not samples:
        raise EmptyDataset("no detection training samples")
    if cfg.mode not in (STAGED, END_TO_END):
        raise ValueError(f"unknown training mode {cfg.mode!r}")
    joint = cfg.mode == END_TO_END
    if joint and (mos_net is None or samples[0].stacked is None):
        raise ValueError("end-to-end training needs the MOS network and samples built with keep_mos_input")
    params = list(model.parameters()) + (list(mos_net.parameters()) if joint else [])
    model.train()

    def loss_fn(idx, epoch, step):
        augs = [Augment.draw(named_rng(cfg.train.seed, "augment", epoch, int(i)), cfg.augment) for i in idx]
        return batch_loss(model, samples, idx, augs, mos_net if joint else None)

    history, optimizer = fit(params, loss_fn, len(samples), cfg.train, "detector-shuffle", history,
                             start_epoch, optimizer, on_epoch)
    return model, history


@torch.no_grad()
def predict(model, samples, batch_size=8):
    """Detections for every sample (no augmentation), in sample order."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    grid = model.config.grid
    out = []
    for b in range(0, len(samples), batch_size):
        idx = list(range(b, min(b + batch_size, len(samples))))
        prepared = [prepare(samples[i], grid) for i in idx]
        sa, fp = _pooled(samples, idx, dtype)
        hm, reg = model([p[0] for p in prepared], [p[1] for p in prepared], sa, fp)
        for j, i in enumerate(idx):
            out.extend(decode(hm[j], reg[j], grid, model.config.head, samples[i].frame_id))
    model.train(was)
    return out


def ground_truth(samples):
    return {s.frame_id: list(s.boxes) for s in samples}


def with_modules(config, use_mre, use_magf):
    return replace(config, use_mre=use_mre, use_magf=use_magf)

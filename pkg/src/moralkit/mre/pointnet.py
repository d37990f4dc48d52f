"""Velocity attention and the SA/FP motion feature extractor."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .. import kernels
from ..core import V_MAG, V_SQ, V_DIR, enhance
from ..errors import TooFewPoints, EmptyCoarseSet

VELOCITY_CHANNELS = (V_MAG, V_SQ, V_DIR)
# fixed input scaling for the 10 enhanced channels (x y z rcs v_rel v_abs t |v| v^2 sign)
INPUT_SCALE = (1 / 20, 1 / 20, 1 / 2, 1 / 10, 1 / 10, 1 / 10, 1 / 4, 1 / 10, 1 / 100, 1.0)


def velocity_encode(cloud):
    """7 -> 10 columns: append ``|v_abs|``, ``v_abs**2`` and ``sign(v_abs)``."""
    return enhance(cloud)


def mlp(in_ch, widths, final_relu=True):
    layers = []
    c = in_ch
    for i, w in enumerate(widths):
        layers.append(nn.Linear(c, w))
        if final_relu or i < len(widths) - 1:
            layers.append(nn.ReLU())
        c = w
    return nn.Sequential(*layers)


class VelocityAttention(nn.Module):
    """Per-point gate ``a = sigmoid(w . feat + b)`` applied to the velocity-derived channels."""

    def __init__(self, in_channels=10):
        super().__init__()
        self.score = nn.Linear(in_channels, 1)
        nn.init.zeros_(self.score.weight)
        nn.init.zeros_(self.score.bias)
        sel = torch.zeros(in_channels)
        sel[list(VELOCITY_CHANNELS)] = 1.0
        self.register_buffer("selector", sel)

    def forward(self, feats):
        a = torch.sigmoid(self.score(feats))
        scale = 1.0 + self.selector * (a - 1.0)
        return feats * scale, a.squeeze(-1)


@dataclass(frozen=True)
class LevelPlan:
    centers: np.ndarray   # indices of sampled centroids in the previous level
    groups: np.ndarray    # (M, k) neighbour indices in the previous level


@dataclass(frozen=True)
class Plan:
    """Sampling/grouping/interpolation indices for one cloud; depends on xyz only."""
    levels: tuple
    interp: tuple  # per FP stage (coarse->fine): (idx, weights)
    xyz: tuple     # coordinates per level, level 0 first


def sa_plan(xyz, n_samples, radius, max_neighbors):
    if len(xyz) < n_samples:
        raise TooFewPoints(f"need >= {n_samples} points, got {len(xyz)}")
    centers = kernels.farthest_point_sample(xyz, n_samples)
    groups = kernels.ball_query(xyz, xyz[centers], radius, max_neighbors)
    return LevelPlan(centers, groups)


def interp_weights(fine_xyz, coarse_xyz, k=3):
    if len(coarse_xyz) == 0:
        raise EmptyCoarseSet("feature propagation needs at least one coarse point")
    idx, dist = kernels.knn(fine_xyz, coarse_xyz, k)
    w = 1.0 / (dist + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


class SetAbstraction(nn.Module):
    def __init__(self, n_samples, radius, in_channels, widths, max_neighbors=32):
        super().__init__()
        self.n_samples = n_samples
        self.radius = radius
        self.max_neighbors = max_neighbors
        self.mlp = mlp(in_channels + 3, widths)
        self.out_channels = widths[-1]

    def forward(self, xyz, feats, plan=None):
        """Returns ``(new_xyz, new_feats)``; ``plan`` is a cached :class:`LevelPlan`."""
        if plan is None:
            plan = sa_plan(xyz.detach().cpu().double().numpy(), self.n_samples, self.radius,
                           self.max_neighbors)
        centers = torch.as_tensor(plan.centers)
        groups = torch.as_tensor(plan.groups)
        new_xyz = xyz[centers]
        rel = (xyz[groups] - new_xyz[:, None, :]) / self.radius
        h = self.mlp(torch.cat([rel, feats[groups]], dim=-1))
        return new_xyz, h.max(dim=1).values


class FeaturePropagation(nn.Module):
    def __init__(self, coarse_channels, skip_channels, widths):
        super().__init__()
        self.mlp = mlp(coarse_channels + skip_channels, widths)
        self.out_channels = widths[-1]

    def forward(self, coarse_xyz, coarse_feats, fine_xyz, skip_feats, interp=None):
        if coarse_feats.shape[0] == 0:
            raise EmptyCoarseSet("feature propagation needs at least one coarse point")
        if interp is None:
            interp = interp_weights(fine_xyz.detach().cpu().double().numpy(),
                                    coarse_xyz.detach().cpu().double().numpy())
        idx, w = interp
        w = torch.as_tensor(w, dtype=coarse_feats.dtype)
        up = (coarse_feats[torch.as_tensor(idx)] * w[..., None]).sum(dim=1)
        return self.mlp(torch.cat([up, skip_feats], dim=-1))


@dataclass(frozen=True)
class MosConfig:
    samples: tuple = (256, 64, 16)
    radii: tuple = (1.0, 2.0, 4.0)
    sa_mlps: tuple = ((32, 32, 64), (64, 64, 128), (128, 128, 256))
    fp_mlps: tuple = ((256, 256), (256, 128), (128, 128))
    classifier: tuple = (128, 64, 2)
    max_neighbors: int = 32
    in_channels: int = 10

    def __post_init__(self):
        if list(self.samples) != sorted(set(self.samples), reverse=True):
            raise ValueError("SA sample counts must be strictly decreasing")
        if not (len(self.samples) == len(self.radii) == len(self.sa_mlps) == len(self.fp_mlps)):
            raise ValueError("SA and FP layer lists must have equal length")
        if self.classifier[0] != self.fp_mlps[-1][-1] or self.classifier[-1] != 2:
            raise ValueError("classifier must map the final FP width to 2 logits")


@dataclass
class MotionFeatures:
    sa_xyz: np.ndarray
    f_sa: np.ndarray
    f_fp: np.ndarray


class MosNetwork(nn.Module):
    """Velocity attention -> SA x3 -> FP x3 -> point-wise 2-way classifier."""

    def __init__(self, config=MosConfig()):
        super().__init__()
        self.config = config
        self.attention = VelocityAttention(config.in_channels)
        self.register_buffer("input_scale", torch.tensor(INPUT_SCALE, dtype=torch.float32))
        sa, ch = [], [config.in_channels]
        c = config.in_channels
        for n, r, widths in zip(config.samples, config.radii, config.sa_mlps):
            sa.append(SetAbstraction(n, r, c, widths, config.max_neighbors))
            c = widths[-1]
            ch.append(c)
        self.sa = nn.ModuleList(sa)
        fp = []
        coarse = ch[-1]
        for i, widths in enumerate(config.fp_mlps):
            skip = ch[-2 - i]
            fp.append(FeaturePropagation(coarse, skip, widths))
            coarse = widths[-1]
        self.fp = nn.ModuleList(fp)
        self.classifier = mlp(config.classifier[0], config.classifier[1:], final_relu=False)

    @property
    def sa_channels(self):
        return self.config.sa_mlps[-1][-1]

    @property
    def fp_channels(self):
        return self.config.fp_mlps[-1][-1]

    def sample_counts(self, n):
        """Per-level sample counts, clipped to the available points."""
        if n < self.config.samples[-1]:
            raise TooFewPoints(f"need >= {self.config.samples[-1]} points, got {n}")
        counts, avail = [], n
        for s in self.config.samples:
            m = min(s, avail)
            counts.append(m)
            avail = m
        return counts

    def plan(self, xyz):
        xyz = np.asarray(xyz, dtype=np.float64)
        counts = self.sample_counts(len(xyz))
        levels, coords = [], [xyz]
        for layer, m in zip(self.sa, counts):
            lp = sa_plan(coords[-1], m, layer.radius, layer.max_neighbors)
            levels.append(lp)
            coords.append(coords[-1][lp.centers])
        interp = []
        for i in range(len(self.fp)):
            interp.append(interp_weights(coords[-2 - i], coords[-1 - i]))
        return Plan(tuple(levels), tuple(interp), tuple(coords))

    def forward(self, enhanced, plan=None):
        """``enhanced``: (N, 10) tensor. Returns ``(logits, f_sa, f_fp, sa_xyz)``."""
        if plan is None:
            plan = self.plan(enhanced[:, :3].detach().cpu().double().numpy())
        feats, _ = self.attention(enhanced)
        feats = feats * self.input_scale
        xyz = enhanced[:, :3]
        xyzs, fs = [xyz], [feats]
        for layer, lp in zip(self.sa, plan.levels):
            xyz, f = layer(xyzs[-1], fs[-1], lp)
            xyzs.append(xyz)
            fs.append(f)
        up = fs[-1]
        for i, layer in enumerate(self.fp):
            up = layer(xyzs[-1 - i], up, xyzs[-2 - i], fs[-2 - i], plan.interp[i])
        return self.classifier(up), fs[-1], up, xyzs[-1]


def build_mos(config=MosConfig(), seed=0, dtype=torch.float32):
    """Network with weights drawn from ``seed`` (independent of the global RNG)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        net = MosNetwork(config)
    return net.to(dtype)


@torch.no_grad()
def mos_forward(enhanced, net, plan=None):
    """Run the network on a (N, 10) array; returns ``(MotionFeatures, probs)``.

    ``probs`` is (N, 2) with columns (static, moving).
    """
    enhanced = np.asarray(enhanced, dtype=np.float64)
    x = torch.as_tensor(enhanced, dtype=next(net.parameters()).dtype)
    was = net.training
    net.eval()
    logits, f_sa, f_fp, sa_xyz = net(x, plan)
    net.train(was)
    prob = torch.softmax(logits.double(), dim=-1).numpy()
    feats = MotionFeatures(sa_xyz.double().numpy(), f_sa.double().numpy(), f_fp.double().numpy())
    return feats, prob

"""Motion-attention gated fusion of LiDAR and radar BEV features.

Torch modules take ``(C, H, W)`` or ``(B, C, H, W)`` tensors; the
``*_map`` helpers wrap them for numpy-backed :class:`FeatureMap` values.
"""
import numpy as np
import torch
from torch import nn

from .core import FeatureMap
from .errors import EmptyFeatures, InvalidConfig, ShapeMismatch


def _batched(x):
    return (x[None], True) if x.dim() == 3 else (x, False)


class ChannelAttention(nn.Module):
    """Squeeze-excitation weights ``W_L = sigmoid(FC2(relu(FC1(gap(F)))))``."""

    def __init__(self, channels=64, reduction=4):
        super().__init__()
        if channels % reduction:
            raise InvalidConfig("reduction", f"{reduction} does not divide {channels} channels")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, f):
        x, single = _batched(f)
        w = torch.sigmoid(self.fc2(torch.relu(self.fc1(x.mean(dim=(2, 3))))))
        out = x * w[:, :, None, None]
        return (out[0], w[0]) if single else (out, w)


class MotionAggregator(nn.Module):
    """Blend projected mean-pooled SA and FP motion features; broadcast over the grid."""

    def __init__(self, sa_channels=256, fp_channels=128, channels=64):
        super().__init__()
        self.phi_sa = nn.Linear(sa_channels, channels)
        self.phi_fp = nn.Linear(fp_channels, channels)
        self.lambda_logit = nn.Parameter(torch.zeros(()))

    @property
    def lam(self):
        return torch.sigmoid(self.lambda_logit)

    def blend(self, sa_mean, fp_mean, lam=None):
        """``sa_mean``/``fp_mean``: (C_sa,) / (C_fp,) or batched (B, .) pooled vectors."""
        lam = self.lam if lam is None else lam
        return lam * self.phi_sa(sa_mean) + (1 - lam) * self.phi_fp(fp_mean)

    def forward(self, f_sa, f_fp, shape, lam=None):
        """``f_sa`` (M, C_sa) and ``f_fp`` (N, C_fp) point features -> (C, H, W)."""
        if f_sa.shape[0] == 0 or f_fp.shape[0] == 0:
            raise EmptyFeatures("motion aggregation needs non-empty SA and FP features")
        v = self.blend(f_sa.mean(dim=0), f_fp.mean(dim=0), lam)
        return broadcast(v, shape)


def broadcast(v, shape):
    """(C,) -> (C, H, W) or (B, C) -> (B, C, H, W)."""
    h, w = shape
    return v[..., None, None].expand(*v.shape, h, w)


class GatedFusion(nn.Module):
    """``G = sigmoid(conv(concat(F', M)))``; output ``F' * G + F'``."""

    def __init__(self, channels=64, kernel_size=1):
        super().__init__()
        if kernel_size % 2 != 1:
            raise InvalidConfig("gate_kernel", "kernel size must be odd")
        self.conv = nn.Conv2d(2 * channels, channels, kernel_size, padding=kernel_size // 2)

    def gate(self, f_l, motion):
        if f_l.shape != motion.shape:
            raise ShapeMismatch(f"LiDAR {tuple(f_l.shape)} vs motion {tuple(motion.shape)}")
        x, single = _batched(torch.cat([f_l, motion], dim=-3))
        g = torch.sigmoid(self.conv(x))
        return g[0] if single else g

    def forward(self, f_l, motion):
        g = self.gate(f_l, motion)
        return f_l * g + f_l, g


class AdaptiveFusion(nn.Module):
    """Per-channel convex blend ``beta * F_L + (1 - beta) * conv1x1(F_R)``.

    A declared stand-in with a fixed interface: (F_L enhanced, F_R) -> fused.
    """

    def __init__(self, channels=64, radar_channels=64):
        super().__init__()
        self.proj = nn.Conv2d(radar_channels, channels, 1)
        self.beta_logit = nn.Parameter(torch.zeros(channels))

    @property
    def beta(self):
        return torch.sigmoid(self.beta_logit)

    def project(self, f_r):
        x, single = _batched(f_r)
        y = self.proj(x)
        return y[0] if single else y

    def forward(self, f_l, f_r, beta=None):
        r = self.project(f_r)
        if r.shape != f_l.shape:
            raise ShapeMismatch(f"LiDAR {tuple(f_l.shape)} vs projected radar {tuple(r.shape)}")
        b = self.beta if beta is None else torch.as_tensor(beta, dtype=f_l.dtype)
        b = b.reshape(-1, 1, 1)
        return b * f_l + (1 - b) * r


class Magf(nn.Module):
    """Channel attention + motion aggregation + gating, as one block."""

    def __init__(self, channels=64, reduction=4, sa_channels=256, fp_channels=128, gate_kernel=1):
        super().__init__()
        self.attention = ChannelAttention(channels, reduction)
        self.aggregator = MotionAggregator(sa_channels, fp_channels, channels)
        self.gating = GatedFusion(channels, gate_kernel)

    def forward(self, f_l, sa_mean, fp_mean):
        """``f_l`` (B, C, H, W); pooled motion vectors (B, C_sa) / (B, C_fp)."""
        f_att, _ = self.attention(f_l)
        motion = broadcast(self.aggregator.blend(sa_mean, fp_mean), f_l.shape[-2:])
        out, _ = self.gating(f_att, motion)
        return out


# ---------------------------------------------------------------- FeatureMap helpers

def _tensor(fm, module):
    return torch.as_tensor(np.asarray(fm.data), dtype=next(module.parameters()).dtype)


def _wrap(t, like, **meta):
    return FeatureMap(t.detach().double().numpy(), like.grid_origin, like.cell_size, dict(like.meta, **meta))


@torch.no_grad()
def channel_attention(fm, module):
    """Returns ``(F_L', W_L)``."""
    out, w = module(_tensor(fm, module))
    return _wrap(out, fm), w.double().numpy()


@torch.no_grad()
def aggregate_motion(features, module, like, lam=None):
    """Motion FeatureMap on ``like``'s grid from :class:`MotionFeatures`."""
    dtype = next(module.parameters()).dtype
    f_sa = torch.as_tensor(np.asarray(features.f_sa), dtype=dtype)
    f_fp = torch.as_tensor(np.asarray(features.f_fp), dtype=dtype)
    lam = None if lam is None else torch.as_tensor(lam, dtype=dtype)
    return _wrap(module(f_sa, f_fp, (like.height, like.width), lam), like)


@torch.no_grad()
def gated_fuse(f_att, motion, module):
    if f_att.data.shape != motion.data.shape:
        raise ShapeMismatch(f"{f_att.data.shape} vs {motion.data.shape}")
    out, _ = module(_tensor(f_att, module), _tensor(motion, module))
    return _wrap(out, f_att)


@torch.no_grad()
def adaptive_fuse(f_enh, f_r, module, beta=None):
    if f_enh.data.shape[1:] != f_r.data.shape[1:]:
        raise ShapeMismatch(f"{f_enh.data.shape} vs {f_r.data.shape}")
    return _wrap(module(_tensor(f_enh, module), _tensor(f_r, module), beta), f_enh)

"""Pillar encoders: point clouds -> dense C x H x W BEV feature maps."""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import kernels
from .core import FeatureMap
from .errors import InvalidConfig

RADAR = "radar"
LIDAR = "lidar"
# raw per-point columns fed to the encoder (absolute x, y are left out so the
# encoder is translation covariant; position enters via the offsets)
RAW_COLUMNS = {RADAR: (2, 3, 4, 5, 6, 7, 8, 9), LIDAR: (2, 3)}
N_OFFSETS = 5  # dx, dy to pillar center; dx, dy, dz to pillar mean


def point_feature_dim(modality):
    return len(RAW_COLUMNS[modality]) + N_OFFSETS


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple = (0.0, 51.2)
    y_range: tuple = (-25.6, 25.6)
    cell_size: float = 0.32
    max_points_per_pillar: int = 32
    feature_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if not self.cell_size > 0:
            raise InvalidConfig("cell_size", f"must be > 0, got {self.cell_size}")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise InvalidConfig("x_range/y_range", "ranges must be non-degenerate")
        if self.max_points_per_pillar < 1:
            raise InvalidConfig("max_points_per_pillar", "must be >= 1")
        if self.feature_width < 1:
            raise InvalidConfig("feature_width", "must be >= 1")

    @property
    def shape(self):
        """``(H, W)``: cells along x, cells along y."""
        h = math.ceil((self.x_range[1] - self.x_range[0]) / self.cell_size - 1e-9)
        w = math.ceil((self.y_range[1] - self.y_range[0]) / self.cell_size - 1e-9)
        return h, w

    @property
    def origin(self):
        return (self.x_range[0], self.y_range[0])

    def cell_index(self, x, y):
        """Half-open floor assignment; boundary points go to the higher cell."""
        return _floor_cells(x, self.x_range[0], self.cell_size), _floor_cells(y, self.y_range[0], self.cell_size)

    def in_range(self, x, y):
        h, w = self.shape
        ix, iy = self.cell_index(x, y)
        return ((x >= self.x_range[0]) & (x < self.x_range[1]) & (y >= self.y_range[0])
                & (y < self.y_range[1]) & (ix >= 0) & (ix < h) & (iy >= 0) & (iy < w))

    def cell_center(self, ix, iy):
        return (self.x_range[0] + (np.asarray(ix) + 0.5) * self.cell_size,
                self.y_range[0] + (np.asarray(iy) + 0.5) * self.cell_size)


def _floor_cells(v, lo, cell):
    v = np.asarray(v, dtype=np.float64)
    i = np.floor((v - lo) / cell).astype(np.int64)
    # the division can land a hair below an exact boundary; cell edges are lo + i * cell
    i = np.where(lo + (i + 1) * cell <= v, i + 1, i)
    i = np.where(lo + i * cell > v, i - 1, i)
    return i


@dataclass
class Pillars:
    coords: np.ndarray    # (P, 2) int cell indices (ix, iy)
    features: np.ndarray  # (P, S, D) per-point features, zero padded
    mask: np.ndarray      # (P, S) bool, True for real points
    n_out_of_range: int
    n_truncated: int
    grid: GridSpec
    modality: str

    @property
    def n_dropped(self):
        return self.n_out_of_range + self.n_truncated

    def __len__(self):
        return len(self.coords)


def pillarize(cloud, grid=GridSpec(), modality=RADAR):
    """Group points into BEV pillars with offset-augmented per-point features.

    ``cloud`` is (N, 10) enhanced radar or (N, 4) LiDAR ``x y z intensity``.
    Pillars keep their first ``max_points_per_pillar`` points in input order.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    cols = RAW_COLUMNS[modality]
    dim = point_feature_dim(modality)
    if cloud.ndim != 2 or (len(cloud) and cloud.shape[1] <= max(cols)):
        raise ValueError(f"{modality} cloud needs > {max(cols)} columns, got shape {cloud.shape}")
    empty = Pillars(np.zeros((0, 2), np.int64), np.zeros((0, 1, dim)), np.zeros((0, 1), bool), 0, 0, grid, modality)
    if len(cloud) == 0:
        return empty
    h, w = grid.shape
    x, y = cloud[:, 0], cloud[:, 1]
    ix, iy = grid.cell_index(x, y)
    inside = grid.in_range(x, y)
    ix = np.where(inside, ix, -1)
    pillar, slot, n_p = kernels.pillar_slots(ix, iy, h, w, grid.max_points_per_pillar)
    n_out = int(np.sum(~inside))
    kept = slot >= 0
    n_trunc = int(np.sum(inside & ~kept))
    if n_p == 0:
        empty.n_out_of_range = n_out
        return empty
    pk, sk = pillar[kept], slot[kept]
    pts = cloud[kept]
    coords = np.zeros((n_p, 2), np.int64)
    coords[pk, 0] = ix[kept]
    coords[pk, 1] = iy[kept]
    counts = np.bincount(pk, minlength=n_p)
    mean = np.zeros((n_p, 3))
    for d in range(3):
        mean[:, d] = np.bincount(pk, weights=pts[:, d], minlength=n_p) / counts
    cx, cy = grid.cell_center(coords[pk, 0], coords[pk, 1])
    feats = np.column_stack([pts[:, list(cols)], pts[:, 0] - cx, pts[:, 1] - cy, pts[:, :3] - mean[pk]])
    s = int(counts.max())
    out = np.zeros((n_p, s, dim))
    mask = np.zeros((n_p, s), bool)
    out[pk, sk] = feats
    mask[pk, sk] = True
    return Pillars(coords, out, mask, n_out, n_trunc, grid, modality)


# per-feature input scaling (raw columns then offsets)
_SCALE = {
    RADAR: (1 / 2, 1 / 10, 1 / 10, 1 / 10, 1 / 4, 1 / 10, 1 / 100, 1.0) + (1 / 0.32,) * 2 + (1 / 0.32,) * 3,
    LIDAR: (1 / 2, 1.0) + (1 / 0.32,) * 2 + (1 / 0.32,) * 3,
}


class PillarEncoder(nn.Module):
    """Per-point Linear + ReLU, max-pool per pillar, scatter to the BEV grid."""

    def __init__(self, grid=GridSpec(), modality=RADAR):
        super().__init__()
        self.grid = grid
        self.modality = modality
        self.linear = nn.Linear(point_feature_dim(modality), grid.feature_width)
        self.register_buffer("scale", torch.tensor(_SCALE[modality], dtype=torch.float32))

    def forward(self, pillars):
        """(C, H, W) tensor for one :class:`Pillars` set."""
        h, w = self.grid.shape
        c = self.grid.feature_width
        dtype = self.linear.weight.dtype
        out = torch.zeros(c, h * w, dtype=dtype)
        if len(pillars) == 0:
            return out.view(c, h, w)
        x = torch.as_tensor(pillars.features, dtype=dtype) * self.scale.to(dtype)
        m = torch.as_tensor(pillars.mask)
        # padding -> 0 after ReLU; every pillar has >= 1 real point so the max is unchanged
        z = torch.relu(self.linear(x)) * m[..., None].to(dtype)
        pooled = z.max(dim=1).values
        flat = torch.as_tensor(pillars.coords[:, 0] * w + pillars.coords[:, 1])
        out = out.index_copy(1, flat, pooled.T)
        return out.view(c, h, w)


def build_encoder(grid=GridSpec(), modality=RADAR, seed=0, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        enc = PillarEncoder(grid, modality)
    return enc.to(dtype)


@torch.no_grad()
def encode(pillars, encoder):
    """Encode to a numpy-backed :class:`FeatureMap`."""
    data = encoder(pillars).double().numpy()
    g = encoder.grid
    return FeatureMap(data, g.origin, g.cell_size, {"modality": encoder.modality,
                                                    "n_pillars": len(pillars), "n_dropped": pillars.n_dropped})

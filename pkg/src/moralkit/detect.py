"""Center-based BEV detection head: targets, losses, peak decoding and NMS."""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import CLASSES, Box3D, Detection, ObjectClass, wrap_angle
from .kernels import bev_iou_matrix

N_CLASSES = len(CLASSES)
REG_CHANNELS = 8  # dx, dy (cells), z, log l, log w, log h, sin yaw, cos yaw
# per-class size priors (l, w, h); z and log-size are regressed relative to them
SIZE_PRIOR = {ObjectClass.CAR: (4.2, 1.8, 1.5), ObjectClass.PEDESTRIAN: (0.6, 0.6, 1.7),
              ObjectClass.CYCLIST: (1.8, 0.6, 1.6)}
HEATMAP_PRIOR = 0.1


@dataclass(frozen=True)
class HeadConfig:
    dilations: tuple = (1, 2, 4)
    score_thresh: float = 0.1
    nms_iou: float = 0.5
    max_detections: int = 50
    reg_weight: float = 1.0
    min_sigma: float = 0.8
    norm_groups: int = 8      # GroupNorm after each trunk conv; 0 disables


class DetectionHead(nn.Module):
    """Dilated 3x3 conv trunk, then 1x1 heads: per-class center heatmap and 8 regression channels.

    The dilations widen the receptive field enough to reach a car's center
    from the faces the sensors actually see.
    """

    def __init__(self, channels=64, config=HeadConfig()):
        super().__init__()
        self.config = config
        layers = []
        for d in config.dilations:
            layers.append(nn.Conv2d(channels, channels, 3, padding=d, dilation=d))
            if config.norm_groups:
                layers.append(nn.GroupNorm(math.gcd(config.norm_groups, channels), channels))
            layers.append(nn.ReLU())
        self.trunk = nn.Sequential(*layers)
        self.heatmap = nn.Conv2d(channels, N_CLASSES, 1)
        self.regression = nn.Conv2d(channels, REG_CHANNELS, 1)
        nn.init.constant_(self.heatmap.bias, math.log(HEATMAP_PRIOR / (1 - HEATMAP_PRIOR)))

    def forward(self, x):
        """(B, C, H, W) -> heatmap logits (B, 3, H, W), regression (B, 8, H, W)."""
        h = self.trunk(x)
        return self.heatmap(h), self.regression(h)


# ---------------------------------------------------------------- box <-> cell

def encode_box(box, grid):
    """``(class index, ix, iy, 8 regression targets)`` for a box whose center cell is on the grid."""
    ix, iy = grid.cell_index(np.array([box.center[0]]), np.array([box.center[1]]))
    ix, iy = int(ix[0]), int(iy[0])
    cx, cy = grid.cell_center(ix, iy)
    c = grid.cell_size
    prior = SIZE_PRIOR[box.cls]
    reg = np.array([(box.center[0] - cx) / c, (box.center[1] - cy) / c, box.center[2] - prior[2] / 2,
                    math.log(box.size[0] / prior[0]), math.log(box.size[1] / prior[1]),
                    math.log(box.size[2] / prior[2]), math.sin(box.yaw), math.cos(box.yaw)])
    return CLASSES.index(box.cls), ix, iy, reg


def decode_box(cls_index, ix, iy, reg, grid):
    cx, cy = grid.cell_center(ix, iy)
    c = grid.cell_size
    reg = np.asarray(reg, dtype=np.float64)
    cls = CLASSES[cls_index]
    prior = SIZE_PRIOR[cls]
    center = (float(cx + reg[0] * c), float(cy + reg[1] * c), float(reg[2] + prior[2] / 2))
    size = tuple(float(p * np.exp(np.clip(v, -5.0, 5.0))) for p, v in zip(prior, reg[3:6]))
    yaw = wrap_angle(math.atan2(reg[6], reg[7]))
    return Box3D(center, size, yaw, cls)


def build_targets(boxes, grid, min_sigma=0.8):
    """Gaussian center heatmaps (3, H, W), regression targets (8, H, W), positive mask (H, W)."""
    h, w = grid.shape
    hm = np.zeros((N_CLASSES, h, w))
    reg = np.zeros((REG_CHANNELS, h, w))
    pos = np.zeros((h, w), bool)
    ii = np.arange(h)[:, None]
    jj = np.arange(w)[None, :]
    for box in boxes:
        if not grid.in_range(np.array([box.center[0]]), np.array([box.center[1]]))[0]:
            continue
        k, ix, iy, r = encode_box(box, grid)
        sigma = max(min(box.size[0], box.size[1]) / grid.cell_size / 4.0, min_sigma)
        g = np.exp(-((ii - ix) ** 2 + (jj - iy) ** 2) / (2 * sigma ** 2))
        hm[k] = np.maximum(hm[k], g)
        hm[k, ix, iy] = 1.0
        reg[:, ix, iy] = r
        pos[ix, iy] = True
    return hm, reg, pos


def focal_loss(logits, target, alpha=2.0, beta=4.0):
    """Penalty-reduced focal loss, summed and normalised by the number of peaks."""
    pos = target == 1.0
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    p = torch.exp(log_p)
    pos_loss = -((1 - p) ** alpha * log_p)[pos].sum()
    neg_loss = -((1 - target) ** beta * p ** alpha * log_q)[~pos].sum()
    return (pos_loss + neg_loss) / max(1, int(pos.sum()))


def regression_loss(pred, target):
    """Smooth-L1 over (8, P) positive cells, mean per channel entry.

    A BEV box is unchanged by a half turn, so the yaw pair is scored against
    whichever of ``(sin, cos)`` and ``(-sin, -cos)`` is closer.
    """
    base = F.smooth_l1_loss(pred[:6], target[:6], reduction="none").sum(dim=0)
    yaw = F.smooth_l1_loss(pred[6:], target[6:], reduction="none").sum(dim=0)
    yaw_flip = F.smooth_l1_loss(pred[6:], -target[6:], reduction="none").sum(dim=0)
    return (base + torch.minimum(yaw, yaw_flip)).sum() / (pred.shape[1] * REG_CHANNELS)


def detection_loss(hm_logits, reg_pred, hm_target, reg_target, pos, reg_weight=1.0):
    """Per-sample loss for unbatched (3|8, H, W) predictions and targets."""
    loss = focal_loss(hm_logits, hm_target)
    if pos.any():
        loss = loss + reg_weight * regression_loss(reg_pred[:, pos], reg_target[:, pos])
    return loss


# ---------------------------------------------------------------- decoding

def local_peaks(scores, thresh):
    """Cells scoring ``>= thresh`` and strictly above all 8 neighbours; (K, H, W) -> (k, i, j) arrays."""
    s = np.asarray(scores, dtype=np.float64)
    pad = np.pad(s, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    h, w = s.shape[1:]
    nb = np.full(s.shape, -np.inf)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                nb = np.maximum(nb, pad[:, 1 + di:1 + di + h, 1 + dj:1 + dj + w])
    return np.nonzero((s >= thresh) & (s > nb))


def nms(detections, iou_thresh=0.5):
    """Greedy per-class NMS: drop any box overlapping a higher-scored one by BEV IoU > thresh."""
    keep = []
    for cls in CLASSES:
        dets = sorted((d for d in detections if d.box.cls == cls), key=lambda d: -d.score)
        if not dets:
            continue
        iou = bev_iou_matrix(np.array([d.box.bev() for d in dets]), np.array([d.box.bev() for d in dets]))
        alive = np.ones(len(dets), bool)
        for i in range(len(dets)):
            if not alive[i]:
                continue
            keep.append(dets[i])
            alive[i + 1:] &= iou[i, i + 1:] <= iou_thresh
    return sorted(keep, key=lambda d: (-d.score, CLASSES.index(d.box.cls)))


def decode(hm_logits, reg, grid, config=HeadConfig(), frame_id=""):
    """Detections from one map's (3, H, W) logits and (8, H, W) regression (numpy or tensors)."""
    hm_logits = np.asarray(hm_logits.detach() if torch.is_tensor(hm_logits) else hm_logits, dtype=np.float64)
    reg = np.asarray(reg.detach() if torch.is_tensor(reg) else reg, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-hm_logits))
    k, i, j = local_peaks(scores, config.score_thresh)
    order = np.argsort(-scores[k, i, j], kind="stable")[:config.max_detections]
    dets = []
    for o in order:
        box = decode_box(int(k[o]), int(i[o]), int(j[o]), reg[:, i[o], j[o]], grid)
        dets.append(Detection(box, float(scores[k[o], i[o], j[o]]), frame_id))
    return nms(dets, config.nms_iou)


@torch.no_grad()
def detect(fused, head, grid, frame_id=""):
    """Run ``head`` on a fused :class:`FeatureMap` and decode detections."""
    x = torch.as_tensor(np.asarray(fused.data), dtype=next(head.parameters()).dtype)[None]
    hm, reg = head(x)
    return decode(hm[0], reg[0], grid, head.config, frame_id)

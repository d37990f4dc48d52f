"""Motion mask, point-level motion compensation and multi-frame accumulation."""
import logging
from dataclasses import dataclass

import numpy as np

from ..core import EPS, T, V_ABS, transform_to_frame
from ..errors import DegeneratePoint, InvalidAlpha, InvalidTau
from .pointnet import MotionFeatures, mos_forward, velocity_encode

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class MotionMask:
    labels: np.ndarray  # 0 static, 1 moving
    probs: np.ndarray   # moving probability

    def __len__(self):
        return len(self.labels)


def predict_mask(probs, alpha=DEFAULT_ALPHA):
    """Threshold moving probabilities: moving iff ``p >= alpha``.

    ``probs`` may be the (N,) moving column or the full (N, 2) softmax.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha}")
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, 1]
    return MotionMask((p >= alpha).astype(np.int8), p)


def compensate(cloud, mask, tau, f_t=0, strict=True):
    """Move every masked point along its line of sight by ``v_abs * tau * (f_t - t)``.

    ``cloud`` is a 7- or 10-column radar cloud whose ``t`` column holds the
    source frame index. Unmasked rows are returned bit-identical; all other
    columns, including ``t``, are carried through. A masked point at the
    sensor origin raises :class:`DegeneratePoint` when ``strict``; otherwise
    it is left in place and counted in the log.
    """
    if not tau > 0:
        raise InvalidTau(f"tau must be > 0, got {tau}")
    cloud = np.asarray(cloud, dtype=np.float64)
    m = np.asarray(mask.labels if isinstance(mask, MotionMask) else mask).astype(bool)
    if len(m) != len(cloud):
        raise ValueError(f"mask length {len(m)} != cloud length {len(cloud)}")
    out = cloud.copy()
    if not m.any():
        return out
    idx = np.flatnonzero(m)
    p = cloud[idx, :3]
    norm = np.linalg.norm(p, axis=1)
    bad = norm <= EPS
    if bad.any():
        if strict:
            raise DegeneratePoint(f"{int(bad.sum())} moving point(s) at the sensor origin")
        log.warning("left %d moving point(s) at the sensor origin uncompensated", int(bad.sum()))
        idx, p, norm = idx[~bad], p[~bad], norm[~bad]
    u = p / norm[:, None]
    gap = f_t - cloud[idx, T]
    step = (tau * gap * cloud[idx, V_ABS])[:, None] * u
    out[idx, :3] = p + step
    return out


@dataclass
class Accumulation:
    cloud: np.ndarray           # compensated (N, 7), target-frame coordinates
    stacked: np.ndarray         # ego-compensated only (N, 7)
    labels: np.ndarray          # simulator motion labels (N,)
    mask: MotionMask
    features: MotionFeatures = None
    frame_index: int = 0


def stack_frames(seq, k, target=None):
    """Ego-compensated stack of the ``k`` frames ending at ``target`` (default: last)."""
    target = len(seq) - 1 if target is None else int(target)
    if k < 1:
        raise ValueError("K must be >= 1")
    if target - k + 1 < 0 or target >= len(seq):
        raise ValueError(f"K={k} frames ending at {target} exceed the {len(seq)} available")
    dst = seq[target]
    parts, labels = [], []
    for f in range(target - k + 1, target + 1):
        fr = seq[f]
        pts = transform_to_frame(fr.radar, fr.pose, dst.pose)
        pts[:, T] = f - target
        parts.append(pts)
        labels.append(fr.labels)
    return np.concatenate(parts), np.concatenate(labels).astype(np.int8)


def accumulate(seq, k, net=None, alpha=DEFAULT_ALPHA, target=None, mask=None, tau=None,
               compensate_motion=True, strict=False, plan=None):
    """Stack the last ``k`` frames into the target frame and compensate moving points.

    The motion mask comes from ``mask`` if given (e.g. simulator labels),
    otherwise from one MOS pass of ``net`` over the whole stack. With neither,
    nothing is compensated.
    """
    target = len(seq) - 1 if target is None else int(target)
    stacked, labels = stack_frames(seq, k, target)
    tau = seq.config.frame_period if tau is None else tau
    features = None
    if mask is not None:
        mm = mask if isinstance(mask, MotionMask) else MotionMask(
            np.asarray(mask).astype(np.int8), np.asarray(mask, dtype=np.float64))
    elif net is not None:
        features, probs = mos_forward(velocity_encode(stacked), net, plan)
        mm = predict_mask(probs, alpha)
    else:
        mm = MotionMask(np.zeros(len(stacked), dtype=np.int8), np.zeros(len(stacked)))
    cloud = compensate(stacked, mm, tau, 0, strict) if compensate_motion else stacked.copy()
    return Accumulation(cloud, stacked, labels, mm, features, target)

"""Moving-object-segmentation training and the velocity-threshold baseline."""
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..core import V_ABS
from ..errors import DegenerateLabels, EmptyDataset
from ..evaluation import mos_metrics
from ..training import TrainConfig, fit
from .compensation import predict_mask, stack_frames
from .pointnet import Plan, mos_forward, velocity_encode

THRESHOLD_BASELINE = 1.0  # m/s


@dataclass
class MosSample:
    enhanced: np.ndarray
    labels: np.ndarray
    plan: Plan


def windows(seq, k):
    """Target frame indices with ``k`` frames of history."""
    return range(k - 1, len(seq))


def build_samples(sequences, net, k=5, every=1):
    """One sample per accumulation window: the ego-compensated stack and its labels."""
    out = []
    for seq in sequences:
        for t in list(windows(seq, k))[::every]:
            stacked, labels = stack_frames(seq, k, t)
            enh = velocity_encode(stacked)
            out.append(MosSample(enh, labels, net.plan(enh[:, :3])))
    return out


def class_weights(labels):
    """Inverse-frequency weights over the classes present in ``labels``."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2).astype(np.float64)
    present = counts > 0
    w = np.zeros(2)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def train_mos(net, samples, cfg=TrainConfig(), history=None, start_epoch=0, optimizer=None, on_epoch=None):
    """Class-balanced cross-entropy with AdamW; returns ``(net, history)``.

    ``samples`` is a list of :class:`MosSample` (see :func:`build_samples`).
    """
    if not samples:
        raise EmptyDataset("no MOS training samples")
    all_labels = np.concatenate([s.labels for s in samples])
    if len(np.unique(all_labels)) < 2:
        warnings.warn("training labels contain a single class", DegenerateLabels, stacklevel=2)
    dtype = next(net.parameters()).dtype
    xs = [torch.as_tensor(s.enhanced, dtype=dtype) for s in samples]
    ys = [torch.as_tensor(s.labels, dtype=torch.long) for s in samples]
    net.train()

    def batch_loss(batch, epoch, step):
        w = torch.as_tensor(class_weights(np.concatenate([samples[i].labels for i in batch])), dtype=dtype)
        total = sum(float(w[ys[i]].sum()) for i in batch)
        loss = 0.0
        for i in batch:
            logits = net(xs[i], samples[i].plan)[0]
            loss = loss + F.cross_entropy(logits, ys[i], weight=w, reduction="sum")
        return loss / total

    history, optimizer = fit(list(net.parameters()), batch_loss, len(samples), cfg, "mos-shuffle",
                             history, start_epoch, optimizer, on_epoch)
    return net, history


def predict_samples(net, samples, alpha=0.5):
    masks = []
    for s in samples:
        _, probs = mos_forward(s.enhanced, net, s.plan)
        masks.append(predict_mask(probs, alpha).labels)
    return masks


def threshold_mask(cloud, threshold=THRESHOLD_BASELINE):
    """Baseline segmentation: moving iff ``|v_abs| > threshold``."""
    return (np.abs(np.asarray(cloud)[:, V_ABS]) > threshold).astype(np.int8)


def evaluate_mos(net, samples, alpha=0.5):
    pred = np.concatenate(predict_samples(net, samples, alpha))
    labels = np.concatenate([s.labels for s in samples])
    return mos_metrics(pred, labels)


def evaluate_threshold(samples, threshold=THRESHOLD_BASELINE):
    pred = np.concatenate([threshold_mask(s.enhanced, threshold) for s in samples])
    labels = np.concatenate([s.labels for s in samples])
    return mos_metrics(pred, labels)

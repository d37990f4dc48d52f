"""Shared optimisation loop: AdamW, seeded per-epoch shuffles, resumable state.

Everything that varies between epochs is derived from ``(seed, stream,
epoch)`` so a run resumed from an epoch checkpoint is bit-identical to an
uninterrupted one.
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .scene import named_rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 0.003
    weight_decay: float = 0.01
    seed: int = 0
    schedule: str = "cosine"  # or "constant"
    warmup: float = 0.0       # fraction of all steps with a linear ramp up to lr
    grad_clip: float = 0.0    # max global gradient norm; 0 disables

    def lr_at(self, step, total):
        if total <= 0:
            return self.lr
        ramp = int(round(self.warmup * total))
        scale = min(1.0, (step + 1) / ramp) if ramp > 0 else 1.0
        if self.schedule == "constant":
            return self.lr * scale
        if self.schedule != "cosine":
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        return scale * 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class History:
    step_loss: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)

    def smoothed(self, window=10):
        x = np.asarray(self.step_loss, dtype=np.float64)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def make_optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def fit(params, batch_loss, n_items, cfg, stream, history=None, start_epoch=0, optimizer=None,
        on_epoch=None):
    """Minimise ``batch_loss(indices, epoch, step)`` over shuffled mini-batches.

    ``params`` is the list of trainable tensors. Returns ``(history, optimizer)``.
    """
    history = history or History()
    params = [p for p in params if p.requires_grad]
    if optimizer is None:
        optimizer = make_optimizer(params, cfg)
    step = len(history.step_loss)
    per_epoch = math.ceil(n_items / cfg.batch_size)
    total = per_epoch * cfg.epochs
    for epoch in range(start_epoch, cfg.epochs):
        order = named_rng(cfg.seed, stream, epoch).permutation(n_items)
        losses = []
        for b in range(0, n_items, cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            for g in optimizer.param_groups:
                g["lr"] = cfg.lr_at(step, total)
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(batch, epoch, step)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            val = float(loss.detach())
            history.step_loss.append(val)
            losses.append(val)
            step += 1
        history.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if on_epoch is not None:
            on_epoch(epoch + 1, optimizer, history)
    return history, optimizer


def optimizer_tensors(optimizer, names):
    """Flatten AdamW state into named float32 tensors (for the weight container)."""
    out = {}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for p, name in zip(params, names):
        st = optimizer.state.get(p)
        if not st:
            continue
        out[f"optim/{name}/exp_avg"] = st["exp_avg"].detach().float()
        out[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().float()
        out[f"optim/{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def load_optimizer_tensors(optimizer, names, tensors):
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for p, name in zip(params, names):
        key = f"optim/{name}/exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"optim/{name}/step"].reshape(-1)[0])),
            "exp_avg": torch.as_tensor(tensors[key]).to(p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(tensors[f"optim/{name}/exp_avg_sq"]).to(p.dtype).clone(),
        }

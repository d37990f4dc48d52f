"""MKWT: a small versioned binary container of named float32 tensors.

Layout (little-endian)::

    b"MKWT" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
    count x ( u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data )
"""
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .core import FeatureMap
from .errors import FormatError, VersionMismatch
from .training import load_optimizer_tensors, optimizer_tensors

MAGIC = b"MKWT"
VERSION = 1


def _f32(t):
    a = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.array(a, dtype="<f4", order="C")


def dumps(tensors, meta=None):
    meta_b = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _f32(tensors[name])
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    """Returns ``(tensors: {name: float32 ndarray}, meta: dict)``."""
    mv = memoryview(buf)
    if bytes(mv[:4]) != MAGIC:
        raise FormatError("not an MKWT container (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", mv, 4)
        if version != VERSION:
            raise VersionMismatch(f"MKWT version {version} is not supported (expected {VERSION})")
        off = 12
        meta = json.loads(bytes(mv[off:off + meta_len]).decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", mv, off)
        off += 4
        out = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", mv, off)
            off += 2
            name = bytes(mv[off:off + nl]).decode("utf-8")
            off += nl
            (ndim,) = struct.unpack_from("<B", mv, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", mv, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 4 * n > len(mv):
                raise FormatError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(mv[off:off + 4 * n], dtype="<f4").reshape(shape).astype(np.float32)
            off += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt MKWT container: {exc}") from exc
    if off != len(mv):
        raise FormatError(f"{len(mv) - off} trailing bytes after the last tensor")
    return out, meta


def save(path, tensors, meta=None):
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------- modules

def module_tensors(module, prefix=""):
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module, tensors, prefix="", strict=True):
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing and strict:
        raise FormatError(f"container lacks {len(missing)} tensor(s), e.g. {missing[0]!r}")
    new = {}
    for k, v in state.items():
        if prefix + k not in tensors:
            continue
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise FormatError(f"tensor {k!r} has shape {arr.shape}, module expects {tuple(v.shape)}")
        new[k] = torch.as_tensor(arr).to(v.dtype)
    module.load_state_dict(new, strict=False)
    return module


def param_names(module, prefix=""):
    return [prefix + n for n, p in module.named_parameters() if p.requires_grad]


def save_checkpoint(path, modules, meta, optimizer=None):
    """``modules``: ``{prefix: nn.Module}``; the optimizer state is stored under ``optim/``."""
    tensors = {}
    names = []
    for prefix, m in modules.items():
        tensors.update(module_tensors(m, prefix + "/"))
        names += param_names(m, prefix + "/")
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer, names))
    save(path, tensors, meta)


def load_checkpoint(path, modules, optimizer=None):
    tensors, meta = load(path)
    names = []
    for prefix, m in modules.items():
        load_module_tensors(m, tensors, prefix + "/")
        names += param_names(m, prefix + "/")
    if optimizer is not None:
        load_optimizer_tensors(optimizer, names, tensors)
    return meta


# ---------------------------------------------------------------- feature maps

def save_feature_map(path, fm, name="data"):
    save(path, {name: fm.data}, {"kind": "feature_map", "grid_origin": list(fm.grid_origin),
                                 "cell_size": fm.cell_size})


def load_feature_map(path, name="data"):
    tensors, meta = load(path)
    return FeatureMap(tensors[name].astype(np.float64), tuple(meta.get("grid_origin", (0.0, 0.0))),
                      float(meta.get("cell_size", 0.32)))

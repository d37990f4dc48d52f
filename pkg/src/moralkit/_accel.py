"""Backend switch for the geometry kernels.

Set ``MORALKIT_NO_NUMBA=1`` to force the pure-numpy code paths (useful for
debugging and for the kernel benchmark). ``MORALKIT_THREADS`` caps internal
parallelism (the kernels are serial; it sets the torch thread pool).
Outputs never depend on it.
"""
import os

_FLAG = os.environ.get("MORALKIT_NO_NUMBA", "").strip().lower()

try:
    if _FLAG in ("1", "true", "yes"):
        raise ImportError("numba disabled via MORALKIT_NO_NUMBA")
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def njit(fn):
    """``numba.njit(cache=True)`` when numba is enabled, else identity."""
    if HAS_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def thread_count():
    raw = os.environ.get("MORALKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def configure_threads():
    n = thread_count()
    import torch

    torch.set_num_threads(n)
    return n

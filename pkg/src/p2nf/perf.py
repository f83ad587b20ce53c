"""Process-level performance knobs: allocator tuning and thread caps."""

from __future__ import annotations

import ctypes
import logging
import os

logger = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator():
    """Keep large freed buffers in the heap instead of unmapping them.

    Training graphs allocate and free many ~16 MB activation arrays per
    step; with glibc defaults those round-trip through mmap/munmap and every
    reuse pays a kernel zero-fill pass.  Raising the mmap and trim
    thresholds lets the heap recycle the buffers.  No-op on non-glibc
    platforms.
    """
    global _tuned
    if _tuned:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) and \
            libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except OSError:
        ok = False
    if ok:
        _tuned = True
    else:
        logger.debug("allocator tuning unavailable on this platform")
    return bool(ok)


def limit_threads(n):
    """Cap BLAS worker threads; returns the applied limit or None."""
    if n is None:
        env = os.environ.get("P2N_THREADS")
        if not env:
            return None
        n = int(env)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(n))
        return int(n)
    except Exception:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(n))
        return int(n)

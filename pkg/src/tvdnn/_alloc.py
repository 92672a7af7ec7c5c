"""Process-wide allocator tuning for array-heavy loops.

Rollout tapes allocate many ~0.5-1.5 MB temporaries.  glibc serves blocks
above its mmap threshold straight from mmap, so every one costs a syscall
plus page faults; raising the threshold lets those blocks recycle through
the heap.  No-op where mallopt is unavailable.
"""

from __future__ import annotations

import ctypes

_done = False

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator():
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 26)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 26)
    except (OSError, AttributeError):
        pass

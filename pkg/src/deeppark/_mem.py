"""glibc malloc tuning for the training hot loop.

Training allocates tens of MB of fresh numpy buffers per optimization step;
with default glibc thresholds those arrive via mmap, get returned to the
kernel on free, and every step refaults zeroed pages.  Keeping large blocks
on the heap makes the allocator reuse them, which is worth several x on
machines with slow memory.  Set DEEPPARK_NO_MALLOC_TUNE=1 to skip.
"""

import ctypes
import os

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3
M_MMAP_MAX = -4


def tune_malloc() -> bool:
    if os.environ.get("DEEPPARK_NO_MALLOC_TUNE"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(M_MMAP_MAX, 0)
        return True
    except OSError:
        return False

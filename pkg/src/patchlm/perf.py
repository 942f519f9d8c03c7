"""Process-level performance knobs."""

from __future__ import annotations

_TUNED = False


def tune_malloc() -> bool:
    """Keep large numpy buffers inside the malloc arena.

    Training churns through multi-MB activation buffers every step; with
    glibc defaults those are mmap'd and returned to the kernel on free, so
    every step pays page-zeroing faults again. Raising the mmap and trim
    thresholds makes the allocator reuse the pages. No-op off glibc.
    """
    global _TUNED
    if _TUNED:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        ok = libc.mallopt(-3, 1 << 29) == 1  # M_MMAP_THRESHOLD
        ok = libc.mallopt(-1, 1 << 30) == 1 and ok  # M_TRIM_THRESHOLD
        _TUNED = ok
        return ok
    except OSError:
        return False

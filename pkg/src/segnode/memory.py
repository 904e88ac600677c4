"""Logical activation accounting.

Every :class:`~segnode.autodiff.Tensor` created while a tracker is installed
reports its buffer size here, and so does every tape node holding arrays
saved for its backward pass.  Releases are observed through
``weakref.finalize``, so the peak is a property of the program's reference
structure rather than of the allocator.
"""
from __future__ import annotations

import time
import weakref
from dataclasses import dataclass
from typing import Any, Callable, Optional

_active: Optional["MemoryTracker"] = None


class MemoryTracker:
    def __init__(self) -> None:
        self.live_bytes = 0
        self.live_count = 0
        self.peak_bytes = 0
        self.peak_count = 0

    def track(self, owner: Any, nbytes: int) -> None:
        self.live_bytes += nbytes
        self.live_count += 1
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        if self.live_count > self.peak_count:
            self.peak_count = self.live_count
        weakref.finalize(owner, self._release, nbytes)

    def _release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes
        self.live_count -= 1


def active_tracker() -> Optional[MemoryTracker]:
    return _active


@dataclass
class MemoryReport:
    peak_activation_bytes: int
    peak_activation_tensors: int
    param_bytes: int
    nfe: int
    wall_time: float


def memory_probe(run: Callable[[], Any], param_bytes: int = 0) -> MemoryReport:
    """Run ``run()`` with activation accounting and report the logical peak.

    Only buffers allocated inside ``run`` are counted.  If ``run`` returns an
    object with an ``nfe`` attribute (or an int) it is reported as the NFE.
    """
    global _active
    if _active is not None:
        raise RuntimeError("memory_probe calls cannot be nested")
    tracker = MemoryTracker()
    _active = tracker
    start = time.perf_counter()
    try:
        result = run()
    finally:
        _active = None
    wall = time.perf_counter() - start
    if isinstance(result, int):
        nfe = result
    else:
        nfe = int(getattr(result, "nfe", 0) or 0)
    return MemoryReport(
        peak_activation_bytes=tracker.peak_bytes,
        peak_activation_tensors=tracker.peak_count,
        param_bytes=param_bytes,
        nfe=nfe,
        wall_time=wall,
    )

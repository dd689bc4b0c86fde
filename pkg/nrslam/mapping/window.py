from typing import Iterator, List, Optional

from nrslam.tracking.state import FrameState


class KeyframeWindow:
    """Sliding window of the most recent keyframes, oldest first."""

    def __init__(self, size: int = 7):
        if size < 1:
            raise ValueError(f"Window size must be positive, got {size}")
        self.size = size
        self.entries: List[FrameState] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[FrameState]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> FrameState:
        return self.entries[i]

    def __repr__(self):
        return f"KeyframeWindow(size={self.size}, keyframes={self.indices})"

    @property
    def indices(self) -> List[int]:
        return [e.index for e in self.entries]

    @property
    def times(self) -> List[float]:
        return [e.time for e in self.entries]

    @property
    def latest(self) -> FrameState:
        return self.entries[-1]

    def push(self, state: FrameState) -> Optional[FrameState]:
        """Adds a keyframe and returns the marginalized one when the window overflows."""
        if self.entries and state.time < self.entries[-1].time:
            raise ValueError(f"Keyframe {state.index} is older than the newest window entry {self.entries[-1].index}")
        state.is_keyframe = True
        self.entries.append(state)
        if len(self.entries) > self.size:
            return self.entries.pop(0)
        return None

"""Uneven channel chunks and the checkerboard spatial partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_BASE = (16, 16, 32, 64)
_BASE_TOTAL = 192  # reference M used for proportional scaling below 129 channels


@dataclass(frozen=True)
class ChunkLayout:
    M: int
    sizes: tuple

    @property
    def offsets(self):
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def n_chunks(self):
        return len(self.sizes)

    def slice(self, j):
        o = self.offsets[j]
        return slice(o, o + self.sizes[j])

    def prefix(self, j):
        """Channels of chunks 0..j-1."""
        return slice(0, self.offsets[j])


def chunk_layout(M) -> ChunkLayout:
    """Five chunks ``[16, 16, 32, 64, M-128]``; below 129 channels the split is
    scaled proportionally (each chunk >= 1)."""
    if not isinstance(M, (int, np.integer)) or M < 5:
        raise ValueError(f"M must be an integer >= 5, got {M!r}")
    M = int(M)
    if M >= 129:
        sizes = _BASE + (M - 128,)
    else:
        head = [max(1, (M * b) // _BASE_TOTAL) for b in _BASE]
        while sum(head) > M - 1:
            head[int(np.argmax(head))] -= 1
        sizes = tuple(head) + (M - sum(head),)
    return ChunkLayout(M, tuple(int(s) for s in sizes))


@dataclass(frozen=True)
class CheckerboardPartition:
    anchor: np.ndarray

    @property
    def non_anchor(self):
        return ~self.anchor

    def mask(self, phase):
        if phase == "anchor":
            return self.anchor
        if phase == "non_anchor":
            return self.non_anchor
        raise ValueError(f"phase must be 'anchor' or 'non_anchor', got {phase!r}")

    def positions(self, phase):
        """Row-major (row, col) coordinates of the given phase."""
        return np.argwhere(self.mask(phase))


def checkerboard_masks(h, w) -> CheckerboardPartition:
    if h < 1 or w < 1:
        raise ValueError(f"latent dims must be >= 1, got {h}x{w}")
    yy, xx = np.indices((h, w))
    anchor = (yy + xx) % 2 == 0
    anchor.setflags(write=False)
    return CheckerboardPartition(anchor)


PHASES = ("anchor", "non_anchor")

"""Morton serialization, context windows and the space/channel coding schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_BIT_DEPTH = 21


def _spread_bits(v: np.ndarray) -> np.ndarray:
    # insert two zero bits between each of the low 21 bits
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _check_coords(p: np.ndarray, d: int):
    if not 1 <= d <= MAX_BIT_DEPTH:
        raise ValueError(f"bit depth {d} outside [1, {MAX_BIT_DEPTH}]")
    if p.size and (p.min() < 0 or p.max() >= (1 << d)):
        raise ValueError(f"coordinate out of range for bit depth {d}")


def morton_codes(cells, d: int) -> np.ndarray:
    """Vectorized Morton codes of (N, 3) integer cells: x at bit 3i, y at 3i+1, z at 3i+2."""
    p = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    _check_coords(p, d)
    return (
        _spread_bits(p[:, 0])
        | (_spread_bits(p[:, 1]) << np.uint64(1))
        | (_spread_bits(p[:, 2]) << np.uint64(2))
    )


def morton_code(p, d: int) -> int:
    return int(morton_codes(np.asarray(p).reshape(1, 3), d)[0])


def morton_decode(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64)
    return np.stack(
        [_compact_bits(c), _compact_bits(c >> np.uint64(1)), _compact_bits(c >> np.uint64(2))],
        axis=-1,
    ).astype(np.int64)


@dataclass(frozen=True)
class SerializedSequence:
    permutation: np.ndarray  # serialized position -> original index
    morton_codes: np.ndarray  # codes along the serialized order

    def __len__(self):
        return len(self.permutation)


def serialize_order(cells, d: int) -> SerializedSequence:
    codes = morton_codes(cells, d)
    # stable: equal codes keep original relative order, which the decoder relies on
    perm = np.argsort(codes, kind="stable")
    return SerializedSequence(perm, codes[perm])


def random_order(n: int, seed: int) -> SerializedSequence:
    """Random permutation, used only by the serialization ablation."""
    perm = np.random.default_rng(seed).permutation(n)
    return SerializedSequence(perm, np.zeros(n, dtype=np.uint64))


@dataclass(frozen=True)
class ContextWindow:
    start: int
    len: int

    @property
    def stop(self) -> int:
        return self.start + self.len


def partition_windows(n: int, length: int) -> list[ContextWindow]:
    if n < 1 or length < 1:
        raise ValueError("need N >= 1 and L >= 1")
    return [ContextWindow(s, min(length, n - s)) for s in range(0, n, length)]


def space_split(window_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Anchors are even 0-based positions, non-anchors odd ones."""
    if window_len < 1:
        raise ValueError("window length must be >= 1")
    return np.arange(0, window_len, 2), np.arange(1, window_len, 2)


def channel_split(channels: int, group_sizes) -> list[tuple[int, int]]:
    sizes = [int(g) for g in group_sizes]
    if any(g <= 0 for g in sizes) or sum(sizes) != channels:
        raise ValueError(f"group sizes {sizes} do not tile {channels} channels")
    bounds = np.concatenate([[0], np.cumsum(sizes)]).tolist()
    return [(bounds[i], bounds[i + 1]) for i in range(len(sizes))]


ANCHOR, NONANCHOR = 0, 1


@dataclass(frozen=True)
class GroupSchedule:
    anchor_idx: np.ndarray
    nonanchor_idx: np.ndarray
    channel_groups: tuple[tuple[int, int], ...]
    phases: tuple[tuple[int, int], ...]  # (subgroup j, ANCHOR | NONANCHOR)

    def phase_index(self, j: int, phase: int) -> int:
        return self.phases.index((j, phase))


def build_schedule(window_len: int, channels: int, group_sizes, coded=None) -> GroupSchedule:
    """Coding schedule for one window.

    ``coded`` optionally marks which window positions carry coded symbols; the
    even/odd split then runs over coded positions only (others are context).
    """
    if coded is None:
        anchors, nonanchors = space_split(window_len)
    else:
        pos = np.flatnonzero(np.asarray(coded, dtype=bool))
        anchors, nonanchors = pos[0::2], pos[1::2]
    groups = tuple(channel_split(channels, group_sizes))
    phases = []
    for j in range(len(groups)):
        phases.append((j, ANCHOR))
        if len(nonanchors):
            phases.append((j, NONANCHOR))
    return GroupSchedule(anchors, nonanchors, groups, tuple(phases))


def locality_stats(order, positions) -> dict:
    """Distances between consecutive elements of a sequence, normalized by the bbox diagonal."""
    p = np.asarray(positions, dtype=np.float64)[np.asarray(order)]
    if len(p) < 2:
        raise ValueError("need at least two points")
    diag = np.linalg.norm(p.max(axis=0) - p.min(axis=0))
    dist = np.linalg.norm(np.diff(p, axis=0), axis=1) / (diag if diag > 0 else 1.0)
    return {
        "median": float(np.median(dist)),
        "p90": float(np.percentile(dist, 90)),
        "count": int(len(dist)),
        "distances": dist,
    }

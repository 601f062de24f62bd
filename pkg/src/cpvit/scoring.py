"""Patch/head informativeness criteria and cumulative score accumulation.

Two routes exist on purpose: the sum-based oracle (weighted row+column sums
of the attention matrix, summed over heads for the layer view) and the fast
criterion used by the pruning loop (strongest incoming attention per patch,
i.e. the column maximum of the post-softmax attention). The oracle is kept
as an independent reference for ranking-agreement tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CumulativeScores",
    "oracle_patch_informativeness",
    "oracle_layer_patch_informativeness",
    "oracle_head_informativeness",
    "fast_scores",
    "literal_head_deltas",
    "accumulate",
    "segment_patches",
]


@dataclass(frozen=True)
class CumulativeScores:
    """Running patch and head scores, summed over processed layers.

    Entries are nonnegative and never decrease; pruned entities stop
    accumulating because their deltas are zero from prune time on.
    """

    patch_scores: np.ndarray
    head_scores: np.ndarray
    layers_accumulated: int = 0

    @classmethod
    def zeros(cls, seq_len: int, num_heads: int) -> "CumulativeScores":
        return cls(np.zeros(seq_len), np.zeros(num_heads), 0)


def _check_index(name: str, value: int, size: int) -> None:
    if not 0 <= value < size:
        raise IndexError(f"{name} {value} out of range [0, {size})")


def oracle_patch_informativeness(
    attention: np.ndarray, p0: int, h: int, alpha: float, beta: float
) -> float:
    """Weighted outgoing-row plus incoming-column sum for one patch, one head."""
    a = np.asarray(attention, dtype=np.float64)
    _check_index("head", h, a.shape[0])
    _check_index("patch", p0, a.shape[1])
    return float(alpha * a[h, p0, :].sum() + beta * a[h, :, p0].sum())


def oracle_layer_patch_informativeness(
    attention: np.ndarray, p0: int, alpha: float, beta: float
) -> float:
    """Sum of the per-head patch informativeness over all heads."""
    a = np.asarray(attention, dtype=np.float64)
    return float(
        sum(
            oracle_patch_informativeness(a, p0, h, alpha, beta)
            for h in range(a.shape[0])
        )
    )


def oracle_head_informativeness(attention: np.ndarray, h: int) -> float:
    """Full sum of one head's attention slice."""
    a = np.asarray(attention, dtype=np.float64)
    _check_index("head", h, a.shape[0])
    return float(a[h].sum())


def fast_scores(
    attention: np.ndarray,
    alive_patches: np.ndarray,
    alive_heads: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer score deltas from the attention-probability column maxima.

    patch delta = sum over alive heads of the strongest incoming attention
    to that patch; head delta = sum over alive patches of that head's
    per-patch maxima. Pruned patches and heads receive delta 0.
    """
    a = np.asarray(attention, dtype=np.float64)
    patches = np.asarray(alive_patches, dtype=bool)
    heads = np.asarray(alive_heads, dtype=bool)
    if a.ndim != 3 or patches.shape != (a.shape[2],) or heads.shape != (a.shape[0],):
        raise ValueError(
            f"shapes disagree: attention {a.shape}, patches {patches.shape}, "
            f"heads {heads.shape}"
        )
    col_max = a.max(axis=1)  # (H, L): strongest incoming attention per patch
    col_max = col_max * heads[:, None] * patches[None, :]
    patch_deltas = col_max.sum(axis=0)
    head_deltas = col_max.sum(axis=1)
    return patch_deltas, head_deltas


def literal_head_deltas(
    attention: np.ndarray,
    alive_patches: np.ndarray,
    alive_heads: np.ndarray,
    patch_scores: np.ndarray,
) -> np.ndarray:
    """Head deltas under the running-total reading of the accumulation loop:
    each head adds the sum of the cumulative patch scores as they stand after
    that head's column maxima have been added (loop-order dependent; kept for
    comparison, not the default)."""
    a = np.asarray(attention, dtype=np.float64)
    patches = np.asarray(alive_patches, dtype=bool)
    heads = np.asarray(alive_heads, dtype=bool)
    running = np.asarray(patch_scores, dtype=np.float64).copy()
    deltas = np.zeros(a.shape[0])
    col_max = a.max(axis=1) * patches[None, :]
    for h in range(a.shape[0]):
        if not heads[h]:
            continue
        running = running + col_max[h]
        deltas[h] = running.sum()
    return deltas


def accumulate(
    scores: CumulativeScores,
    patch_deltas: np.ndarray,
    head_deltas: np.ndarray,
    alive_patches: np.ndarray | None = None,
    alive_heads: np.ndarray | None = None,
) -> CumulativeScores:
    """Elementwise add; entries of pruned entities stay frozen."""
    pd = np.asarray(patch_deltas, dtype=np.float64)
    hd = np.asarray(head_deltas, dtype=np.float64)
    if alive_patches is not None:
        pd = pd * np.asarray(alive_patches, dtype=np.float64)
    if alive_heads is not None:
        hd = hd * np.asarray(alive_heads, dtype=np.float64)
    if (pd < 0).any() or (hd < 0).any():
        raise ValueError("score deltas must be nonnegative")
    return CumulativeScores(
        patch_scores=scores.patch_scores + pd,
        head_scores=scores.head_scores + hd,
        layers_accumulated=scores.layers_accumulated + 1,
    )


def segment_patches(attention: np.ndarray, num_segments: int = 3) -> list[list[int]]:
    """Partition patches into rank bands of average incoming attention.

    Patches are sorted ascending by the mean (over heads and rows) of their
    incoming attention, then split into ``num_segments`` contiguous bands of
    near-equal size, the remainder going to the highest bands. Segment 0 of
    the returned list holds the smallest averages. Ties break by patch index.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected (H, L, L) attention, got shape {a.shape}")
    length = a.shape[2]
    if num_segments < 2:
        raise ValueError("num_segments must be >= 2")
    if length < num_segments:
        raise ValueError(f"cannot split {length} patches into {num_segments} segments")
    averages = a.mean(axis=(0, 1))  # mean incoming attention per patch
    order = sorted(range(length), key=lambda p: (averages[p], p))
    base, rem = divmod(length, num_segments)
    segments: list[list[int]] = []
    start = 0
    for s in range(num_segments):
        size = base + (1 if s >= num_segments - rem else 0)
        segments.append(sorted(order[start : start + size]))
        start += size
    return segments

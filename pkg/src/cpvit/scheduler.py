"""Layer-aware pruning-ratio scheduling from sampled attention range.

Per layer: draw k row ordinates, find each sampled row's argmax column per
head, count a short-range hit when the argmax lies within ``delta`` of the
row index, and shrink the estimated attention range accordingly:
``L_hat = 1 - eta * C_sr / (k * heads_counted)``. The cumulative patch ratio
then grows by ``r * L_hat`` per layer, capped at ``r_max``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "SchedulerParams",
    "RatioState",
    "estimate_attention_range",
    "next_ratio",
    "head_ratio",
    "params_for_target",
]


@dataclass(frozen=True)
class SchedulerParams:
    """Knobs of the ratio scheduler.

    ``r`` is the base per-layer ratio increment; ``delta`` the short-range
    offset in patch-index units; ``eta`` the correction factor scaling how
    strongly short-range layers suppress pruning. ``exhaustive`` replaces
    sampling with ordinates 0..L-1 (deterministic test mode);
    ``single_head`` restricts counting to head 0 for literal fidelity;
    ``exclude_cls_row`` drops row 0 from the ordinate pool.
    """

    k: int = 32
    delta: int = 2
    eta: float = 1.0
    r: float = 0.0
    rng_seed: int = 0
    r_max: float = 0.95
    head_ratio_coeff: float = 0.5
    exhaustive: bool = False
    single_head: bool = False
    exclude_cls_row: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if not 0.0 <= self.r < 1.0:
            raise ValueError("r must be in [0, 1)")
        if not 0.0 <= self.r_max < 1.0:
            raise ValueError("r_max must be in [0, 1)")
        if not 0.0 <= self.head_ratio_coeff <= 1.0:
            raise ValueError("head_ratio_coeff must be in [0, 1]")


def params_for_target(
    target_ratio: float, num_layers: int, **overrides
) -> SchedulerParams:
    """Map a terminal cumulative patch ratio onto the per-layer increment."""
    if not 0.0 <= target_ratio < 1.0:
        raise ValueError("target_ratio must be in [0, 1)")
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    return SchedulerParams(r=target_ratio / num_layers, **overrides)


@dataclass(frozen=True)
class RatioState:
    """Cumulative patch ratio so far plus per-layer history rows
    (C_sr, L_hat, r_l)."""

    r_prev: float = 0.0
    history: tuple[tuple[int, float, float], ...] = field(default_factory=tuple)


def estimate_attention_range(
    attention: np.ndarray,
    params: SchedulerParams,
    rng: np.random.Generator | None = None,
    alive_heads: np.ndarray | None = None,
) -> tuple[int, float]:
    """Estimate (C_sr, L_hat) for one layer's (H, L, L) attention.

    Ordinates are sampled uniformly with replacement from the row pool and
    each is checked against every counted head, so the counter's denominator
    is ``len(ordinates) * heads_counted``.
    """
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"expected (H, L, L) attention, got shape {a.shape}")
    length = a.shape[1]
    if params.single_head:
        heads = np.array([0])
    elif alive_heads is not None:
        heads = np.flatnonzero(np.asarray(alive_heads))
        if heads.size == 0:
            raise ValueError("no surviving heads")
    else:
        heads = np.arange(a.shape[0])
    low = 1 if params.exclude_cls_row else 0
    if low >= length:
        raise ValueError("no rows available for sampling")
    if params.exhaustive:
        ordinates = np.arange(low, length)
    else:
        if rng is None:
            rng = np.random.default_rng(params.rng_seed)
        ordinates = rng.integers(low, length, size=params.k)
    argmax_cols = a[heads][:, ordinates, :].argmax(axis=2)  # (heads, samples)
    short = np.abs(argmax_cols - ordinates[None, :]) <= params.delta
    c_sr = int(short.sum())
    denom = len(ordinates) * len(heads)
    l_hat = 1.0 - params.eta * c_sr / denom
    return c_sr, l_hat


def next_ratio(
    state: RatioState,
    l_hat: float,
    params: SchedulerParams,
    c_sr: int = 0,
) -> RatioState:
    """Advance the cumulative patch ratio: r_l = min(r_prev + r*L_hat, r_max)."""
    r_l = min(state.r_prev + params.r * l_hat, params.r_max)
    return RatioState(
        r_prev=r_l, history=state.history + ((c_sr, l_hat, r_l),)
    )


def head_ratio(state: RatioState, params: SchedulerParams, num_heads: int) -> float:
    """Head pruning ratio: coeff * r_l, clamped so one head always survives."""
    if num_heads < 1:
        raise ValueError("num_heads must be >= 1")
    return min(params.head_ratio_coeff * state.r_prev, (num_heads - 1) / num_heads)

"""Binary patch/head survival masks with cascade (monotone-shrink) semantics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MaskError", "CascadeMask"]


class MaskError(ValueError):
    """A mask violates the survival invariants."""


@dataclass(frozen=True, eq=False)
class CascadeMask:
    """Per-layer survival mask: 1 = alive, 0 = pruned.

    Invariants enforced at construction: the classification token (patch 0)
    is always alive, at least two patches (CLS plus one content patch)
    survive, and at least one head survives. Monotone shrinkage across
    layers is checked by :meth:`shrinks`.
    """

    patch_mask: np.ndarray
    head_mask: np.ndarray
    layer_index: int = -1

    def __post_init__(self) -> None:
        patch = np.asarray(self.patch_mask)
        head = np.asarray(self.head_mask)
        if patch.ndim != 1 or head.ndim != 1:
            raise MaskError("masks must be 1-D")
        if not np.isin(patch, (0, 1)).all() or not np.isin(head, (0, 1)).all():
            raise MaskError("masks must be binary")
        patch = np.ascontiguousarray(patch, dtype=np.uint8)
        head = np.ascontiguousarray(head, dtype=np.uint8)
        if patch.size < 2:
            raise MaskError("patch mask needs at least CLS plus one content patch")
        if patch[0] != 1:
            raise MaskError("classification token (patch 0) must stay alive")
        if int(patch.sum()) < 2:
            raise MaskError("fewer than 2 surviving patches")
        if head.size < 1 or int(head.sum()) < 1:
            raise MaskError("no surviving heads")
        patch.setflags(write=False)
        head.setflags(write=False)
        object.__setattr__(self, "patch_mask", patch)
        object.__setattr__(self, "head_mask", head)

    @classmethod
    def all_alive(cls, seq_len: int, num_heads: int, layer_index: int = -1) -> "CascadeMask":
        return cls(
            patch_mask=np.ones(seq_len, dtype=np.uint8),
            head_mask=np.ones(num_heads, dtype=np.uint8),
            layer_index=layer_index,
        )

    @property
    def alive_patches(self) -> int:
        return int(self.patch_mask.sum())

    @property
    def alive_heads(self) -> int:
        return int(self.head_mask.sum())

    def shrinks(self, prev: "CascadeMask") -> bool:
        """True when this mask's survivors are a subset of prev's survivors."""
        return bool(
            (self.patch_mask <= prev.patch_mask).all()
            and (self.head_mask <= prev.head_mask).all()
        )

    def same_survivors(self, other: "CascadeMask") -> bool:
        return bool(
            np.array_equal(self.patch_mask, other.patch_mask)
            and np.array_equal(self.head_mask, other.head_mask)
        )

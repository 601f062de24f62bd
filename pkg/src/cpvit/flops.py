"""Analytical FLOPs model for MHSA and FFN under patch/head survival counts.

One multiply-add counts as 2 FLOPs; softmax, layer norm, GELU, bias adds,
the patch embedding and the classifier are excluded (encoder blocks only).
For a layer with L' surviving patches and H' surviving heads:

    mhsa = 2*L'*E*(3*H'*D)   QKV projections, pruned-head columns skipped
         + 2*H'*L'^2*D       attention scores
         + 2*H'*L'^2*D       probability-times-V
         + 2*L'*(H'*D)*E     output projection
    ffn  = 2*L'*E*F + 2*L'*F*E

The model is validated elsewhere against a multiply-accumulate counter
instrumented into the tensor kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import EncoderConfig

__all__ = ["FlopsReport", "LayerFlops", "layer_flops", "report_from_counts"]


def layer_flops(
    config: EncoderConfig, alive_patches: int, alive_heads: int
) -> tuple[int, int]:
    """(mhsa, ffn) FLOPs of one encoder block at the given survivor counts."""
    lp, hp = alive_patches, alive_heads
    if not 1 <= lp <= config.seq_len:
        raise ValueError(
            f"alive_patches {lp} outside [1, {config.seq_len}]"
        )
    if not 1 <= hp <= config.num_heads:
        raise ValueError(
            f"alive_heads {hp} outside [1, {config.num_heads}]"
        )
    e, d, f = config.embed_dim, config.head_dim, config.ffn_hidden
    mhsa = (
        2 * lp * e * (3 * hp * d)
        + 2 * hp * lp * lp * d
        + 2 * hp * lp * lp * d
        + 2 * lp * (hp * d) * e
    )
    ffn = 2 * lp * e * f + 2 * lp * f * e
    return mhsa, ffn


@dataclass(frozen=True)
class LayerFlops:
    layer: int
    alive_patches: int
    alive_heads: int
    dense_mhsa: int
    dense_ffn: int
    pruned_mhsa: int
    pruned_ffn: int


@dataclass(frozen=True)
class FlopsReport:
    """Per-layer dense vs pruned operation counts plus the saving percentage."""

    layers: tuple[LayerFlops, ...]

    @property
    def dense_total(self) -> int:
        return sum(l.dense_mhsa + l.dense_ffn for l in self.layers)

    @property
    def pruned_total(self) -> int:
        return sum(l.pruned_mhsa + l.pruned_ffn for l in self.layers)

    @property
    def saving_percent(self) -> float:
        return 100.0 * (1.0 - self.pruned_total / self.dense_total)

    def to_json_dict(self) -> dict:
        return {
            "layers": [
                {
                    "layer": l.layer,
                    "alive_patches": l.alive_patches,
                    "alive_heads": l.alive_heads,
                    "dense_mhsa": l.dense_mhsa,
                    "dense_ffn": l.dense_ffn,
                    "pruned_mhsa": l.pruned_mhsa,
                    "pruned_ffn": l.pruned_ffn,
                }
                for l in self.layers
            ],
            "dense_total": self.dense_total,
            "pruned_total": self.pruned_total,
            "saving_percent": self.saving_percent,
        }

    def to_csv_rows(self) -> list[list]:
        header = [
            "layer", "alive_patches", "alive_heads",
            "dense_mhsa", "dense_ffn", "pruned_mhsa", "pruned_ffn",
        ]
        rows: list[list] = [header]
        for l in self.layers:
            rows.append(
                [l.layer, l.alive_patches, l.alive_heads,
                 l.dense_mhsa, l.dense_ffn, l.pruned_mhsa, l.pruned_ffn]
            )
        rows.append(
            ["total", "", "", self.dense_total, "", self.pruned_total,
             f"saving_percent={self.saving_percent:.4f}"]
        )
        return rows


def report_from_counts(
    config: EncoderConfig, survivor_counts: list[tuple[int, int]]
) -> FlopsReport:
    """Build a report from per-layer (alive_patches, alive_heads) counts.

    Each layer's pruned cost is modeled at that layer's post-prune survivor
    counts; the dense baseline always uses the full L and H of the same model.
    """
    if len(survivor_counts) != config.num_layers:
        raise ValueError(
            f"expected {config.num_layers} survivor counts, "
            f"got {len(survivor_counts)}"
        )
    dense_mhsa, dense_ffn = layer_flops(config, config.seq_len, config.num_heads)
    layers = []
    for i, (lp, hp) in enumerate(survivor_counts):
        mhsa, ffn = layer_flops(config, lp, hp)
        layers.append(
            LayerFlops(
                layer=i, alive_patches=lp, alive_heads=hp,
                dense_mhsa=dense_mhsa, dense_ffn=dense_ffn,
                pruned_mhsa=mhsa, pruned_ffn=ffn,
            )
        )
    return FlopsReport(layers=tuple(layers))

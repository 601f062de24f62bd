"""Cascade pruning driver: per layer, estimate the pruning ratio, accumulate
scores, derive thresholds by sorting, emit monotone cascade masks, and finish
the block under the shrunk mask.

Masks only ever shrink: once a patch or head is pruned at layer l, it stays
pruned (and its cumulative score frozen) for every later layer. Counts follow
the cumulative reading of the threshold rule: after layer l the total pruned
patch fraction tracks r_l, i.e. pruned count == min(floor(r_l * L), L - 2),
with the CLS token and one content patch always reserved (one head likewise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import (
    EncoderWeights,
    _apply_mask_to_probs,
    _attention_stage,
    _output_stage,
    _readout,
    forward,
)
from .flops import FlopsReport, report_from_counts
from .masks import CascadeMask
from .scheduler import (
    RatioState,
    SchedulerParams,
    estimate_attention_range,
    head_ratio,
    next_ratio,
    params_for_target,
)
from .scoring import (
    CumulativeScores,
    accumulate,
    fast_scores,
    literal_head_deltas,
    segment_patches,
)
from .tensor import DimensionError, as_tensor

__all__ = [
    "ABLATION_MODES",
    "PruneOptions",
    "LayerRecord",
    "PruneTrace",
    "RunResult",
    "prune_layer",
    "run_cp_vit",
    "run_ablation",
    "run_segment_ablation",
]

ABLATION_MODES = ("pure_random", "prediction_only", "cp_vit")


@dataclass(frozen=True)
class PruneOptions:
    """Behavioral switches, all defaulting to the documented semantics.

    renormalize: re-run the softmax over surviving patches after pruning
    (off = keep the raw probabilities with pruned columns zeroed).
    head_score_mode: "per_layer" sums the current layer's column maxima per
    head; "literal" adds the running cumulative patch-score total instead.
    cumulative_ratio: read the threshold count as the total fraction pruned
    so far; off = prune floor(r_l * L) additional entities per layer (the
    over-pruning alternative, kept for comparison).
    """

    renormalize: bool = True
    head_score_mode: str = "per_layer"
    cumulative_ratio: bool = True

    def __post_init__(self) -> None:
        if self.head_score_mode not in ("per_layer", "literal"):
            raise ValueError(f"unknown head_score_mode {self.head_score_mode!r}")


@dataclass(frozen=True)
class LayerRecord:
    """Everything decided at one layer: ratios, thresholds, the mask, and a
    snapshot of the cumulative scores after accumulation."""

    layer: int
    c_sr: int
    l_hat: float
    r_p: float
    r_h: float
    epsilon_p: float
    epsilon_h: float
    mask: CascadeMask
    patch_scores: np.ndarray
    head_scores: np.ndarray
    newly_pruned_patches: tuple[int, ...]
    newly_pruned_heads: tuple[int, ...]

    @property
    def pruned_patch_total(self) -> int:
        return int(self.mask.patch_mask.size - self.mask.alive_patches)

    @property
    def pruned_head_total(self) -> int:
        return int(self.mask.head_mask.size - self.mask.alive_heads)


@dataclass
class PruneTrace:
    mode: str
    seed: int
    params: SchedulerParams
    options: PruneOptions
    records: list[LayerRecord] = field(default_factory=list)
    logits: np.ndarray | None = None

    def masks(self) -> list[CascadeMask]:
        return [rec.mask for rec in self.records]

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "params": {
                "k": self.params.k,
                "delta": self.params.delta,
                "eta": self.params.eta,
                "r": self.params.r,
                "r_max": self.params.r_max,
                "head_ratio_coeff": self.params.head_ratio_coeff,
                "exhaustive": self.params.exhaustive,
                "single_head": self.params.single_head,
                "exclude_cls_row": self.params.exclude_cls_row,
            },
            "options": {
                "renormalize": self.options.renormalize,
                "head_score_mode": self.options.head_score_mode,
                "cumulative_ratio": self.options.cumulative_ratio,
            },
            "logits": None if self.logits is None else [float(v) for v in self.logits],
            "layers": [
                {
                    "layer": rec.layer,
                    "c_sr": rec.c_sr,
                    "l_hat": rec.l_hat,
                    "r_p": rec.r_p,
                    "r_h": rec.r_h,
                    "epsilon_p": rec.epsilon_p,
                    "epsilon_h": rec.epsilon_h,
                    "patch_mask": [int(v) for v in rec.mask.patch_mask],
                    "head_mask": [int(v) for v in rec.mask.head_mask],
                    "patch_scores": [float(v) for v in rec.patch_scores],
                    "head_scores": [float(v) for v in rec.head_scores],
                    "newly_pruned_patches": list(rec.newly_pruned_patches),
                    "newly_pruned_heads": list(rec.newly_pruned_heads),
                    "pruned_patch_total": rec.pruned_patch_total,
                    "pruned_head_total": rec.pruned_head_total,
                }
                for rec in self.records
            ],
        }

    def masks_csv_rows(self) -> list[list]:
        rows: list[list] = [["layer", "kind", "index", "alive"]]
        for rec in self.records:
            for p, v in enumerate(rec.mask.patch_mask):
                rows.append([rec.layer, "patch", p, int(v)])
            for h, v in enumerate(rec.mask.head_mask):
                rows.append([rec.layer, "head", h, int(v)])
        return rows


@dataclass
class RunResult:
    output: np.ndarray
    logits: np.ndarray | None
    trace: PruneTrace
    flops: FlopsReport


def _target_counts(ratio: float, size: int, reserved: int) -> int:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio {ratio} outside [0, 1)")
    return min(math.floor(ratio * size), size - reserved)


def prune_layer(
    scores: CumulativeScores,
    prev_mask: CascadeMask,
    r_p: float,
    r_h: float,
    layer_index: int = -1,
    cumulative: bool = True,
) -> CascadeMask:
    """Shrink the mask so the pruned totals track the given ratios.

    Alive entities are sorted ascending by (cumulative score, index) and the
    lowest are pruned; the CLS token is exempt and survivor clamps keep at
    least one head and one content patch alive.
    """
    length = prev_mask.patch_mask.size
    heads = prev_mask.head_mask.size
    target_p = _target_counts(r_p, length, reserved=2)
    target_h = _target_counts(r_h, heads, reserved=1)
    patch = prev_mask.patch_mask.copy()
    head = prev_mask.head_mask.copy()

    already_p = length - int(patch.sum())
    need_p = target_p - already_p if cumulative else target_p
    need_p = max(0, min(need_p, int(patch.sum()) - 2))
    if need_p > 0:
        cands = [p for p in range(1, length) if patch[p]]
        cands.sort(key=lambda p: (scores.patch_scores[p], p))
        patch[cands[:need_p]] = 0

    already_h = heads - int(head.sum())
    need_h = target_h - already_h if cumulative else target_h
    need_h = max(0, min(need_h, int(head.sum()) - 1))
    if need_h > 0:
        cands = [h for h in range(heads) if head[h]]
        cands.sort(key=lambda h: (scores.head_scores[h], h))
        head[cands[:need_h]] = 0

    return CascadeMask(patch_mask=patch, head_mask=head, layer_index=layer_index)


def _random_prune(
    prev_mask: CascadeMask,
    r_p: float,
    r_h: float,
    rng: np.random.Generator,
    layer_index: int,
    cumulative: bool = True,
) -> CascadeMask:
    """Random selection under the same count law and survivor clamps."""
    length = prev_mask.patch_mask.size
    heads = prev_mask.head_mask.size
    target_p = _target_counts(r_p, length, reserved=2)
    target_h = _target_counts(r_h, heads, reserved=1)
    patch = prev_mask.patch_mask.copy()
    head = prev_mask.head_mask.copy()

    already_p = length - int(patch.sum())
    need_p = target_p - already_p if cumulative else target_p
    need_p = max(0, min(need_p, int(patch.sum()) - 2))
    if need_p > 0:
        cands = np.array([p for p in range(1, length) if patch[p]])
        patch[rng.choice(cands, size=need_p, replace=False)] = 0

    already_h = heads - int(head.sum())
    need_h = target_h - already_h if cumulative else target_h
    need_h = max(0, min(need_h, int(head.sum()) - 1))
    if need_h > 0:
        cands = np.array([h for h in range(heads) if head[h]])
        head[rng.choice(cands, size=need_h, replace=False)] = 0

    return CascadeMask(patch_mask=patch, head_mask=head, layer_index=layer_index)


def _sorted_threshold(values: np.ndarray, index: int) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[min(index, ordered.size - 1)])


def _run(
    weights: EncoderWeights,
    x: np.ndarray,
    mode: str,
    params: SchedulerParams,
    options: PruneOptions,
) -> RunResult:
    cfg = weights.config
    x = as_tensor(x)
    if x.shape != (cfg.seq_len, cfg.embed_dim):
        raise DimensionError(
            f"input shape {x.shape} does not match "
            f"(L={cfg.seq_len}, E={cfg.embed_dim})"
        )
    rng = np.random.default_rng(params.rng_seed)
    prev = CascadeMask.all_alive(cfg.seq_len, cfg.num_heads)
    scores = CumulativeScores.zeros(cfg.seq_len, cfg.num_heads)
    state = RatioState()
    trace = PruneTrace(mode=mode, seed=params.rng_seed, params=params, options=options)

    for layer_idx, lw in enumerate(weights.layers):
        x = x * prev.patch_mask.astype(np.float64)[:, None]
        raw_scores, probs, v = _attention_stage(cfg, lw, x, prev)

        if mode == "cp_vit":
            c_sr, l_hat = estimate_attention_range(
                probs, params, rng=rng, alive_heads=prev.head_mask
            )
        else:
            c_sr, l_hat = 0, 1.0
        state = next_ratio(state, l_hat, params, c_sr)
        r_p = state.r_prev
        r_h = head_ratio(state, params, cfg.num_heads)

        patch_deltas, head_deltas = fast_scores(probs, prev.patch_mask, prev.head_mask)
        if options.head_score_mode == "literal":
            head_deltas = literal_head_deltas(
                probs, prev.patch_mask, prev.head_mask, scores.patch_scores
            )
        scores = accumulate(
            scores, patch_deltas, head_deltas, prev.patch_mask, prev.head_mask
        )

        if mode == "pure_random":
            new_mask = _random_prune(
                prev, r_p, r_h, rng, layer_index=layer_idx,
                cumulative=options.cumulative_ratio,
            )
        else:
            new_mask = prune_layer(
                scores, prev, r_p, r_h, layer_index=layer_idx,
                cumulative=options.cumulative_ratio,
            )
        chosen_p = tuple(
            np.flatnonzero((prev.patch_mask == 1) & (new_mask.patch_mask == 0)).tolist()
        )
        chosen_h = tuple(
            np.flatnonzero((prev.head_mask == 1) & (new_mask.head_mask == 0)).tolist()
        )

        _, probs_after = _apply_mask_to_probs(
            raw_scores, probs, new_mask, options.renormalize
        )
        x = _output_stage(cfg, lw, x, probs_after, v, new_mask)

        target_p = _target_counts(r_p, cfg.seq_len, reserved=2)
        target_h = _target_counts(r_h, cfg.num_heads, reserved=1)
        trace.records.append(
            LayerRecord(
                layer=layer_idx,
                c_sr=c_sr,
                l_hat=l_hat,
                r_p=r_p,
                r_h=r_h,
                epsilon_p=_sorted_threshold(scores.patch_scores, target_p),
                epsilon_h=_sorted_threshold(scores.head_scores, target_h),
                mask=new_mask,
                patch_scores=scores.patch_scores.copy(),
                head_scores=scores.head_scores.copy(),
                newly_pruned_patches=chosen_p,
                newly_pruned_heads=chosen_h,
            )
        )
        prev = new_mask

    logits = _readout(weights, x)
    trace.logits = logits
    flops = report_from_counts(
        cfg, [(rec.mask.alive_patches, rec.mask.alive_heads) for rec in trace.records]
    )
    return RunResult(output=x, logits=logits, trace=trace, flops=flops)


def run_cp_vit(
    weights: EncoderWeights,
    x: np.ndarray,
    params: SchedulerParams,
    options: PruneOptions | None = None,
) -> RunResult:
    """Full layer-aware cascade pruning run (sampled attention range)."""
    return _run(weights, x, "cp_vit", params, options or PruneOptions())


def run_ablation(
    weights: EncoderWeights,
    x: np.ndarray,
    mode: str,
    ratio: float,
    seed: int,
    options: PruneOptions | None = None,
    base_params: SchedulerParams | None = None,
) -> RunResult:
    """One ablation run at a terminal cumulative patch ratio.

    pure_random draws survivor sets uniformly, prediction_only selects by
    cumulative score, both on the uniform per-layer ramp; cp_vit uses the
    layer-aware scheduler. All modes share seed handling and count laws.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ABLATION_MODES}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1)")
    base = base_params or SchedulerParams()
    params = replace(
        base, r=ratio / weights.config.num_layers, rng_seed=seed
    )
    return _run(weights, x, mode, params, options or PruneOptions())


def run_segment_ablation(
    weights: EncoderWeights,
    x: np.ndarray,
    segment_id: int,
    num_segments: int = 3,
) -> tuple[np.ndarray, dict]:
    """Prune exactly one magnitude segment (from the first layer's attention)
    in all layers and report the drift against the dense run."""
    cfg = weights.config
    dense_out, dense_trace = forward(weights, x)
    attention = dense_trace.layers[0].attention_probability
    segments = segment_patches(attention, num_segments)
    if not 0 <= segment_id < len(segments):
        raise ValueError(f"segment_id {segment_id} outside [0, {len(segments)})")
    to_prune = [p for p in segments[segment_id] if p != 0]
    patch = np.ones(cfg.seq_len, dtype=np.uint8)
    patch[to_prune] = 0
    if patch.sum() < 2:  # keep one content patch alive (survivor clamp)
        spare = to_prune[-1]
        patch[spare] = 1
        to_prune = [p for p in to_prune if p != spare]
    mask = CascadeMask(
        patch_mask=patch, head_mask=np.ones(cfg.num_heads, dtype=np.uint8)
    )
    masks = [
        CascadeMask(patch_mask=mask.patch_mask, head_mask=mask.head_mask, layer_index=i)
        for i in range(cfg.num_layers)
    ]
    pruned_out, pruned_trace = forward(weights, x, masks=masks)
    if dense_trace.logits is not None:
        drift = float(np.linalg.norm(pruned_trace.logits - dense_trace.logits))
        top1_match = bool(
            np.argmax(pruned_trace.logits) == np.argmax(dense_trace.logits)
        )
    else:
        drift = float(
            np.linalg.norm(pruned_trace.final_features - dense_trace.final_features)
        )
        top1_match = None
    metrics = {
        "segment": list(segments[segment_id]),
        "pruned_patches": sorted(to_prune),
        "l2_drift": drift,
        "top1_match": top1_match,
        "segments": [list(s) for s in segments],
    }
    return pruned_out, metrics

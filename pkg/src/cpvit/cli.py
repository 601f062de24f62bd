"""Operator entry point: cascade-pruning runs, ablations, segment
experiments, FLOPs reports, and attention heatmaps.

Exit codes: 0 success, 1 configuration/usage error, 2 I/O error.
The log level comes from the CPVIT_LOG environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encoder import (
    ConfigurationError,
    EncoderConfig,
    EncoderWeights,
    forward,
    random_weights,
)
from .io_formats import ArchiveError, load_archive, load_encoder
from .pruner import (
    ABLATION_MODES,
    PruneOptions,
    run_ablation,
    run_cp_vit,
    run_segment_ablation,
)
from .scheduler import SchedulerParams, params_for_target
from .tensor import DimensionError
from .viz import attention_image, segment_image

log = logging.getLogger("cpvit")


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message: str) -> None:  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="encoder checkpoint (archive or directory)")
    p.add_argument(
        "--input",
        help="input archive; entry 'input' or a batch 'input000', 'input001', ...",
    )
    p.add_argument(
        "--synthetic",
        nargs=3,
        type=int,
        metavar=("L", "E", "SEED"),
        help="generate a random (L, E) input (and, without --model, a random model)",
    )
    p.add_argument("--layers", type=int, default=2, help="synthetic model depth")
    p.add_argument("--heads", type=int, default=4, help="synthetic model heads")
    p.add_argument("--target-ratio", type=float, help="terminal cumulative patch ratio")
    p.add_argument("--base-ratio", type=float, help="per-layer ratio increment r")
    p.add_argument("--k", type=int, default=32, help="attention-range sample count")
    p.add_argument("--delta", type=int, default=2, help="short-range offset")
    p.add_argument("--eta", type=float, default=1.0, help="range correction factor")
    p.add_argument(
        "--head-ratio-coeff", type=float, default=0.5, help="head ratio = coeff * r_l"
    )
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument(
        "--format", choices=("csv", "json"), default="csv", help="report table format"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpvit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cpvit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="one pruning run; emits trace, masks, FLOPs")
    _add_common(p_run)
    p_run.add_argument("--mode", choices=ABLATION_MODES, default="cp_vit")
    p_run.add_argument(
        "--no-renormalize",
        action="store_true",
        help="keep raw masked probabilities instead of renormalizing",
    )

    p_abl = sub.add_parser("ablate", help="compare all three modes on one input")
    _add_common(p_abl)
    p_abl.add_argument(
        "--ratios",
        type=float,
        nargs="+",
        default=[0.5],
        help="terminal ratios to sweep",
    )

    p_seg = sub.add_parser("segment", help="prune magnitude segments one by one")
    _add_common(p_seg)
    p_seg.add_argument("--segments", type=int, default=3)
    p_seg.add_argument("--scale", type=int, default=8, help="pixels per patch")

    p_heat = sub.add_parser("heatmap", help="render one (layer, head) attention map")
    _add_common(p_heat)
    p_heat.add_argument("--layer", type=int, default=0)
    p_heat.add_argument("--head", type=int, default=0)
    p_heat.add_argument("--scale", type=int, default=8, help="pixels per cell")
    return parser


def _synthetic_model(
    seq_len: int, embed_dim: int, seed: int, layers: int, heads: int
) -> EncoderWeights:
    if embed_dim % heads != 0:
        raise ConfigurationError(
            f"synthetic embed dim {embed_dim} not divisible by {heads} heads"
        )
    config = EncoderConfig(
        num_layers=layers,
        num_heads=heads,
        seq_len=seq_len,
        head_dim=embed_dim // heads,
        ffn_hidden=4 * embed_dim,
        num_classes=8,
    )
    return random_weights(config, np.random.default_rng(seed))


def _resolve_model_and_inputs(
    args: argparse.Namespace,
) -> tuple[EncoderWeights, list[np.ndarray], np.ndarray | None]:
    """Returns (weights, inputs, labels-or-None)."""
    sources = sum(1 for v in (args.input, args.synthetic) if v)
    if sources != 1:
        raise ConfigurationError("exactly one of --input or --synthetic is required")
    labels = None
    if args.synthetic:
        seq_len, embed_dim, seed = args.synthetic
        rng = np.random.default_rng(seed)
        if args.model:
            _, weights = load_encoder(args.model)
            cfg = weights.config
            if (seq_len, embed_dim) != (cfg.seq_len, cfg.embed_dim):
                raise ConfigurationError(
                    f"--synthetic {seq_len} {embed_dim} does not match model "
                    f"(L={cfg.seq_len}, E={cfg.embed_dim})"
                )
        else:
            weights = _synthetic_model(seq_len, embed_dim, seed, args.layers, args.heads)
        inputs = [rng.normal(size=(seq_len, embed_dim))]
    else:
        if not args.model:
            raise ConfigurationError("--input requires --model")
        _, weights = load_encoder(args.model)
        entries = load_archive(args.input)
        if "input" in entries:
            inputs = [entries["input"]]
        else:
            batch_names = sorted(n for n in entries if n.startswith("input"))
            if not batch_names:
                raise ConfigurationError(
                    "input archive has neither 'input' nor 'inputNNN' entries"
                )
            inputs = [entries[n] for n in batch_names]
        if "labels" in entries:
            labels = entries["labels"].astype(int)
        cfg = weights.config
        for arr in inputs:
            if arr.shape != (cfg.seq_len, cfg.embed_dim):
                raise ConfigurationError(
                    f"input shape {arr.shape} does not match model "
                    f"(L={cfg.seq_len}, E={cfg.embed_dim})"
                )
    return weights, inputs, labels


def _scheduler_params(args: argparse.Namespace, num_layers: int) -> tuple[SchedulerParams, float]:
    """Build params from flags; returns (params, terminal-ratio label)."""
    common = dict(
        k=args.k,
        delta=args.delta,
        eta=args.eta,
        head_ratio_coeff=args.head_ratio_coeff,
        rng_seed=args.seed,
    )
    if args.target_ratio is not None and args.base_ratio is not None:
        raise ConfigurationError("--target-ratio and --base-ratio are exclusive")
    if args.base_ratio is not None:
        return SchedulerParams(r=args.base_ratio, **common), args.base_ratio * num_layers
    target = args.target_ratio if args.target_ratio is not None else 0.0
    return params_for_target(target, num_layers, **common), target


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def cmd_run(args: argparse.Namespace) -> int:
    weights, inputs, _ = _resolve_model_and_inputs(args)
    params, ratio_label = _scheduler_params(args, weights.config.num_layers)
    options = PruneOptions(renormalize=not args.no_renormalize)
    if args.mode == "cp_vit":
        result = run_cp_vit(weights, inputs[0], params, options)
    else:
        result = run_ablation(
            weights, inputs[0], args.mode, ratio_label, args.seed, options, params
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "trace.json", result.trace.to_json_dict())
    _write_csv(out / "masks.csv", result.trace.masks_csv_rows())
    _write_csv(out / "flops.csv", result.flops.to_csv_rows())
    if args.format == "json":
        _write_json(out / "flops.json", result.flops.to_json_dict())
    print(
        f"mode={args.mode} ratio={ratio_label:g} "
        f"flops_saving={result.flops.saving_percent:.2f} "
        f"layers={weights.config.num_layers}"
    )
    return 0


def _top1_agreement(
    weights: EncoderWeights, inputs: list[np.ndarray], mode: str, ratio: float,
    seed: int, params: SchedulerParams,
) -> tuple[float | None, float, float]:
    """(top-1 agreement with dense, mean L2 drift, FLOPs saving) per mode."""
    agree = 0
    drift = 0.0
    saving = 0.0
    has_logits = weights.classifier is not None
    for i, x in enumerate(inputs):
        dense_out, dense_trace = forward(weights, x)
        result = run_ablation(weights, x, mode, ratio, seed + i, base_params=params)
        saving = result.flops.saving_percent
        if has_logits:
            drift += float(np.linalg.norm(result.logits - dense_trace.logits))
            agree += int(np.argmax(result.logits) == np.argmax(dense_trace.logits))
        else:
            drift += float(np.linalg.norm(result.output - dense_trace.final_features))
    n = len(inputs)
    return (agree / n if has_logits else None), drift / n, saving


def cmd_ablate(args: argparse.Namespace) -> int:
    weights, inputs, _ = _resolve_model_and_inputs(args)
    params, _ = _scheduler_params(args, weights.config.num_layers)
    records: list[dict] = []
    table: dict[float, dict[str, float | None]] = {}
    for ratio in args.ratios:
        table[ratio] = {}
        for mode in ABLATION_MODES:
            agreement, drift, saving = _top1_agreement(
                weights, inputs, mode, ratio, args.seed, params
            )
            table[ratio][mode] = agreement
            records.append(
                {
                    "mode": mode,
                    "ratio": ratio,
                    "top1_agreement": agreement,
                    "l2_drift": drift,
                    "flops_saving": saving,
                }
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["mode", "ratio", "top1_agreement", "l2_drift", "flops_saving"]
    rows: list[list] = [header]
    for rec in records:
        rows.append(
            [rec["mode"], f"{rec['ratio']:g}",
             "" if rec["top1_agreement"] is None else f"{rec['top1_agreement']:.4f}",
             f"{rec['l2_drift']:.6f}", f"{rec['flops_saving']:.4f}"]
        )
    _write_csv(out / "ablation.csv", rows)
    if args.format == "json":
        _write_json(out / "ablation.json", {"rows": records})
    for ratio, by_mode in table.items():
        a = by_mode.get("cp_vit")
        b = by_mode.get("prediction_only")
        c = by_mode.get("pure_random")
        if None not in (a, b, c) and not (a >= b >= c):
            log.warning(
                "ablation ordering violated at ratio %g: "
                "cp_vit=%.4f prediction_only=%.4f pure_random=%.4f",
                ratio, a, b, c,
            )
    print(f"modes={len(ABLATION_MODES)} ratios={len(args.ratios)} rows={len(records)}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    weights, inputs, _ = _resolve_model_and_inputs(args)
    n_seg = args.segments
    records: list[dict] = []
    segments_for_image = None
    for s in range(n_seg):
        drifts = []
        matches = []
        for x in inputs:
            _, metrics = run_segment_ablation(weights, x, s, n_seg)
            drifts.append(metrics["l2_drift"])
            if metrics["top1_match"] is not None:
                matches.append(metrics["top1_match"])
            segments_for_image = metrics["segments"]
        records.append(
            {
                "segment": s,
                "size": len(segments_for_image[s]),
                "mean_l2_drift": float(np.mean(drifts)),
                "top1_match_rate": float(np.mean(matches)) if matches else None,
            }
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[list] = [["segment", "size", "mean_l2_drift", "top1_match_rate"]]
    for rec in records:
        rows.append(
            [rec["segment"], rec["size"], f"{rec['mean_l2_drift']:.6f}",
             "" if rec["top1_match_rate"] is None else f"{rec['top1_match_rate']:.4f}"]
        )
    _write_csv(out / "segments.csv", rows)
    if args.format == "json":
        _write_json(out / "segments.json", {"rows": records})
    image = segment_image(segments_for_image, weights.config.seq_len, args.scale)
    image.save(out / "segments.png")
    print(f"segments={n_seg} out={out}")
    return 0


def cmd_heatmap(args: argparse.Namespace) -> int:
    weights, inputs, _ = _resolve_model_and_inputs(args)
    cfg = weights.config
    if not 0 <= args.layer < cfg.num_layers:
        raise ConfigurationError(f"--layer {args.layer} outside [0, {cfg.num_layers})")
    if not 0 <= args.head < cfg.num_heads:
        raise ConfigurationError(f"--head {args.head} outside [0, {cfg.num_heads})")
    _, trace = forward(weights, inputs[0])
    probs = trace.layers[args.layer].attention_probability[args.head]
    image = attention_image(probs, args.scale)
    out = Path(args.out)
    if out.suffix == ".png":
        out.parent.mkdir(parents=True, exist_ok=True)
        target = out
    else:
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"heatmap_l{args.layer}_h{args.head}.png"
    image.save(target)
    print(f"heatmap layer={args.layer} head={args.head} file={target}")
    return 0


_COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "segment": cmd_segment,
    "heatmap": cmd_heatmap,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("CPVIT_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, DimensionError, ValueError) as exc:
        print(f"cpvit: error: {exc}", file=sys.stderr)
        return 1
    except (ArchiveError, OSError) as exc:
        print(f"cpvit: io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

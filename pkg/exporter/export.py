#!/usr/bin/env python3
"""Export pretrained ViT-family checkpoints into the engine's archive format.

Supported source layouts:

- torchvision ``VisionTransformer`` (fused QKV): catalog names such as
  ``vit_b_16`` (optionally with ``--checkpoint state_dict.pt``) or a tiny
  randomly-initialized surrogate ``tv-tiny:IMG,PATCH,LAYERS,HEADS,EMBED,MLP,CLASSES``.
- HuggingFace ``ViTForImageClassification`` (split QKV): a local model path
  via ``hf:<path>`` or a tiny surrogate
  ``hf-tiny:IMG,PATCH,LAYERS,HEADS,EMBED,MLP,CLASSES``.

The exporter writes ``weights.cpvt`` + ``config.json`` (the engine's
checkpoint convention), the embedded sample sequence ``input.cpvt``, and a
``manifest.json`` holding the archive checksum and the reference logits
computed in the source framework. It communicates with the engine only
through these documented file formats; the archive writer here is an
independent implementation of the format.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import struct
import sys
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CPVT"
FORMAT_VERSION = 1
_DTYPE_F64 = 0


class UnsupportedLayoutError(RuntimeError):
    """Source checkpoint does not follow a known encoder layout."""


def write_archive(entries: dict[str, np.ndarray], path: Path) -> None:
    """Write the engine's tensor-archive format (entries sorted by name)."""
    table = bytearray()
    payload = bytearray()
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"entry {name!r} contains non-finite values")
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", _DTYPE_F64, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.astype("<f8").tobytes(order="C")
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(entries))
    path.write_bytes(blob + bytes(table) + bytes(payload))


def _t(param: torch.Tensor) -> np.ndarray:
    """torch Linear stores (out, in); the engine uses x @ W."""
    return param.detach().cpu().numpy().astype(np.float64).T.copy()


def _v(param: torch.Tensor) -> np.ndarray:
    return param.detach().cpu().numpy().astype(np.float64).copy()


def _parse_tiny_spec(spec: str) -> tuple[int, int, int, int, int, int, int]:
    parts = spec.split(",")
    if len(parts) != 7:
        raise ValueError(
            "tiny spec must be IMG,PATCH,LAYERS,HEADS,EMBED,MLP,CLASSES"
        )
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def build_source_model(model_id: str, checkpoint: str | None, init_seed: int):
    """Returns (model, kind) with kind in {"torchvision", "hf"}."""
    torch.manual_seed(init_seed)
    if model_id.startswith("tv-tiny:"):
        from torchvision.models.vision_transformer import VisionTransformer

        img, patch, layers, heads, embed, mlp, classes = _parse_tiny_spec(
            model_id.split(":", 1)[1]
        )
        model = VisionTransformer(
            image_size=img, patch_size=patch, num_layers=layers,
            num_heads=heads, hidden_dim=embed, mlp_dim=mlp,
            num_classes=classes,
        )
        kind = "torchvision"
    elif model_id.startswith("hf-tiny:"):
        from transformers import ViTConfig, ViTForImageClassification

        img, patch, layers, heads, embed, mlp, classes = _parse_tiny_spec(
            model_id.split(":", 1)[1]
        )
        model = ViTForImageClassification(
            ViTConfig(
                image_size=img, patch_size=patch, num_hidden_layers=layers,
                num_attention_heads=heads, hidden_size=embed,
                intermediate_size=mlp, num_labels=classes,
            )
        )
        kind = "hf"
    elif model_id.startswith("hf:"):
        from transformers import ViTForImageClassification

        model = ViTForImageClassification.from_pretrained(model_id.split(":", 1)[1])
        kind = "hf"
    else:
        import torchvision.models as tvm

        try:
            model = tvm.get_model(model_id, weights=None)
        except ValueError as exc:
            raise UnsupportedLayoutError(f"unknown model id {model_id!r}") from exc
        kind = "torchvision"
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model, kind


def extract_torchvision(model) -> tuple[dict, dict[str, np.ndarray]]:
    """Split fused QKV and remap a torchvision VisionTransformer."""
    state = model.state_dict()
    embed = int(model.hidden_dim)
    layers = len(model.encoder.layers)
    heads = int(model.encoder.layers[0].self_attention.num_heads)
    seq_len = int(state["encoder.pos_embedding"].shape[1])
    entries: dict[str, np.ndarray] = {}
    consumed = {"class_token", "conv_proj.weight", "conv_proj.bias",
                "encoder.pos_embedding"}
    for i in range(layers):
        base = f"encoder.layers.encoder_layer_{i}"
        needed = {
            f"{base}.ln_1.weight", f"{base}.ln_1.bias",
            f"{base}.self_attention.in_proj_weight",
            f"{base}.self_attention.in_proj_bias",
            f"{base}.self_attention.out_proj.weight",
            f"{base}.self_attention.out_proj.bias",
            f"{base}.ln_2.weight", f"{base}.ln_2.bias",
            f"{base}.mlp.0.weight", f"{base}.mlp.0.bias",
            f"{base}.mlp.3.weight", f"{base}.mlp.3.bias",
        }
        missing = sorted(n for n in needed if n not in state)
        if missing:
            raise UnsupportedLayoutError(f"missing parameters: {missing}")
        consumed |= needed
        in_w = state[f"{base}.self_attention.in_proj_weight"]
        in_b = state[f"{base}.self_attention.in_proj_bias"]
        entries[f"layer{i}.wq"] = _t(in_w[0:embed])
        entries[f"layer{i}.wk"] = _t(in_w[embed : 2 * embed])
        entries[f"layer{i}.wv"] = _t(in_w[2 * embed : 3 * embed])
        entries[f"layer{i}.wq_bias"] = _v(in_b[0:embed])
        entries[f"layer{i}.wk_bias"] = _v(in_b[embed : 2 * embed])
        entries[f"layer{i}.wv_bias"] = _v(in_b[2 * embed : 3 * embed])
        entries[f"layer{i}.wo"] = _t(state[f"{base}.self_attention.out_proj.weight"])
        entries[f"layer{i}.wo_bias"] = _v(state[f"{base}.self_attention.out_proj.bias"])
        entries[f"layer{i}.ffn1"] = _t(state[f"{base}.mlp.0.weight"])
        entries[f"layer{i}.ffn1_bias"] = _v(state[f"{base}.mlp.0.bias"])
        entries[f"layer{i}.ffn2"] = _t(state[f"{base}.mlp.3.weight"])
        entries[f"layer{i}.ffn2_bias"] = _v(state[f"{base}.mlp.3.bias"])
        entries[f"layer{i}.ln1_gamma"] = _v(state[f"{base}.ln_1.weight"])
        entries[f"layer{i}.ln1_beta"] = _v(state[f"{base}.ln_1.bias"])
        entries[f"layer{i}.ln2_gamma"] = _v(state[f"{base}.ln_2.weight"])
        entries[f"layer{i}.ln2_beta"] = _v(state[f"{base}.ln_2.bias"])
    tail = {"encoder.ln.weight", "encoder.ln.bias",
            "heads.head.weight", "heads.head.bias"}
    missing = sorted(n for n in tail if n not in state)
    if missing:
        raise UnsupportedLayoutError(f"missing parameters: {missing}")
    consumed |= tail
    entries["final_ln_gamma"] = _v(state["encoder.ln.weight"])
    entries["final_ln_beta"] = _v(state["encoder.ln.bias"])
    entries["classifier"] = _t(state["heads.head.weight"])
    entries["classifier_bias"] = _v(state["heads.head.bias"])
    unexpected = sorted(set(state) - consumed)
    if unexpected:
        raise UnsupportedLayoutError(f"unexpected parameters: {unexpected}")
    config = {
        "num_layers": layers,
        "num_heads": heads,
        "seq_len": seq_len,
        "head_dim": embed // heads,
        "embed_dim": embed,
        "ffn_hidden": int(model.mlp_dim),
        "num_classes": int(state["heads.head.weight"].shape[0]),
        "ln_eps": 1e-6,
        "gelu": "erf",
    }
    return config, entries


def extract_hf(model) -> tuple[dict, dict[str, np.ndarray]]:
    """Remap a HuggingFace ViTForImageClassification (split QKV)."""
    cfg = model.config
    if cfg.hidden_act != "gelu":
        raise UnsupportedLayoutError(
            f"unsupported activation {cfg.hidden_act!r} (expected erf gelu)"
        )
    state = model.state_dict()
    layers = int(cfg.num_hidden_layers)
    entries: dict[str, np.ndarray] = {}
    # two key dialects exist: vit.layers.N.attention.q_proj... (new) and
    # vit.encoder.layer.N.attention.attention.query... (classic)
    dialects = [
        {
            "prefix": "vit.layers.{i}",
            "q": "attention.q_proj", "k": "attention.k_proj",
            "v": "attention.v_proj", "o": "attention.o_proj",
            "fc1": "mlp.fc1", "fc2": "mlp.fc2",
            "ln1": "layernorm_before", "ln2": "layernorm_after",
            "extras": {"vit.embeddings.cls_token",
                       "vit.embeddings.position_embeddings",
                       "vit.embeddings.patch_embeddings.projection.weight",
                       "vit.embeddings.patch_embeddings.projection.bias"},
        },
        {
            "prefix": "vit.encoder.layer.{i}",
            "q": "attention.attention.query", "k": "attention.attention.key",
            "v": "attention.attention.value", "o": "attention.output.dense",
            "fc1": "intermediate.dense", "fc2": "output.dense",
            "ln1": "layernorm_before", "ln2": "layernorm_after",
            "extras": {"vit.embeddings.cls_token",
                       "vit.embeddings.position_embeddings",
                       "vit.embeddings.patch_embeddings.projection.weight",
                       "vit.embeddings.patch_embeddings.projection.bias"},
        },
    ]
    dialect = None
    for cand in dialects:
        probe = cand["prefix"].format(i=0) + "." + cand["q"] + ".weight"
        if probe in state:
            dialect = cand
            break
    if dialect is None:
        raise UnsupportedLayoutError(
            f"unrecognized parameter names, e.g.: {sorted(state)[:6]}"
        )
    consumed = set(dialect["extras"]) & set(state)
    for i in range(layers):
        base = dialect["prefix"].format(i=i)
        mapping = {
            "wq": dialect["q"], "wk": dialect["k"], "wv": dialect["v"],
            "wo": dialect["o"], "ffn1": dialect["fc1"], "ffn2": dialect["fc2"],
        }
        for out_name, src in mapping.items():
            w_key, b_key = f"{base}.{src}.weight", f"{base}.{src}.bias"
            if w_key not in state or b_key not in state:
                raise UnsupportedLayoutError(
                    f"missing parameters: {[w_key, b_key]}"
                )
            entries[f"layer{i}.{out_name}"] = _t(state[w_key])
            entries[f"layer{i}.{out_name}_bias"] = _v(state[b_key])
            consumed |= {w_key, b_key}
        for out_name, src in (("ln1", dialect["ln1"]), ("ln2", dialect["ln2"])):
            w_key, b_key = f"{base}.{src}.weight", f"{base}.{src}.bias"
            if w_key not in state or b_key not in state:
                raise UnsupportedLayoutError(
                    f"missing parameters: {[w_key, b_key]}"
                )
            entries[f"layer{i}.{out_name}_gamma"] = _v(state[w_key])
            entries[f"layer{i}.{out_name}_beta"] = _v(state[b_key])
            consumed |= {w_key, b_key}
    tail = {"vit.layernorm.weight", "vit.layernorm.bias",
            "classifier.weight", "classifier.bias"}
    missing = sorted(n for n in tail if n not in state)
    if missing:
        raise UnsupportedLayoutError(f"missing parameters: {missing}")
    consumed |= tail
    entries["final_ln_gamma"] = _v(state["vit.layernorm.weight"])
    entries["final_ln_beta"] = _v(state["vit.layernorm.bias"])
    entries["classifier"] = _t(state["classifier.weight"])
    entries["classifier_bias"] = _v(state["classifier.bias"])
    unexpected = sorted(set(state) - consumed)
    if unexpected:
        raise UnsupportedLayoutError(f"unexpected parameters: {unexpected}")
    config = {
        "num_layers": layers,
        "num_heads": int(cfg.num_attention_heads),
        "seq_len": int(state["vit.embeddings.position_embeddings"].shape[1]),
        "head_dim": int(cfg.hidden_size // cfg.num_attention_heads),
        "embed_dim": int(cfg.hidden_size),
        "ffn_hidden": int(cfg.intermediate_size),
        "num_classes": int(cfg.num_labels),
        "ln_eps": float(cfg.layer_norm_eps),
        "gelu": "erf",
    }
    return config, entries


def load_sample(path: str | None, model, kind: str, seed: int) -> torch.Tensor:
    """A (3, I, I) sample image: from file, or seeded random."""
    if kind == "torchvision":
        size = int(model.image_size)
    else:
        size = int(model.config.image_size)
    if path:
        p = Path(path)
        if p.suffix == ".npy":
            img = torch.tensor(np.load(p), dtype=torch.float32)
        else:
            img = torch.load(p, map_location="cpu", weights_only=True).float()
        if img.shape != (3, size, size):
            raise ValueError(f"sample shape {tuple(img.shape)} != (3, {size}, {size})")
        return img
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(3, size, size, generator=gen)


@torch.no_grad()
def embed_sample(model, kind: str, image: torch.Tensor) -> np.ndarray:
    """The (L, E) patch sequence exactly as it enters the first block."""
    batch = image[None]
    if kind == "torchvision":
        tokens = model._process_input(batch)
        cls = model.class_token.expand(tokens.shape[0], -1, -1)
        seq = torch.cat([cls, tokens], dim=1) + model.encoder.pos_embedding
        return seq[0].numpy().astype(np.float64)
    return model.vit.embeddings(batch)[0].numpy().astype(np.float64)


@torch.no_grad()
def reference_logits(model, kind: str, image: torch.Tensor) -> np.ndarray:
    out = model(image[None])
    logits = out.logits if hasattr(out, "logits") else out
    return logits[0].numpy().astype(np.float64)


def capture_attention_maps(
    config: dict, entries: dict[str, np.ndarray], sequence: np.ndarray
) -> dict[str, np.ndarray]:
    """Recompute per-layer attention probabilities from the exported weights
    (float64, same arithmetic the engine uses for its dense pass)."""
    def norm(x, gamma, beta):
        mean = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mean) / np.sqrt(var + config["ln_eps"]) * gamma + beta

    def erf_gelu(x):
        from math import erf
        return 0.5 * x * (1.0 + np.vectorize(erf)(x / math.sqrt(2.0)))

    heads, d = config["num_heads"], config["head_dim"]
    x = sequence.copy()
    maps = {}
    for i in range(config["num_layers"]):
        n = norm(x, entries[f"layer{i}.ln1_gamma"], entries[f"layer{i}.ln1_beta"])
        q = n @ entries[f"layer{i}.wq"] + entries[f"layer{i}.wq_bias"]
        k = n @ entries[f"layer{i}.wk"] + entries[f"layer{i}.wk_bias"]
        v = n @ entries[f"layer{i}.wv"] + entries[f"layer{i}.wv_bias"]
        probs = []
        ctx = []
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(d)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            probs.append(p)
            ctx.append(p @ v[:, sl])
        maps[f"layer{i}.attention"] = np.stack(probs)
        merged = np.concatenate(ctx, axis=1)
        x = x + merged @ entries[f"layer{i}.wo"] + entries[f"layer{i}.wo_bias"]
        n2 = norm(x, entries[f"layer{i}.ln2_gamma"], entries[f"layer{i}.ln2_beta"])
        hid = erf_gelu(n2 @ entries[f"layer{i}.ffn1"] + entries[f"layer{i}.ffn1_bias"])
        x = x + hid @ entries[f"layer{i}.ffn2"] + entries[f"layer{i}.ffn2_bias"]
    return maps


def export(
    model_id: str,
    out_dir: str | Path,
    sample: str | None = None,
    sample_seed: int = 0,
    checkpoint: str | None = None,
    init_seed: int = 0,
    capture_attention: bool = False,
) -> dict:
    """Run the export; returns the manifest dict."""
    model, kind = build_source_model(model_id, checkpoint, init_seed)
    if kind == "torchvision":
        config, entries = extract_torchvision(model)
    else:
        config, entries = extract_hf(model)
    image = load_sample(sample, model, kind, sample_seed)
    sequence = embed_sample(model, kind, image)
    logits = reference_logits(model, kind, image)
    if sequence.shape != (config["seq_len"], config["embed_dim"]):
        raise UnsupportedLayoutError(
            f"embedded sequence shape {sequence.shape} does not match config"
        )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_archive(entries, out / "weights.cpvt")
    (out / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n"
    )
    write_archive({"input": sequence}, out / "input.cpvt")
    if capture_attention:
        write_archive(capture_attention_maps(config, entries, sequence),
                      out / "attention.cpvt")
    manifest = dict(config)
    manifest.update(
        {
            "source": model_id,
            "archive_sha256": hashlib.sha256(
                (out / "weights.cpvt").read_bytes()
            ).hexdigest(),
            "reference_input": "input.cpvt",
            "reference_logits": [float(v) for v in logits],
        }
    )
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True, help="model id (see module docstring)")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--checkpoint", help="state-dict file to load into the architecture")
    ap.add_argument("--sample", help="sample image tensor (.npy or .pt), else seeded random")
    ap.add_argument("--sample-seed", type=int, default=0)
    ap.add_argument("--init-seed", type=int, default=0, help="seed for tiny surrogate init")
    ap.add_argument("--capture-attention", action="store_true",
                    help="also write per-layer attention of the sample (large)")
    args = ap.parse_args(argv)
    try:
        manifest = export(
            args.model, args.out, sample=args.sample,
            sample_seed=args.sample_seed, checkpoint=args.checkpoint,
            init_seed=args.init_seed, capture_attention=args.capture_attention,
        )
    except UnsupportedLayoutError as exc:
        print(f"export: unsupported layout: {exc}", file=sys.stderr)
        return 1
    print(
        f"exported {args.model}: layers={manifest['num_layers']} "
        f"L={manifest['seq_len']} E={manifest['embed_dim']} "
        f"sha256={manifest['archive_sha256'][:12]}..."
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())

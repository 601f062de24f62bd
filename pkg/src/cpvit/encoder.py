"""ViT-style transformer encoder with attention capture and mask support.

Pre-norm block layout: ``x += MHSA(LN(x))`` then ``x += FFN(LN(x))``. The
forward pass records per-layer attention scores and probabilities and can
apply per-layer :class:`~cpvit.masks.CascadeMask` objects. Pruned positions
are computed-as-zero, never physically compacted: a pruned patch's residual
stream is zeroed at prune time and stays zero, pruned heads contribute
nothing to the merged head output, and surviving attention rows are
renormalized over surviving columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masks import CascadeMask
from .tensor import (
    DimensionError,
    as_tensor,
    gelu,
    gelu_erf,
    layer_norm,
    masked_softmax_rows,
    matmul,
)

__all__ = [
    "ConfigurationError",
    "EncoderConfig",
    "LayerWeights",
    "EncoderWeights",
    "LayerTrace",
    "ForwardTrace",
    "forward",
    "record_attention",
    "random_weights",
]


class ConfigurationError(ValueError):
    """Model configuration or mask sequence is inconsistent."""


@dataclass(frozen=True)
class EncoderConfig:
    """Shape parameters of an encoder: L patches (CLS at index 0), H heads
    of dimension D each, embedding width E = H*D, and the FFN hidden width."""

    num_layers: int
    num_heads: int
    seq_len: int
    head_dim: int
    ffn_hidden: int
    num_classes: int | None = None
    ln_eps: float = 1e-6
    gelu: str = "tanh"

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.seq_len < 2:
            raise ConfigurationError("seq_len must be >= 2 (CLS plus content)")
        if self.num_classes is not None and self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1 when present")
        if self.gelu not in ("tanh", "erf"):
            raise ConfigurationError(f"unknown gelu variant {self.gelu!r}")

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim


@dataclass(frozen=True)
class LayerWeights:
    """One encoder block: QKV/output projections (x @ W convention), FFN,
    and the two layer-norm parameter pairs."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    w_ffn1: np.ndarray
    b_ffn1: np.ndarray
    w_ffn2: np.ndarray
    b_ffn2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    """All layers plus the optional final layer norm and classifier head."""

    config: EncoderConfig
    layers: tuple[LayerWeights, ...]
    final_ln: tuple[np.ndarray, np.ndarray] | None = None
    classifier: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        validate_weights(self)


def validate_weights(weights: EncoderWeights) -> None:
    """Check every parameter shape against the config; reject non-finite."""
    cfg = weights.config
    e, f = cfg.embed_dim, cfg.ffn_hidden
    if len(weights.layers) != cfg.num_layers:
        raise ConfigurationError(
            f"expected {cfg.num_layers} layers, got {len(weights.layers)}"
        )
    expected = {
        "w_q": (e, e), "w_k": (e, e), "w_v": (e, e), "w_o": (e, e),
        "b_q": (e,), "b_k": (e,), "b_v": (e,), "b_o": (e,),
        "w_ffn1": (e, f), "b_ffn1": (f,), "w_ffn2": (f, e), "b_ffn2": (e,),
        "ln1_gamma": (e,), "ln1_beta": (e,), "ln2_gamma": (e,), "ln2_beta": (e,),
    }
    for i, lw in enumerate(weights.layers):
        for name, shape in expected.items():
            arr = getattr(lw, name)
            if arr.shape != shape:
                raise ConfigurationError(
                    f"layer{i}.{name}: expected shape {shape}, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"layer{i}.{name}: non-finite values")
    if weights.final_ln is not None:
        gamma, beta = weights.final_ln
        if gamma.shape != (e,) or beta.shape != (e,):
            raise ConfigurationError("final layer norm parameters must have shape (E,)")
    if weights.classifier is not None:
        w, b = weights.classifier
        if cfg.num_classes is None:
            raise ConfigurationError("classifier present but num_classes unset")
        if w.shape != (e, cfg.num_classes) or b.shape != (cfg.num_classes,):
            raise ConfigurationError(
                f"classifier: expected shapes ({e}, {cfg.num_classes}) and "
                f"({cfg.num_classes},), got {w.shape} and {b.shape}"
            )


@dataclass
class LayerTrace:
    """Captured state of one block: raw scores A = Q.K^T/sqrt(D), the
    (masked, renormalized) attention probabilities, the block's input and
    output feature maps, and the mask in effect for A.V onwards."""

    attention_scores: np.ndarray
    attention_probability: np.ndarray
    layer_input: np.ndarray
    layer_output: np.ndarray
    mask: CascadeMask


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    final_features: np.ndarray | None = None
    logits: np.ndarray | None = None


def _split_heads(x: np.ndarray, num_heads: int, head_dim: int) -> list[np.ndarray]:
    return [x[:, h * head_dim : (h + 1) * head_dim] for h in range(num_heads)]


def _attention_stage(
    cfg: EncoderConfig, lw: LayerWeights, x: np.ndarray, mask: CascadeMask
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compute raw scores A (H,L,L), probabilities P under `mask`, and V.

    Dead patches get exactly-zero rows and columns in both A and P; dead
    heads get exactly-zero slices.
    """
    h_dim, n_heads, length = cfg.head_dim, cfg.num_heads, cfg.seq_len
    normed = layer_norm(x, lw.ln1_gamma, lw.ln1_beta, cfg.ln_eps)
    q = matmul(normed, lw.w_q) + lw.b_q
    k = matmul(normed, lw.w_k) + lw.b_k
    v = matmul(normed, lw.w_v) + lw.b_v
    scale = 1.0 / math.sqrt(h_dim)
    dead_rows = mask.patch_mask == 0
    scores = np.zeros((n_heads, length, length))
    probs = np.zeros((n_heads, length, length))
    for h, (qh, kh) in enumerate(zip(_split_heads(q, n_heads, h_dim), _split_heads(k, n_heads, h_dim))):
        if mask.head_mask[h] == 0:
            continue
        a = matmul(qh, kh.T) * scale
        a[dead_rows, :] = 0.0
        a[:, dead_rows] = 0.0
        p = masked_softmax_rows(a, mask.patch_mask)
        p[dead_rows, :] = 0.0
        scores[h] = a
        probs[h] = p
    return scores, probs, v


def _apply_mask_to_probs(
    scores: np.ndarray, probs: np.ndarray, mask: CascadeMask, renormalize: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Restrict (A, P) to a shrunk mask; renormalize rows or just zero."""
    dead = mask.patch_mask == 0
    new_scores = scores.copy()
    new_scores[:, dead, :] = 0.0
    new_scores[:, :, dead] = 0.0
    new_scores[mask.head_mask == 0] = 0.0
    if renormalize:
        new_probs = np.zeros_like(probs)
        for h in range(probs.shape[0]):
            if mask.head_mask[h] == 0:
                continue
            p = masked_softmax_rows(new_scores[h], mask.patch_mask)
            p[dead, :] = 0.0
            new_probs[h] = p
    else:
        new_probs = probs.copy()
        new_probs[:, dead, :] = 0.0
        new_probs[:, :, dead] = 0.0
        new_probs[mask.head_mask == 0] = 0.0
    return new_scores, new_probs


def _output_stage(
    cfg: EncoderConfig,
    lw: LayerWeights,
    x: np.ndarray,
    probs: np.ndarray,
    v: np.ndarray,
    mask: CascadeMask,
) -> np.ndarray:
    """A.V, head merge, output projection, FFN, residuals; pruned rows and
    the residual stream of pruned patches are zeroed."""
    h_dim, n_heads = cfg.head_dim, cfg.num_heads
    keep = mask.patch_mask.astype(np.float64)[:, None]
    act = gelu if cfg.gelu == "tanh" else gelu_erf
    merged = np.zeros((cfg.seq_len, cfg.embed_dim))
    v_heads = _split_heads(v, n_heads, h_dim)
    for h in range(n_heads):
        if mask.head_mask[h] == 0:
            continue
        merged[:, h * h_dim : (h + 1) * h_dim] = matmul(probs[h], v_heads[h])
    attn_out = (matmul(merged, lw.w_o) + lw.b_o) * keep
    x = (x + attn_out) * keep
    normed = layer_norm(x, lw.ln2_gamma, lw.ln2_beta, cfg.ln_eps)
    hidden = act(matmul(normed, lw.w_ffn1) + lw.b_ffn1)
    ffn_out = (matmul(hidden, lw.w_ffn2) + lw.b_ffn2) * keep
    return (x + ffn_out) * keep


def _readout(weights: EncoderWeights, x: np.ndarray) -> np.ndarray | None:
    """Final layer norm (if any) and classifier logits from the CLS row."""
    if weights.classifier is None:
        return None
    cfg = weights.config
    if weights.final_ln is not None:
        gamma, beta = weights.final_ln
        x = layer_norm(x, gamma, beta, cfg.ln_eps)
    w, b = weights.classifier
    return matmul(x[0:1, :], w)[0] + b


def _check_masks(
    cfg: EncoderConfig, masks: list[CascadeMask] | None
) -> list[CascadeMask]:
    if masks is None:
        return [
            CascadeMask.all_alive(cfg.seq_len, cfg.num_heads, layer_index=i)
            for i in range(cfg.num_layers)
        ]
    if len(masks) != cfg.num_layers:
        raise ConfigurationError(
            f"expected {cfg.num_layers} masks, got {len(masks)}"
        )
    prev = CascadeMask.all_alive(cfg.seq_len, cfg.num_heads)
    for i, m in enumerate(masks):
        if m.patch_mask.shape != (cfg.seq_len,) or m.head_mask.shape != (cfg.num_heads,):
            raise ConfigurationError(f"mask {i} shape does not match config")
        if not m.shrinks(prev):
            raise ConfigurationError(
                f"mask {i} resurrects patches or heads pruned earlier"
            )
        prev = m
    return list(masks)


def forward(
    weights: EncoderWeights,
    x: np.ndarray,
    masks: list[CascadeMask] | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the encoder on an (L, E) patch sequence.

    Returns ``(logits, trace)`` when the model has a classifier, otherwise
    ``(final_features, trace)``. The trace always carries both.
    """
    cfg = weights.config
    x = as_tensor(x)
    if x.shape != (cfg.seq_len, cfg.embed_dim):
        raise DimensionError(
            f"input shape {x.shape} does not match "
            f"(L={cfg.seq_len}, E={cfg.embed_dim})"
        )
    layer_masks = _check_masks(cfg, masks)
    trace = ForwardTrace()
    for lw, mask in zip(weights.layers, layer_masks):
        x = x * mask.patch_mask.astype(np.float64)[:, None]
        layer_input = x.copy()
        scores, probs, v = _attention_stage(cfg, lw, x, mask)
        x = _output_stage(cfg, lw, x, probs, v, mask)
        trace.layers.append(
            LayerTrace(
                attention_scores=scores,
                attention_probability=probs,
                layer_input=layer_input,
                layer_output=x.copy(),
                mask=mask,
            )
        )
    trace.final_features = x
    trace.logits = _readout(weights, x)
    output = trace.logits if trace.logits is not None else x
    return output, trace


def record_attention(weights: EncoderWeights, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer (H, L, L) attention probabilities of a maskless forward."""
    _, trace = forward(weights, x)
    return [layer.attention_probability for layer in trace.layers]


def random_weights(
    config: EncoderConfig,
    rng: np.random.Generator,
    scale: float = 0.25,
    classifier: bool | None = None,
) -> EncoderWeights:
    """Seeded random weights for synthetic runs and tests."""
    e, f = config.embed_dim, config.ffn_hidden

    def mat(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, scale / math.sqrt(rows), size=(rows, cols))

    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=mat(e, e), w_k=mat(e, e), w_v=mat(e, e), w_o=mat(e, e),
                b_q=np.zeros(e), b_k=np.zeros(e), b_v=np.zeros(e), b_o=np.zeros(e),
                w_ffn1=mat(e, f), b_ffn1=np.zeros(f),
                w_ffn2=mat(f, e), b_ffn2=np.zeros(e),
                ln1_gamma=np.ones(e), ln1_beta=np.zeros(e),
                ln2_gamma=np.ones(e), ln2_beta=np.zeros(e),
            )
        )
    if classifier is None:
        classifier = config.num_classes is not None
    head = None
    final_ln = None
    if classifier:
        if config.num_classes is None:
            raise ConfigurationError("classifier requested but num_classes unset")
        head = (mat(e, config.num_classes), np.zeros(config.num_classes))
        final_ln = (np.ones(e), np.zeros(e))
    return EncoderWeights(
        config=config, layers=tuple(layers), final_ln=final_ln, classifier=head
    )

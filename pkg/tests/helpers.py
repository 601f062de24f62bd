"""Shared independent oracles and model builders for the test suite.

Oracles here are deliberately naive (explicit loops, compacted execution)
so they stay independent of the vectorized implementation paths they check.
"""

from __future__ import annotations

import math

import numpy as np

from cpvit.encoder import EncoderConfig, EncoderWeights, LayerWeights
from cpvit.tensor import count_macs, matmul


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_patch_informativeness(a, p0, h, alpha, beta) -> float:
    """Double-loop reference for the weighted row+column sum."""
    total_row = 0.0
    total_col = 0.0
    for i in range(a.shape[2]):
        total_row += a[h, p0, i]
    for j in range(a.shape[1]):
        total_col += a[h, j, p0]
    return alpha * total_row + beta * total_col


def naive_layer_patch_informativeness(a, p0, alpha, beta) -> float:
    return sum(
        naive_patch_informativeness(a, p0, h, alpha, beta) for h in range(a.shape[0])
    )


def naive_head_informativeness(a, h) -> float:
    total = 0.0
    for i in range(a.shape[1]):
        for j in range(a.shape[2]):
            total += a[h, i, j]
    return total


def naive_column_max_deltas(a, alive_patches, alive_heads):
    """Brute-force column-max score deltas."""
    n_heads, _, length = a.shape
    patch = np.zeros(length)
    head = np.zeros(n_heads)
    for h in range(n_heads):
        if not alive_heads[h]:
            continue
        for p in range(length):
            if not alive_patches[p]:
                continue
            best = max(a[h, i, p] for i in range(length))
            patch[p] += best
            head[h] += best
    return patch, head


def brute_force_short_range(a, delta, heads, ordinates) -> int:
    """Count short-range hits by scanning every (head, ordinate) pair."""
    c_sr = 0
    for h in heads:
        for s in ordinates:
            col = int(np.argmax(a[h, s, :]))
            if abs(col - s) <= delta:
                c_sr += 1
    return c_sr


def compacted_layer_macs(config: EncoderConfig, alive_patches: int, alive_heads: int) -> int:
    """Execute one encoder block's matmul sequence on physically compacted
    operands and measure the MACs actually performed.

    QKV projections keep only surviving-head columns, scores/AV run per
    surviving head on the surviving patches, the output projection consumes
    the compacted head concat, and the FFN runs on surviving patches.
    """
    lp, hp, d = alive_patches, alive_heads, config.head_dim
    e, f = config.embed_dim, config.ffn_hidden
    rng = np.random.default_rng(0)
    x = rng.normal(size=(lp, e))
    w_qkv = rng.normal(size=(e, hp * d))
    w_o = rng.normal(size=(hp * d, e))
    w1 = rng.normal(size=(e, f))
    w2 = rng.normal(size=(f, e))
    with count_macs() as counter:
        q = matmul(x, w_qkv)
        k = matmul(x, w_qkv)
        v = matmul(x, w_qkv)
        heads_out = []
        for h in range(hp):
            qh = q[:, h * d : (h + 1) * d]
            kh = k[:, h * d : (h + 1) * d]
            vh = v[:, h * d : (h + 1) * d]
            scores = matmul(qh, kh.T) / math.sqrt(d)
            heads_out.append(matmul(scores, vh))
        merged = np.concatenate(heads_out, axis=1)
        matmul(merged, w_o)
        hidden = matmul(x, w1)
        matmul(hidden, w2)
    return counter.macs


def identity_attention_weights(
    config: EncoderConfig, rng: np.random.Generator, sharpness: float = 60.0
) -> EncoderWeights:
    """Single-head weights whose attention argmax sits on the diagonal.

    W_q = W_k = sharpness * I makes every row's score maximal at itself:
    layer-normed rows all have the same norm, so the self inner product is
    strictly largest. Requires one head (a head block would only see a
    sub-vector, where dominance can fail).
    """
    assert config.num_heads == 1, "identity attention construction needs H=1"
    e, f = config.embed_dim, config.ffn_hidden
    eye = np.eye(e) * sharpness
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=eye.copy(), w_k=eye.copy(),
                w_v=rng.normal(0, 0.2, size=(e, e)),
                w_o=rng.normal(0, 0.2, size=(e, e)),
                b_q=np.zeros(e), b_k=np.zeros(e), b_v=np.zeros(e), b_o=np.zeros(e),
                w_ffn1=rng.normal(0, 0.2, size=(e, f)), b_ffn1=np.zeros(f),
                w_ffn2=rng.normal(0, 0.2, size=(f, e)), b_ffn2=np.zeros(e),
                ln1_gamma=np.ones(e), ln1_beta=np.zeros(e),
                ln2_gamma=np.ones(e), ln2_beta=np.zeros(e),
            )
        )
    return EncoderWeights(config=config, layers=tuple(layers))


def uniform_attention_weights(
    config: EncoderConfig, rng: np.random.Generator
) -> EncoderWeights:
    """Weights with zero Q/K projections: scores are 0, attention is uniform
    over surviving columns and the argmax ties break to column 0."""
    e, f = config.embed_dim, config.ffn_hidden
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=np.zeros((e, e)), w_k=np.zeros((e, e)),
                w_v=rng.normal(0, 0.2, size=(e, e)),
                w_o=rng.normal(0, 0.2, size=(e, e)),
                b_q=np.zeros(e), b_k=np.zeros(e), b_v=np.zeros(e), b_o=np.zeros(e),
                w_ffn1=rng.normal(0, 0.2, size=(e, f)), b_ffn1=np.zeros(f),
                w_ffn2=rng.normal(0, 0.2, size=(f, e)), b_ffn2=np.zeros(e),
                ln1_gamma=np.ones(e), ln1_beta=np.zeros(e),
                ln2_gamma=np.ones(e), ln2_beta=np.zeros(e),
            )
        )
    return EncoderWeights(config=config, layers=tuple(layers))


def identity_attention_tensor(num_heads: int, length: int) -> np.ndarray:
    """(H, L, L) attention that is exactly the identity on every head."""
    return np.stack([np.eye(length) for _ in range(num_heads)])


def cascade_law_violations(trace, cfg) -> list[str]:
    """Check mask monotonicity, the cumulative-count law, and the
    frozen-score law on one prune trace; returns violation descriptions."""
    import math

    from cpvit.masks import CascadeMask

    violations = []
    prev_mask = CascadeMask.all_alive(cfg.seq_len, cfg.num_heads)
    frozen_patches: dict[int, tuple[int, float]] = {}
    frozen_heads: dict[int, tuple[int, float]] = {}
    for rec in trace.records:
        if not rec.mask.shrinks(prev_mask):
            violations.append(f"layer {rec.layer}: mask grew")
        expected = min(math.floor(rec.r_p * cfg.seq_len), cfg.seq_len - 2)
        if rec.pruned_patch_total != expected:
            violations.append(
                f"layer {rec.layer}: pruned {rec.pruned_patch_total} patches, "
                f"expected {expected}"
            )
        expected_h = min(math.floor(rec.r_h * cfg.num_heads), cfg.num_heads - 1)
        if rec.pruned_head_total != expected_h:
            violations.append(
                f"layer {rec.layer}: pruned {rec.pruned_head_total} heads, "
                f"expected {expected_h}"
            )
        for p in rec.newly_pruned_patches:
            frozen_patches[p] = (rec.layer, rec.patch_scores[p])
        for h in rec.newly_pruned_heads:
            frozen_heads[h] = (rec.layer, rec.head_scores[h])
        for p, (l0, frozen) in frozen_patches.items():
            if rec.patch_scores[p] != frozen:
                violations.append(f"patch {p} score changed after prune layer {l0}")
        for h, (l0, frozen) in frozen_heads.items():
            if rec.head_scores[h] != frozen:
                violations.append(f"head {h} score changed after prune layer {l0}")
        prev_mask = rec.mask
    return violations

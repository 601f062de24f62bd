#!/usr/bin/env python3
"""Train the bundled toy model on synthetic clustered sequences.

Dev-only script (requires torch); the engine itself never imports torch.
It builds a torch mirror of the engine's encoder (pre-norm blocks, tanh
GELU, per-head attention, final LN + CLS classifier), trains it to classify
which cluster prototype a few informative patches carry, verifies parity
against the engine, and writes the fixtures shipped with the package:

    src/cpvit/data/toy_model/{weights.cpvt, config.json}
    src/cpvit/data/toy_eval.cpvt   (64 held-out inputs + labels)

Task: each sample has L-1 content patches; `n_informative` random positions
carry one of `n_classes` prototype directions plus noise, the rest are pure
noise. The label is the prototype id. Solving it requires attending to the
informative patches, which gives the attention maps the long-range
vertical-line structure the scheduler feeds on.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from cpvit.encoder import EncoderConfig, EncoderWeights, LayerWeights  # noqa: E402
from cpvit.encoder import forward as engine_forward  # noqa: E402
from cpvit.io_formats import save_archive, save_encoder  # noqa: E402


class Block(nn.Module):
    def __init__(self, embed, heads, ffn):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed, eps=1e-6)
        self.ln2 = nn.LayerNorm(embed, eps=1e-6)
        self.heads = heads
        self.head_dim = embed // heads
        self.wq = nn.Linear(embed, embed)
        self.wk = nn.Linear(embed, embed)
        self.wv = nn.Linear(embed, embed)
        self.wo = nn.Linear(embed, embed)
        self.ffn1 = nn.Linear(embed, ffn)
        self.ffn2 = nn.Linear(ffn, embed)
        self.act = nn.GELU(approximate="tanh")

    def forward(self, x):
        # x: (B, L, E)
        b, l, e = x.shape
        n = self.ln1(x)
        q = self.wq(n).view(b, l, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(n).view(b, l, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(n).view(b, l, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores, dim=-1)
        merged = (probs @ v).transpose(1, 2).reshape(b, l, e)
        x = x + self.wo(merged)
        x = x + self.ffn2(self.act(self.ffn1(self.ln2(x))))
        return x


class ToyEncoder(nn.Module):
    def __init__(self, layers, embed, heads, ffn, classes):
        super().__init__()
        self.blocks = nn.ModuleList(Block(embed, heads, ffn) for _ in range(layers))
        self.final_ln = nn.LayerNorm(embed, eps=1e-6)
        self.head = nn.Linear(embed, classes)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_ln(x)[:, 0, :])


def make_batch(rng, n, seq_len, embed, prototypes, n_informative, noise=0.4):
    classes = prototypes.shape[0]
    x = rng.normal(0.0, 1.0, size=(n, seq_len, embed))
    x[:, 0, :] = 0.0  # CLS slot starts empty
    labels = rng.integers(0, classes, size=n)
    for i in range(n):
        spots = rng.choice(np.arange(1, seq_len), size=n_informative, replace=False)
        x[i, spots, :] = prototypes[labels[i]] + rng.normal(
            0.0, noise, size=(n_informative, embed)
        )
    return x, labels


def export_weights(model: ToyEncoder, config: EncoderConfig) -> EncoderWeights:
    def t(p):  # torch Linear stores (out, in); engine uses x @ W
        return p.detach().numpy().astype(np.float64).T.copy()

    def v(p):
        return p.detach().numpy().astype(np.float64).copy()

    layers = []
    for blk in model.blocks:
        layers.append(
            LayerWeights(
                w_q=t(blk.wq.weight), b_q=v(blk.wq.bias),
                w_k=t(blk.wk.weight), b_k=v(blk.wk.bias),
                w_v=t(blk.wv.weight), b_v=v(blk.wv.bias),
                w_o=t(blk.wo.weight), b_o=v(blk.wo.bias),
                w_ffn1=t(blk.ffn1.weight), b_ffn1=v(blk.ffn1.bias),
                w_ffn2=t(blk.ffn2.weight), b_ffn2=v(blk.ffn2.bias),
                ln1_gamma=v(blk.ln1.weight), ln1_beta=v(blk.ln1.bias),
                ln2_gamma=v(blk.ln2.weight), ln2_beta=v(blk.ln2.bias),
            )
        )
    return EncoderWeights(
        config=config,
        layers=tuple(layers),
        final_ln=(v(model.final_ln.weight), v(model.final_ln.bias)),
        classifier=(t(model.head.weight), v(model.head.bias)),
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=20240817)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--head-dim", type=int, default=8)
    ap.add_argument("--seq-len", type=int, default=16)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--informative", type=int, default=5)
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--out", default=str(REPO / "src" / "cpvit" / "data"))
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    embed = args.heads * args.head_dim
    config = EncoderConfig(
        num_layers=args.layers,
        num_heads=args.heads,
        seq_len=args.seq_len,
        head_dim=args.head_dim,
        ffn_hidden=2 * embed,
        num_classes=args.classes,
    )
    prototypes = rng.normal(0.0, 1.0, size=(args.classes, embed))
    prototypes *= 2.0 / np.linalg.norm(prototypes, axis=1, keepdims=True) * math.sqrt(embed)

    model = ToyEncoder(args.layers, embed, args.heads, config.ffn_hidden, args.classes)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for step in range(args.steps):
        x, y = make_batch(rng, args.batch, args.seq_len, embed, prototypes, args.informative)
        logits = model(torch.tensor(x, dtype=torch.float32))
        loss = loss_fn(logits, torch.tensor(y))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0 or step == args.steps - 1:
            acc = (logits.argmax(dim=1).numpy() == y).mean()
            print(f"step {step:4d} loss {loss.item():.4f} train acc {acc:.3f}")

    model.eval()
    xe, ye = make_batch(rng, 64, args.seq_len, embed, prototypes, args.informative)
    with torch.no_grad():
        torch_logits = model(torch.tensor(xe, dtype=torch.float32)).numpy()
    eval_acc = (torch_logits.argmax(axis=1) == ye).mean()
    print(f"eval acc {eval_acc:.3f}")

    weights = export_weights(model, config)
    engine_logits = np.stack([engine_forward(weights, xe[i])[0] for i in range(8)])
    parity = np.abs(engine_logits - torch_logits[:8]).max()
    print(f"engine/torch parity (8 samples, max abs): {parity:.2e}")
    assert parity < 1e-3, "engine does not reproduce the torch model"

    out = Path(args.out)
    save_encoder(out / "toy_model", config, weights)
    save_archive(
        {
            **{f"input{i:03d}": xe[i] for i in range(len(xe))},
            "labels": ye.astype(np.float64),
        },
        out / "toy_eval.cpvt",
    )
    print(f"wrote fixtures under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Bundled fixtures: a toy encoder trained on synthetic clustered sequences
(one informative prototype patch per sample) and a held-out eval batch.

Regenerate with scripts/train_toy_model.py.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..io_formats import load_archive

_HERE = Path(__file__).resolve().parent


def toy_model_path() -> Path:
    """Directory of the bundled trained checkpoint."""
    return _HERE / "toy_model"


def toy_eval_batch() -> tuple[list[np.ndarray], np.ndarray]:
    """(inputs, labels) of the bundled held-out batch."""
    entries = load_archive(_HERE / "toy_eval.cpvt")
    names = sorted(n for n in entries if n.startswith("input"))
    return [entries[n] for n in names], entries["labels"].astype(int)

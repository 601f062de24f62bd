"""Deterministic binary tensor archives and encoder checkpoint loading.

Archive layout (all integers little-endian):

    magic   4 bytes  b"CPVT"
    version u16      currently 1
    count   u32      number of entries
    entry   u16 name length, UTF-8 name, u8 dtype (0 = float64),
            u8 ndim, u32 * ndim dims, u64 payload offset
    payload raw little-endian float64, entries contiguous, offsets relative
            to the payload start

Entries are written sorted by name, so identical content yields identical
bytes. The loader validates everything before touching the payload and only
ever raises :class:`ArchiveError` subclasses on malformed input.

The encoder checkpoint convention (entry names ``layer{i}.wq`` etc. plus a
human-readable JSON config sidecar) is documented in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import ConfigurationError, EncoderConfig, EncoderWeights, LayerWeights

__all__ = [
    "ArchiveError",
    "BadMagicError",
    "VersionError",
    "TruncatedArchiveError",
    "DuplicateNameError",
    "CorruptArchiveError",
    "MissingEntryError",
    "EntryShapeError",
    "MAGIC",
    "FORMAT_VERSION",
    "save_archive",
    "load_archive",
    "save_encoder",
    "load_encoder",
    "config_to_dict",
    "config_from_dict",
]

MAGIC = b"CPVT"
FORMAT_VERSION = 1
_DTYPE_F64 = 0
_MAX_NDIM = 8


class ArchiveError(Exception):
    """Base for every archive format failure."""


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class DuplicateNameError(ArchiveError):
    pass


class CorruptArchiveError(ArchiveError):
    pass


class MissingEntryError(ArchiveError):
    pass


class EntryShapeError(ArchiveError):
    pass


def save_archive(entries: dict[str, np.ndarray], path: str | Path) -> None:
    """Write entries (sorted by name) as one archive file."""
    names = sorted(entries)
    arrays = {}
    for name in names:
        if not name:
            raise ValueError("entry names must be non-empty")
        arr = np.ascontiguousarray(entries[name], dtype=np.float64)
        if arr.ndim > _MAX_NDIM:
            raise ValueError(f"entry {name!r}: more than {_MAX_NDIM} dimensions")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"entry {name!r} contains non-finite values")
        arrays[name] = arr
    table = bytearray()
    payload = bytearray()
    for name in names:
        arr = arrays[name]
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<BB", _DTYPE_F64, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += arr.astype("<f8").tobytes(order="C")
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(names)) + bytes(table) + bytes(payload)
    Path(path).write_bytes(blob)


def _take(blob: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(blob):
        raise TruncatedArchiveError(f"archive truncated while reading {what}")
    return blob[offset : offset + size], offset + size


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read an archive back into name -> float64 array (table order)."""
    blob = Path(path).read_bytes()
    chunk, pos = _take(blob, 0, 4, "magic")
    if chunk != MAGIC:
        raise BadMagicError(f"bad magic {chunk!r}, expected {MAGIC!r}")
    chunk, pos = _take(blob, pos, 6, "header")
    version, count = struct.unpack("<HI", chunk)
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version}, expected {FORMAT_VERSION}")
    entries: list[tuple[str, tuple[int, ...], int]] = []
    seen: set[str] = set()
    for _ in range(count):
        chunk, pos = _take(blob, pos, 2, "name length")
        (name_len,) = struct.unpack("<H", chunk)
        chunk, pos = _take(blob, pos, name_len, "name")
        try:
            name = chunk.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptArchiveError(f"entry name is not valid UTF-8: {exc}") from exc
        if not name:
            raise CorruptArchiveError("empty entry name")
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)
        chunk, pos = _take(blob, pos, 2, "dtype/ndim")
        dtype, ndim = struct.unpack("<BB", chunk)
        if dtype != _DTYPE_F64:
            raise CorruptArchiveError(f"entry {name!r}: unknown dtype code {dtype}")
        if ndim > _MAX_NDIM:
            raise CorruptArchiveError(f"entry {name!r}: ndim {ndim} exceeds {_MAX_NDIM}")
        chunk, pos = _take(blob, pos, 4 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}I", chunk) if ndim else ()
        chunk, pos = _take(blob, pos, 8, "offset")
        (offset,) = struct.unpack("<Q", chunk)
        entries.append((name, shape, offset))
    payload = blob[pos:]
    spans = []
    for name, shape, offset in entries:
        size = 8
        for dim in shape:
            size *= dim
        if offset + size > len(payload):
            raise TruncatedArchiveError(
                f"entry {name!r}: payload of {size} bytes at offset {offset} "
                f"exceeds available {len(payload)}"
            )
        spans.append((offset, offset + size, name))
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise CorruptArchiveError(
                f"entries {name_a!r} and {name_b!r} overlap in the payload"
            )
    declared = sum(end - start for start, end, _ in spans)
    if declared != len(payload):
        raise CorruptArchiveError(
            f"declared payload size {declared} does not match actual {len(payload)}"
        )
    result: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n_items = 1
        for dim in shape:
            n_items *= dim
        arr = np.frombuffer(
            payload, dtype="<f8", count=n_items, offset=offset
        ).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CorruptArchiveError(f"entry {name!r} contains non-finite values")
        result[name] = arr
    return result


def config_to_dict(config: EncoderConfig) -> dict:
    return {
        "num_layers": config.num_layers,
        "num_heads": config.num_heads,
        "seq_len": config.seq_len,
        "head_dim": config.head_dim,
        "embed_dim": config.embed_dim,
        "ffn_hidden": config.ffn_hidden,
        "num_classes": config.num_classes,
        "ln_eps": config.ln_eps,
        "gelu": config.gelu,
    }


def config_from_dict(data: dict) -> EncoderConfig:
    try:
        config = EncoderConfig(
            num_layers=int(data["num_layers"]),
            num_heads=int(data["num_heads"]),
            seq_len=int(data["seq_len"]),
            head_dim=int(data["head_dim"]),
            ffn_hidden=int(data["ffn_hidden"]),
            num_classes=None if data.get("num_classes") is None else int(data["num_classes"]),
            ln_eps=float(data.get("ln_eps", 1e-6)),
            gelu=str(data.get("gelu", "tanh")),
        )
    except KeyError as exc:
        raise CorruptArchiveError(f"config is missing key {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise CorruptArchiveError(f"config is invalid: {exc}") from exc
    declared = data.get("embed_dim")
    if declared is not None and int(declared) != config.embed_dim:
        raise CorruptArchiveError(
            f"embed_dim {declared} disagrees with num_heads*head_dim "
            f"{config.embed_dim}"
        )
    return config


_LAYER_FIELDS = {
    "wq": "w_q", "wk": "w_k", "wv": "w_v", "wo": "w_o",
    "wq_bias": "b_q", "wk_bias": "b_k", "wv_bias": "b_v", "wo_bias": "b_o",
    "ffn1": "w_ffn1", "ffn1_bias": "b_ffn1",
    "ffn2": "w_ffn2", "ffn2_bias": "b_ffn2",
    "ln1_gamma": "ln1_gamma", "ln1_beta": "ln1_beta",
    "ln2_gamma": "ln2_gamma", "ln2_beta": "ln2_beta",
}


def _resolve_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.is_dir() or p.suffix == "":
        return p / "weights.cpvt", p / "config.json"
    return p, p.with_suffix(".json")


def save_encoder(path: str | Path, config: EncoderConfig, weights: EncoderWeights) -> None:
    """Write archive + JSON config sidecar under the documented names."""
    archive_path, config_path = _resolve_paths(path)
    archive_path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, np.ndarray] = {}
    for i, lw in enumerate(weights.layers):
        for suffix, attr in _LAYER_FIELDS.items():
            entries[f"layer{i}.{suffix}"] = getattr(lw, attr)
    if weights.final_ln is not None:
        entries["final_ln_gamma"], entries["final_ln_beta"] = weights.final_ln
    if weights.classifier is not None:
        entries["classifier"], entries["classifier_bias"] = weights.classifier
    save_archive(entries, archive_path)
    config_path.write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"
    )


def load_encoder(path: str | Path) -> tuple[EncoderConfig, EncoderWeights]:
    """Load and validate an encoder checkpoint (archive + config sidecar)."""
    archive_path, config_path = _resolve_paths(path)
    if not config_path.exists():
        raise MissingEntryError(f"config sidecar {config_path} not found")
    try:
        config_data = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptArchiveError(f"config sidecar is not valid JSON: {exc}") from exc
    config = config_from_dict(config_data)
    entries = load_archive(archive_path)
    e, f = config.embed_dim, config.ffn_hidden
    shapes = {
        "wq": (e, e), "wk": (e, e), "wv": (e, e), "wo": (e, e),
        "wq_bias": (e,), "wk_bias": (e,), "wv_bias": (e,), "wo_bias": (e,),
        "ffn1": (e, f), "ffn1_bias": (f,), "ffn2": (f, e), "ffn2_bias": (e,),
        "ln1_gamma": (e,), "ln1_beta": (e,), "ln2_gamma": (e,), "ln2_beta": (e,),
    }

    def fetch(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in entries:
            raise MissingEntryError(f"archive is missing entry {name!r}")
        arr = entries[name]
        if arr.shape != shape:
            raise EntryShapeError(
                f"entry {name!r}: expected shape {shape}, got {arr.shape}"
            )
        return arr

    layers = []
    for i in range(config.num_layers):
        kwargs = {
            attr: fetch(f"layer{i}.{suffix}", shapes[suffix])
            for suffix, attr in _LAYER_FIELDS.items()
        }
        layers.append(LayerWeights(**kwargs))
    final_ln = None
    if "final_ln_gamma" in entries or "final_ln_beta" in entries:
        final_ln = (fetch("final_ln_gamma", (e,)), fetch("final_ln_beta", (e,)))
    classifier = None
    if "classifier" in entries or "classifier_bias" in entries:
        if config.num_classes is None:
            raise CorruptArchiveError("classifier entries present but num_classes unset")
        classifier = (
            fetch("classifier", (e, config.num_classes)),
            fetch("classifier_bias", (config.num_classes,)),
        )
    try:
        weights = EncoderWeights(
            config=config, layers=tuple(layers),
            final_ln=final_ln, classifier=classifier,
        )
    except ConfigurationError as exc:
        raise EntryShapeError(str(exc)) from exc
    return config, weights

"""Binary model container.

Layout::

    b"QFOREST\\0"                 8-byte magic
    uint64 little-endian           length of the header in bytes
    UTF-8 JSON header              kinds, dimensions, shifts, tensor table
    float64 little-endian payload  tensors in header order, row-major

Python's ``repr`` of a float round-trips exactly, so the scalars kept in
the header (``w`` and the per-circuit scales) survive unchanged and
``load_model(save_model(m))`` is bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .embedding import QFTNModel
from .errors import FormatError, KindError
from .ftn import FTNClassifier
from .ttn import PAIRING_SCHEME, build_topology

__all__ = ["FORMAT_VERSION", "MAGIC", "save_model", "load_model", "read_header", "model_kind"]

MAGIC = b"QFOREST\0"
FORMAT_VERSION = 1
INDEX_ORDER = "output,left,right"
_LEN = struct.Struct("<Q")


def model_kind(model) -> str:
    if isinstance(model, FTNClassifier):
        return "ftn"
    if isinstance(model, QFTNModel):
        return "qftn"
    raise KindError(f"cannot serialize {type(model).__name__}")


def _tensors(model) -> list[tuple[str, np.ndarray]]:
    if isinstance(model, FTNClassifier):
        named = [(f"level_{l}", T) for l, T in enumerate(model.levels)]
    else:
        named = [(f"unitaries_{l}", U) for l, U in enumerate(model.unitaries)]
        named.append(("top", model.top))
    named += [("head_w", model.head_w), ("head_b", model.head_b)]
    return named


def save_model(model, path) -> Path:
    kind = model_kind(model)
    named = _tensors(model)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "d": model.num_classes,
        "k": model.channels,
        "L": model.side,
        "pairing_scheme": PAIRING_SCHEME,
        "index_order": INDEX_ORDER,
        "shifts": [list(s) for s in model.shifts],
        "is_canonical": bool(model.is_canonical) if kind == "ftn" else True,
        "w": model.w if kind == "qftn" else None,
        "scales": [float(s) for s in model.scales] if kind == "qftn" else None,
        "tensors": [{"name": n, "shape": list(T.shape)} for n, T in named],
    }
    raw = json.dumps(header, indent=1).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        for _, T in named:
            fh.write(np.ascontiguousarray(T, dtype="<f8").tobytes())
    return path


def _split(blob: bytes, path) -> tuple[dict, bytes]:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a qforest model container (bad magic)")
    start = len(MAGIC) + _LEN.size
    if len(blob) < start:
        raise FormatError(f"{path}: truncated header")
    (n,) = _LEN.unpack_from(blob, len(MAGIC))
    if len(blob) < start + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start: start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, blob[start + n:]


def read_header(path) -> dict:
    return _split(Path(path).read_bytes(), path)[0]


def load_model(path, kind: str | None = None):
    """Load a container; ``kind`` optionally demands ``"ftn"`` or ``"qftn"``."""
    path = Path(path)
    header, payload = _split(path.read_bytes(), path)
    if kind is not None and header["kind"] != kind:
        raise KindError(f"{path} holds a {header['kind']} model, expected {kind}")
    if header.get("pairing_scheme") != PAIRING_SCHEME or header.get("index_order") != INDEX_ORDER:
        raise FormatError(f"{path}: unsupported topology convention")
    sizes = [int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"]]
    if 8 * sum(sizes) != len(payload):
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header declares {8 * sum(sizes)}"
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    tensors, offset = {}, 0
    for spec, size in zip(header["tensors"], sizes):
        tensors[spec["name"]] = flat[offset: offset + size].reshape(spec["shape"]).copy()
        offset += size
    topology = build_topology(header["L"], header["k"])
    d = header["d"]
    try:
        if header["kind"] == "ftn":
            levels = [tensors[f"level_{l}"] for l in range(topology.depth)]
            return FTNClassifier(
                topology, levels, header["shifts"], tensors["head_w"], tensors["head_b"], d,
                is_canonical=header["is_canonical"],
            )
        if header["kind"] == "qftn":
            unitaries = [tensors[f"unitaries_{l}"] for l in range(topology.depth - 1)]
            return QFTNModel(
                topology, unitaries, tensors["top"], header["scales"], header["shifts"],
                tensors["head_w"], tensors["head_b"], d, w=header["w"],
            )
    except KeyError as exc:
        raise FormatError(f"{path}: missing tensor {exc}") from None
    raise FormatError(f"{path}: unknown model kind {header['kind']!r}")

"""Named-tensor archives and checkpoint merging.

File layout::

    b"EKCKPT01"                  8-byte magic
    uint64 little-endian         header length H
    H bytes of UTF-8 JSON        header
    payload                      tensors back to back, little-endian, C order

The header maps each tensor name to ``dtype`` (``f32`` or ``f64``),
``shape``, ``byte_offset`` (relative to the payload start) and
``byte_length``; it also holds the SHA-256 of the payload and an optional
free-form ``metadata`` object. Tensors are stored in sorted-name order.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

MAGIC = b"EKCKPT01"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
SLERP_COLLINEAR_EPS = 1e-6


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported dtype {arr.dtype}; archives hold float32 or float64")


def _pairs(tensors) -> list[tuple[str, np.ndarray]]:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate tensor names: {dup}")
    return sorted(((str(n), np.asarray(a)) for n, a in items), key=lambda p: p[0])


def to_bytes(tensors, metadata: dict | None = None) -> bytes:
    """Serialize a name -> array mapping (or sequence of pairs)."""
    entries = {}
    chunks = []
    offset = 0
    for name, arr in _pairs(tensors):
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries[name] = {"dtype": tag, "shape": list(arr.shape), "byte_offset": offset, "byte_length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": "embedkit-checkpoint",
        "version": 1,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, indent=1).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise CheckpointError(f"duplicate names in archive header: {sorted({k for k in keys if keys.count(k) > 1})}")
    return dict(pairs)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse an archive; returns ``(tensors, metadata)``."""
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not an embedkit checkpoint (bad magic or truncated)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    payload = blob[16 + hlen :]
    entries = header.get("tensors", {})
    expected_len = sum(e["byte_length"] for e in entries.values())
    if len(payload) != expected_len:
        raise CheckpointError(f"payload is {len(payload)} bytes, header describes {expected_len} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError("checksum mismatch: payload is corrupt")
    tensors = {}
    cursor = 0
    for name, e in entries.items():
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype {e['dtype']!r}")
        dt = _DTYPES[e["dtype"]]
        shape = tuple(e["shape"])
        if e["byte_offset"] != cursor or e["byte_length"] != math.prod(shape) * dt.itemsize:
            raise CheckpointError(f"{name}: inconsistent offset/length in header")
        raw = payload[cursor : cursor + e["byte_length"]]
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        cursor += e["byte_length"]
    return tensors, header.get("metadata", {})


def save(weights, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(weights, metadata))


def load(path) -> dict[str, np.ndarray]:
    return from_bytes(Path(path).read_bytes())[0]


def load_with_metadata(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def _signature(tensors: Mapping[str, np.ndarray]):
    return {name: (arr.shape, arr.dtype.str) for name, arr in tensors.items()}


def _check_signatures(archives: Sequence[Mapping[str, np.ndarray]]):
    ref = _signature(archives[0])
    for k, a in enumerate(archives[1:], 1):
        if _signature(a) != ref:
            raise CheckpointError(f"archive {k} does not share the name/shape/dtype signature of archive 0")


def merge_linear(archives: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Elementwise weighted sum of checkpoints with identical signatures."""
    archives = list(archives)
    weights = [float(w) for w in weights]
    if len(archives) < 2:
        raise CheckpointError("linear merge needs at least two archives")
    if len(weights) != len(archives):
        raise CheckpointError("one weight per archive required")
    if any(w < 0 for w in weights) or abs(math.fsum(weights) - 1.0) > 1e-12:
        raise CheckpointError(f"weights must be non-negative and sum to 1, got {weights}")
    _check_signatures(archives)
    out = {}
    for name in sorted(archives[0]):
        acc = np.zeros(archives[0][name].shape, dtype=np.float64)
        for a, w in zip(archives, weights):
            acc += w * a[name].astype(np.float64)
        out[name] = acc.astype(archives[0][name].dtype)
    return out


def slerp_vectors(u: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation of two flat vectors, linear when (anti)collinear."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise CheckpointError("slerp of a zero-norm tensor")
    cos = float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))
    omega = math.acos(cos)
    if omega < SLERP_COLLINEAR_EPS or omega > math.pi - SLERP_COLLINEAR_EPS:
        return (1.0 - t) * u + t * v
    return (math.sin((1.0 - t) * omega) * u + math.sin(t * omega) * v) / math.sin(omega)


def merge_slerp(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], t: float) -> dict[str, np.ndarray]:
    """Per-tensor spherical interpolation from ``a`` (t=0) to ``b`` (t=1)."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise CheckpointError(f"t must lie in [0, 1], got {t}")
    _check_signatures([a, b])
    out = {}
    for name in sorted(a):
        ua = a[name].astype(np.float64).ravel()
        vb = b[name].astype(np.float64).ravel()
        if np.linalg.norm(ua) == 0 or np.linalg.norm(vb) == 0:
            raise CheckpointError(f"{name}: zero-norm tensor")
        if t == 0.0:
            merged = ua
        elif t == 1.0:
            merged = vb
        else:
            merged = slerp_vectors(ua, vb, t)
        out[name] = merged.reshape(a[name].shape).astype(a[name].dtype)
    return out


@dataclass
class MergeSpec:
    """A merge request: ``method`` is ``linear`` or ``slerp``."""

    method: str
    inputs: list[str]
    weights: list[float] | None = None
    t: float | None = None

    def __post_init__(self):
        if self.method not in ("linear", "slerp"):
            raise CheckpointError(f"unknown merge method {self.method!r}")
        if self.method == "slerp":
            if len(self.inputs) != 2:
                raise CheckpointError("slerp merges exactly two archives")
            if self.t is None or not 0.0 <= self.t <= 1.0:
                raise CheckpointError(f"slerp needs t in [0, 1], got {self.t}")
        else:
            if len(self.inputs) < 2:
                raise CheckpointError("linear merge needs at least two archives")
            if self.weights is None:
                self.weights = [1.0 / len(self.inputs)] * len(self.inputs)

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeSpec":
        return cls(method=doc["method"], inputs=list(doc["inputs"]),
                   weights=doc.get("weights"), t=doc.get("t"))


def run_merge(spec: MergeSpec, base_dir: Path | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Load the inputs of ``spec`` and merge them; metadata of the first input is kept."""
    paths = [Path(p) if base_dir is None else Path(base_dir) / p for p in spec.inputs]
    loaded = [load_with_metadata(p) for p in paths]
    archives = [t for t, _ in loaded]
    if spec.method == "slerp":
        merged = merge_slerp(archives[0], archives[1], spec.t)
    else:
        merged = merge_linear(archives, spec.weights)
    return merged, loaded[0][1]



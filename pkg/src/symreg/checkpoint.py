"""Single-file checkpoint container.

Layout: an 8-byte magic ``SRCKPT01``, a little-endian uint64 header length,
a UTF-8 JSON header, then the raw tensor payload. The header carries the
format version, the backbone config, the vocabulary, free-form training
metadata, a tensor directory (name/dtype/shape/offset) and the SHA-256 of
the payload, which is verified on load. Floating tensors are stored at
32-bit precision; integer buffers as int64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Optional, Tuple

import numpy as np
import torch

from .backbone import BackboneConfig, SequenceModel
from .errors import CorruptCheckpoint, VersionMismatch
from .vocab import Vocabulary

MAGIC = b"SRCKPT01"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "int64": np.int64}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    if t.dtype.is_floating_point:
        return t.detach().cpu().to(torch.float32).numpy()
    return t.detach().cpu().to(torch.int64).numpy()


def save_checkpoint(
    model: SequenceModel,
    path,
    vocab: Vocabulary,
    meta: Optional[dict] = None,
    extra_tensors: Optional[dict] = None,
) -> None:
    """Serialize model (and optional extra tensors, e.g. optimizer moments)."""
    tensors = {name: _to_numpy(t) for name, t in model.state_dict().items()}
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra:{name}"] = _to_numpy(t) if isinstance(t, torch.Tensor) else np.asarray(t)
    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
        raw = arr.tobytes()
        directory.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab": vocab.to_json_obj(),
        "meta": meta or {},
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpoint(f"{path}: unreadable header: {exc}") from exc
    return header


def load_checkpoint(path, vocab: Optional[Vocabulary] = None) -> Tuple[SequenceModel, dict]:
    """Rebuild the model from a container file.

    Verifies the payload hash (CorruptCheckpoint on mismatch or truncation),
    the format version, and, when a vocabulary is supplied, byte-identical
    agreement with the stored one (VersionMismatch otherwise).
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CorruptCheckpoint(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        hbytes = fh.read(hlen)
        if len(hbytes) != hlen:
            raise CorruptCheckpoint(f"{path}: truncated header")
        try:
            header = json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpoint(f"{path}: unreadable header: {exc}") from exc
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('format_version')}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload hash mismatch")

    stored_vocab = Vocabulary.from_json_obj(header["vocab"])
    if vocab is not None and stored_vocab.canonical_json() != vocab.canonical_json():
        raise VersionMismatch(
            f"{path}: checkpoint vocabulary (K={stored_vocab.size}) does not match "
            f"the provided vocabulary (K={vocab.size})")
    config = BackboneConfig.from_dict(header["config"])
    if config.vocab_size != stored_vocab.size:
        raise VersionMismatch(f"{path}: config K={config.vocab_size} != vocab K={stored_vocab.size}")

    state = {}
    for entry in header["tensors"]:
        name = entry["name"]
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CorruptCheckpoint(f"{path}: tensor {name} extends past payload")
        arr = np.frombuffer(payload[lo:hi], dtype=_DTYPES[entry["dtype"]])
        arr = arr.reshape(entry["shape"]).copy()
        if not np.all(np.isfinite(arr)) and entry["dtype"] == "float32":
            raise CorruptCheckpoint(f"{path}: tensor {name} contains non-finite values")
        if not name.startswith("extra:"):
            state[name] = torch.from_numpy(arr)
    model = SequenceModel(config)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise VersionMismatch(f"{path}: state does not fit config: {exc}") from exc
    model.eval()
    return model, header

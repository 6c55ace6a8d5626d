"""
Checkpoint file I/O.

File layout:
    8 bytes  magic  b"JMOECKPT"
    8 bytes  little-endian uint64 manifest length
    N bytes  UTF-8 JSON manifest (sorted keys, no timestamps)
    payload  concatenated little-endian arrays, offsets relative to payload start

The manifest echoes the model config, lists every tensor (name, section,
shape, dtype, offset, nbytes), carries optimizer scalars, the data RNG state
and a SHA-256 of the payload.
"""
import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.errors import (ChecksumError, CorruptManifestError, TruncatedPayloadError,
                         VersionMismatchError)
from core.model import JetMoeModel, ModelConfig
from core.ndauto import Tensor
from core.optim import AdamW, AdamWState

logger = logging.getLogger(__name__)

MAGIC = b"JMOECKPT"
FORMAT_VERSION = 1
SECTIONS = ("param", "adam_m", "adam_v")


@dataclass
class TrainingState:
    """Everything besides the weights that resume needs."""
    optimizer: Optional[AdamW] = None
    step: int = 0
    rng_state: Dict[str, Any] = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def save_checkpoint(model: JetMoeModel, path, training: Optional[TrainingState] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    training = training or TrainingState()

    blobs: List[bytes] = []
    entries: List[Dict[str, Any]] = []
    offset = 0

    def add(section: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        raw = _le(arr).tobytes()
        entries.append({"name": name, "section": section, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, arr in model.state_arrays().items():
        add("param", name, arr)

    optimizer_meta = None
    opt = training.optimizer
    if opt is not None:
        optimizer_meta = {"t": opt.state.t, **opt.hyperparameters()}
        for name in model.params:
            if name in opt.state.m:
                add("adam_m", name, opt.state.m[name])
                add("adam_v", name, opt.state.v[name])

    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "optimizer": optimizer_meta,
        "step": training.step,
        "rng_state": training.rng_state,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} (step {training.step}, {len(payload)} payload bytes)")
    return path


def _read_manifest(raw: bytes, path: Path) -> Tuple[Dict[str, Any], bytes]:
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CorruptManifestError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise TruncatedPayloadError(f"{path}: manifest length {n} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptManifestError(f"{path}: manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise CorruptManifestError(f"{path}: manifest is not an object")
    return manifest, raw[16 + n:]


def _validate_layout(manifest: Dict[str, Any], payload: bytes, path: Path) -> List[Dict[str, Any]]:
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        entries = list(manifest["tensors"])
        declared = int(manifest["payload_nbytes"])
        digest = str(manifest["payload_sha256"])
        spans = sorted((int(e["offset"]), int(e["nbytes"])) for e in entries)
        for e in entries:
            expected = int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
            if expected != int(e["nbytes"]) or e["section"] not in SECTIONS:
                raise CorruptManifestError(f"{path}: entry '{e['name']}' is inconsistent")
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CorruptManifestError):
            raise
        raise CorruptManifestError(f"{path}: malformed manifest: {e}") from e

    cursor = 0
    for start, size in spans:
        if start != cursor:
            raise CorruptManifestError(f"{path}: tensor offsets overlap or leave gaps at byte {start}")
        cursor += size
    if cursor != declared:
        raise CorruptManifestError(f"{path}: tensors cover {cursor} bytes, manifest declares {declared}")
    if len(payload) != declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {declared}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return entries


def load_checkpoint(path) -> Tuple[JetMoeModel, TrainingState]:
    path = Path(path)
    raw = path.read_bytes()
    manifest, payload = _read_manifest(raw, path)
    entries = _validate_layout(manifest, payload, path)

    arrays: Dict[Tuple[str, str], np.ndarray] = {}
    for e in entries:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=int(e["offset"])).reshape(e["shape"])
        arrays[(e["section"], e["name"])] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    cfg = ModelConfig.from_dict(manifest["config"])
    params = OrderedDict((name, Tensor(arr, name=name)) for (section, name), arr in arrays.items()
                         if section == "param")
    model = JetMoeModel(cfg, params)

    optimizer = None
    meta = manifest.get("optimizer")
    if meta is not None:
        state = AdamWState(
            m={name: arr for (section, name), arr in arrays.items() if section == "adam_m"},
            v={name: arr for (section, name), arr in arrays.items() if section == "adam_v"},
            t=int(meta["t"]),
        )
        optimizer = AdamW(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
                          weight_decay=meta["weight_decay"], state=state)
    training = TrainingState(optimizer=optimizer, step=int(manifest.get("step", 0)),
                             rng_state=dict(manifest.get("rng_state") or {}))
    logger.info(f"Loaded checkpoint {path} (step {training.step})")
    return model, training

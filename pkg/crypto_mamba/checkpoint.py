"""
Checkpoint container and training history files.

Checkpoint layout:
    b"CMCKPT1\\n"
    header length, 8-byte little-endian unsigned
    UTF-8 JSON header, sorted keys:
        format_version, config, config_hash, normalizer, best_epoch,
        val_rmse, parameter_count,
        params: [{path, shape, offset, count}, ...] in sorted path order
    parameter payloads, little-endian float64, concatenated in header order

Nothing time- or host-dependent is written, so equal inputs give equal bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .autograd import ParamStore
from .errors import ArtifactError, CheckpointMismatch, MissingArtifact

logger = logging.getLogger(__name__)

MAGIC = b"CMCKPT1\n"
FORMAT_VERSION = 1
HISTORY_COLUMNS = ["epoch", "train_rmse", "val_rmse", "lr"]


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    params: Dict[str, np.ndarray]

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get("config", {})

    @property
    def normalizer(self) -> Optional[Dict[str, Any]]:
        return self.header.get("normalizer")

    @property
    def val_rmse(self) -> Optional[float]:
        return self.header.get("val_rmse")

    def shapes(self) -> Dict[str, tuple]:
        return {path: values.shape for path, values in self.params.items()}


def encode_checkpoint(params: Dict[str, np.ndarray], *, config: Dict[str, Any],
                      config_hash: str = "", normalizer: Optional[Dict[str, Any]] = None,
                      val_rmse: Optional[float] = None, best_epoch: int = 0) -> bytes:
    entries: List[Dict[str, Any]] = []
    payload = bytearray()
    offset = 0
    for path in sorted(params):
        values = np.ascontiguousarray(params[path], dtype="<f8")
        entries.append({"path": path, "shape": list(values.shape), "offset": offset,
                        "count": int(values.size)})
        payload += values.tobytes()
        offset += values.size
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash,
        "normalizer": normalizer,
        "best_epoch": best_epoch,
        "val_rmse": val_rmse,
        "parameter_count": offset,
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + bytes(payload)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise ArtifactError("not a checkpoint file (bad magic)")
    start = len(MAGIC)
    if len(blob) < start + 8:
        raise ArtifactError("checkpoint truncated inside the header length")
    (header_len,) = struct.unpack("<Q", blob[start:start + 8])
    body = start + 8 + header_len
    if len(blob) < body:
        raise ArtifactError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[start + 8:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"unreadable checkpoint header: {e}")
    if header.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported checkpoint version {header.get('format_version')}")
    usable = (len(blob) - body) // 8 * 8
    data = np.frombuffer(blob[body:body + usable], dtype="<f8")
    params = {}
    for entry in header["params"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["count"]]
        if chunk.size != entry["count"]:
            raise ArtifactError(f"checkpoint truncated at parameter {entry['path']}")
        params[entry["path"]] = chunk.astype(np.float64).reshape(tuple(entry["shape"]))
    return Checkpoint(header, params)


def save_checkpoint(path: Union[str, Path], params: Dict[str, np.ndarray], **header: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, **header))
    logger.debug(f"Wrote checkpoint {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path), "run the train command first")
    logger.debug(f"Reading checkpoint {path}")
    return decode_checkpoint(path.read_bytes())


def restore_params(store: ParamStore, checkpoint: Checkpoint) -> None:
    """Load checkpoint weights into a store built from the current config"""
    expected = store.shapes()
    found = checkpoint.shapes()
    if expected != found:
        missing = sorted(set(expected) - set(found))
        unexpected = sorted(set(found) - set(expected))
        wrong = sorted(p for p in set(expected) & set(found) if expected[p] != found[p])
        raise CheckpointMismatch(
            f"checkpoint does not fit the configured model: missing {missing[:3]}, "
            f"unexpected {unexpected[:3]}, reshaped {wrong[:3]}"
        )
    store.load(checkpoint.params)


def write_history_csv(history: Sequence[Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.DataFrame(
        [[r.epoch, r.train_rmse, r.val_rmse, r.lr] for r in history], columns=HISTORY_COLUMNS
    )
    frame.to_csv(path, index=False, lineterminator="\n", float_format=lambda v: repr(float(v)))
    return path


def read_history_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    return pd.read_csv(path, float_precision="round_trip")

"""Binary sample stores and model checkpoints.

Sample store layout (little endian):

  header   magic b"CLSS", u16 version, u32 count, u32 N, u32 L
  payload  count*N*L float32 segment values, row-major
           count*5 uint8 group values
           count uint32 pad counts
  trailer  u32 byte length, then UTF-8 JSON list of
           {"patient_id", "location", "recording_id"} per sample

Checkpoint layout:

  header   magic b"CLCK", u16 version, 32-byte sha256 of everything after the header
  body     u32 byte length, UTF-8 JSON metadata (sorted keys), then every
           parameter as float64 in metadata order
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .cardionet import EncoderConfig, EnsembleParams, NetConfig, init_params
from .errors import CheckpointError, StoreError
from .labels import GROUP_NAMES, LabelSet, Location
from .pcg_data import Sample

logger = logging.getLogger(__name__)

STORE_MAGIC = b"CLSS"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHIII")

CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sH32s")
_LENGTH = struct.Struct("<I")


def write_sample_store(path: Union[str, Path], samples: Sequence[Sample]) -> Path:
    """Write samples to a binary store.

    Args:
        path (Union[str, Path]): Destination file.
        samples (Sequence[Sample]): Samples sharing one (N, L) shape.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    if samples:
        n_segments, length = samples[0].segments.shape
    else:
        n_segments, length = 0, 0
    for index, sample in enumerate(samples):
        if sample.segments.shape != (n_segments, length):
            raise StoreError(f"sample {index} has shape {sample.segments.shape}, expected {(n_segments, length)}")

    segments = np.stack([sample.segments for sample in samples]) if samples else np.zeros((0,))
    labels = np.array([sample.labels.as_tuple() for sample in samples], dtype=np.uint8).reshape(-1)
    pads = np.array([sample.pad_count for sample in samples], dtype="<u4")
    trailer = json.dumps([
        {"patient_id": sample.patient_id, "location": Location(sample.location).value, "recording_id": sample.recording_id}
        for sample in samples
    ]).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, len(samples), n_segments, length))
        handle.write(segments.astype("<f4").tobytes())
        handle.write(labels.tobytes())
        handle.write(pads.tobytes())
        handle.write(_LENGTH.pack(len(trailer)))
        handle.write(trailer)
    logger.debug("wrote %d samples to %s", len(samples), path)
    return path


def read_sample_store(path: Union[str, Path]) -> List[Sample]:
    """Read every sample of a binary store.

    Args:
        path (Union[str, Path]): Store file.

    Returns:
        List[Sample]: Samples in stored order, segments as float64.
    """
    payload = Path(path).read_bytes()
    if len(payload) < _STORE_HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, count, n_segments, length = _STORE_HEADER.unpack_from(payload, 0)
    if magic != STORE_MAGIC:
        raise StoreError(f"{path}: not a sample store (magic {magic!r})")
    if version != STORE_VERSION:
        raise StoreError(f"{path}: unsupported store version {version}, expected {STORE_VERSION}")

    offset = _STORE_HEADER.size
    sizes = (count * n_segments * length * 4, count * len(GROUP_NAMES), count * 4)
    if len(payload) < offset + sum(sizes) + _LENGTH.size:
        raise StoreError(f"{path}: payload shorter than {count} samples of {n_segments}x{length}")
    segments = np.frombuffer(payload, "<f4", count * n_segments * length, offset).reshape(count, n_segments, length)
    offset += sizes[0]
    labels = np.frombuffer(payload, np.uint8, count * len(GROUP_NAMES), offset).reshape(count, len(GROUP_NAMES))
    offset += sizes[1]
    pads = np.frombuffer(payload, "<u4", count, offset)
    offset += sizes[2]
    (trailer_length,) = _LENGTH.unpack_from(payload, offset)
    offset += _LENGTH.size
    if len(payload) != offset + trailer_length:
        raise StoreError(f"{path}: trailer length {trailer_length} does not match file size")
    try:
        trailer = json.loads(payload[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise StoreError(f"{path}: corrupt trailer: {error}") from error
    if len(trailer) != count:
        raise StoreError(f"{path}: trailer lists {len(trailer)} samples, header {count}")

    return [
        Sample(
            segments[index].astype(np.float64),
            LabelSet.from_tuple(labels[index].tolist()),
            meta["patient_id"],
            Location.parse(meta["location"]),
            int(pads[index]),
            meta.get("recording_id", ""),
        )
        for index, meta in enumerate(trailer)
    ]


def config_to_dict(config: NetConfig) -> Dict[str, Any]:
    snapshot = asdict(config)
    snapshot["group_widths"] = list(config.group_widths)
    snapshot["encoder"]["block_depths"] = list(config.encoder.block_depths)
    return snapshot


def config_from_dict(snapshot: Dict[str, Any]) -> NetConfig:
    values = dict(snapshot)
    values["encoder"] = EncoderConfig(**{**values["encoder"], "block_depths": tuple(values["encoder"]["block_depths"])})
    values["group_widths"] = tuple(values["group_widths"])
    return NetConfig(**values)


@dataclass
class Checkpoint:
    params: EnsembleParams
    history: pd.DataFrame = field(default_factory=pd.DataFrame)
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    params: EnsembleParams,
    history: Optional[pd.DataFrame] = None,
    seed: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Serialise parameters, configuration and training history.

    Args:
        path (Union[str, Path]): Destination file.
        params (EnsembleParams): Parameters to store.
        history (pd.DataFrame, optional): Per-epoch training history.
        seed (int, optional): Seed the parameters were trained with.
        extra (Dict[str, Any], optional): Additional JSON-serialisable metadata.

    Returns:
        Path: The written file.
    """
    named = params.named_parameters()
    metadata = {
        "config": config_to_dict(params.config),
        "parameters": [[name, list(param.shape)] for name, param in named],
        "history": [] if history is None else json.loads(history.to_json(orient="records", double_precision=15)),
        "seed": int(seed),
        "extra": extra or {},
    }
    encoded = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = _LENGTH.pack(len(encoded)) + encoded + b"".join(param.data.astype("<f8").tobytes() for _, param in named)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, hashlib.sha256(body).digest()) + body)
    logger.debug("saved checkpoint %s (%d parameters)", path, params.size)
    return path


def load_checkpoint(path: Union[str, Path], expected: Optional[NetConfig] = None) -> Checkpoint:
    """Load a checkpoint, verifying version, checksum and architecture.

    Args:
        path (Union[str, Path]): Checkpoint file.
        expected (NetConfig, optional): Architecture the caller needs.

    Returns:
        Checkpoint: Parameters, history and metadata.
    """
    payload = Path(path).read_bytes()
    if len(payload) < _CHECKPOINT_HEADER.size + _LENGTH.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, digest = _CHECKPOINT_HEADER.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body = payload[_CHECKPOINT_HEADER.size :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")

    (meta_length,) = _LENGTH.unpack_from(body, 0)
    metadata = json.loads(body[_LENGTH.size : _LENGTH.size + meta_length].decode("utf-8"))
    snapshot = metadata["config"]
    if expected is not None:
        wanted = config_to_dict(expected)
        if list(snapshot["group_widths"]) != wanted["group_widths"]:
            raise CheckpointError(
                f"incompatible group widths: checkpoint {tuple(snapshot['group_widths'])} vs expected {tuple(wanted['group_widths'])}"
            )
        architecture = {key: value for key, value in snapshot.items() if key != "global_weight"}
        wanted.pop("global_weight")
        if architecture != wanted:
            raise CheckpointError(f"incompatible architecture: checkpoint {snapshot} vs expected {wanted}")

    try:
        params = init_params(config_from_dict(snapshot))
    except (ValueError, TypeError, KeyError) as error:
        raise CheckpointError(f"{path}: unusable configuration snapshot: {error}") from error
    state, offset = {}, _LENGTH.size + meta_length
    for name, shape in metadata["parameters"]:
        size = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * size > len(body):
            raise CheckpointError(f"{path}: payload ends inside parameter {name}")
        state[name] = np.frombuffer(body, "<f8", size, offset).reshape(shape)
        offset += 8 * size
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    try:
        params.load_state_dict(state)
    except ValueError as error:
        raise CheckpointError(f"{path}: {error}") from error
    return Checkpoint(params, pd.DataFrame(metadata["history"]), metadata["seed"], metadata)

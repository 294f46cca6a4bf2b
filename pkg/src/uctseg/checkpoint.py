"""Versioned binary checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u32 JSON header
length, the UTF-8 JSON header, then the concatenated weight payloads. The
header carries the epoch, a config echo, the loss history, and an index of
named blocks (shape, offset, byte count, CRC32). Every payload is stored
as little-endian float64 regardless of the training dtype, so round-trips
are exact in both directions; integer blocks (batch-norm step counters)
are recorded as such in the index and cast back on load.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"UCSEGCK\x00"
VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a training run."""

    epoch: int
    config: dict
    weights: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    loss_history: list[list[float]] = field(default_factory=list)

    def representation(self):
        """Rebuild the filter-bank parameters from the stored conv weights."""
        from . import reprlayer

        bone = self.weights.get("conv_bone.weight")
        dirt = self.weights.get("conv_dirt.weight")
        if bone is None or dirt is None:
            k = 0
            bone = np.zeros((0, 3, 3))
            dirt = np.zeros((0, 3, 3))
        else:
            k = bone.shape[0]
            bone = bone.reshape(k, *bone.shape[-2:])
            dirt = dirt.reshape(k, *dirt.shape[-2:])
        return reprlayer.RepresentationParams(
            bone_filters=np.asarray(bone, dtype=np.float64),
            dirt_filters=np.asarray(dirt, dtype=np.float64),
        )


def _encode_blocks(groups: dict[str, dict[str, np.ndarray]]):
    index = []
    payloads = []
    offset = 0
    for group, arrays in groups.items():
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            integral = np.issubdtype(arr.dtype, np.integer)
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index.append(
                {
                    "name": f"{group}/{name}",
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(data),
                    "crc32": zlib.crc32(data),
                    "integral": integral,
                }
            )
            payloads.append(data)
            offset += len(data)
    return index, b"".join(payloads)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    index, payload = _encode_blocks({"weights": ckpt.weights, "momentum": ckpt.momentum})
    header = json.dumps(
        {
            "epoch": ckpt.epoch,
            "config": ckpt.config,
            "loss_history": ckpt.loss_history,
            "blocks": index,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated checkpoint file {path}")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version = int(np.frombuffer(raw, "<u4", count=1, offset=pos)[0])
    if version != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (this build reads version {VERSION})"
        )
    pos += 4
    header_len = int(np.frombuffer(raw, "<u4", count=1, offset=pos)[0])
    pos += 4
    if len(raw) < pos + header_len:
        raise CheckpointError(f"truncated checkpoint file {path} (header cut short)")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header in {path}: {exc}") from exc
    payload = raw[pos + header_len :]

    groups = {"weights": {}, "momentum": {}}
    for block in header["blocks"]:
        start, nbytes = block["offset"], block["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(
                f"truncated checkpoint file {path}: block '{block['name']}' is cut short"
            )
        data = payload[start : start + nbytes]
        if zlib.crc32(data) != block["crc32"]:
            raise CheckpointError(f"corrupted payload for block '{block['name']}' in {path}")
        arr = np.frombuffer(data, "<f8").reshape(block["shape"]).copy()
        if block.get("integral"):
            arr = arr.astype(np.int64)
        group, name = block["name"].split("/", 1)
        groups[group][name] = arr
    return Checkpoint(
        epoch=header["epoch"],
        config=header["config"],
        weights=groups["weights"],
        momentum=groups["momentum"],
        loss_history=header["loss_history"],
    )

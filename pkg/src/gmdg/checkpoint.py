"""Versioned, language-neutral checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"GMDGCKPT"
    4 bytes   uint32 format version
    8 bytes   uint64 header length L
    L bytes   UTF-8 canonical JSON header
    ...       tensor payload, IEEE-754 / two's complement little-endian

The header holds the architecture descriptor, training metadata, the sha256 of
the payload and a manifest entry per tensor: name, dtype, shape, byte offset
into the payload, byte length and group ("parameter" or "normalization").
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import Architecture, UNet, norm_layers

MAGIC = b"GMDGCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class Checkpoint:
    architecture: Architecture
    state_dict: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, metadata=None):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.arch, state, dict(metadata or {}))

    def build_model(self):
        model = UNet(self.architecture)
        dtypes = {v.dtype for k, v in self.state_dict.items() if v.is_floating_point()}
        if len(dtypes) == 1:
            model = model.to(dtypes.pop())
        try:
            model.load_state_dict(self.state_dict)
        except RuntimeError as exc:
            raise CheckpointError(f"architecture mismatch: {exc}") from exc
        model.eval()
        return model

    @property
    def class_prior(self):
        return np.asarray(self.metadata["class_prior"], dtype=np.float64)


def _group_of(name, norm_names):
    prefix = name.rsplit(".", 1)[0]
    if prefix in norm_names and name.rsplit(".", 1)[1] in (
            "running_mean", "running_var", "num_batches_tracked"):
        return "normalization"
    return "parameter"


def save_checkpoint(model, path, metadata=None):
    ckpt = model if isinstance(model, Checkpoint) else Checkpoint.from_model(model, metadata)
    norm_names = {n for n, _ in norm_layers(UNet(ckpt.architecture))}
    manifest, chunks, offset = [], [], 0
    for name, tensor in ckpt.state_dict.items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        dt = _DTYPES[tensor.dtype]
        raw = np.ascontiguousarray(tensor.cpu().numpy(), dtype=dt).tobytes()
        manifest.append({"name": name, "dtype": dt, "shape": list(tensor.shape),
                         "offset": offset, "nbytes": len(raw),
                         "group": _group_of(name, norm_names)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": ckpt.architecture.to_dict(),
        "metadata": ckpt.metadata,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": manifest,
    }
    hbytes = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return ckpt


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != version:
        raise CheckpointVersionError(f"{path}: header/preamble version disagree")
    payload = blob[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    state = {}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        arr = np.frombuffer(payload[start:stop], dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[entry["dtype"]])
    arch = Architecture.from_dict(header["architecture"])
    return Checkpoint(arch, state, header["metadata"])

"""Checkpoint persistence.

File layout::

    FEWSEG-CHECKPOINT 1
    <header byte count>
    <JSON header: iteration, run config, parameter manifest>
    <little-endian raw parameter blocks, in manifest order>
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from .errors import CheckpointCorruptError, ManifestMismatchError
from .models import RunConfig
from .unet import FewShotUNet

LOGGER = logging.getLogger(__name__)

MAGIC = b"FEWSEG-CHECKPOINT 1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass
class Checkpoint:
    config: RunConfig
    iteration: int
    state: dict[str, torch.Tensor]

    @classmethod
    def from_model(cls, model: FewShotUNet, config: RunConfig, iteration: int) -> "Checkpoint":
        state = {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}
        return cls(config=config, iteration=iteration, state=state)

    def build_model(self) -> FewShotUNet:
        """Instantiates the architecture from the config snapshot and loads the parameters."""
        model = FewShotUNet(self.config.unet)
        expected = model.state_dict()
        missing = sorted(set(expected) - set(self.state))
        unexpected = sorted(set(self.state) - set(expected))
        if missing or unexpected:
            raise ManifestMismatchError(
                f"parameter names differ from the architecture: missing={missing} unexpected={unexpected}"
            )
        for name, tensor in self.state.items():
            if tuple(tensor.shape) != tuple(expected[name].shape):
                raise ManifestMismatchError(
                    f"parameter '{name}' has shape {tuple(tensor.shape)}, "
                    f"architecture expects {tuple(expected[name].shape)}"
                )
        model.load_state_dict(self.state)
        return model.eval()


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in checkpoint.state.items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointCorruptError(f"parameter '{name}' has unsupported dtype {tensor.dtype}")
        blob = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": _DTYPES[tensor.dtype],
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "iteration": checkpoint.iteration,
        "config": checkpoint.config.model_dump(mode="json"),
        "params": manifest,
    }
    header_bytes = json.dumps(header, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    with path.open("wb") as handle:
        handle.write(MAGIC + b"\n")
        handle.write(f"{len(header_bytes)}\n".encode("ascii"))
        handle.write(header_bytes)
        for blob in blobs:
            handle.write(blob)
    LOGGER.info("Saved checkpoint path=%s iteration=%d params=%d", path, checkpoint.iteration, len(manifest))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint '{path}'") from exc

    magic, _, rest = raw.partition(b"\n")
    if magic != MAGIC:
        raise CheckpointCorruptError(f"'{path}' is not a checkpoint file")
    size_line, _, rest = rest.partition(b"\n")
    try:
        header_size = int(size_line)
        header = json.loads(rest[:header_size].decode("utf-8"))
        params = header["params"]
        iteration = int(header["iteration"])
        config = RunConfig.model_validate(header["config"])
    except ValidationError as exc:
        raise CheckpointCorruptError(f"'{path}' holds an invalid run config") from exc
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"'{path}' has an unreadable header") from exc

    payload = rest[header_size:]
    expected_size = sum(int(entry["nbytes"]) for entry in params)
    if len(payload) != expected_size:
        raise CheckpointCorruptError(
            f"'{path}' is truncated or padded: {len(payload)} payload bytes, manifest lists {expected_size}"
        )

    state: dict[str, torch.Tensor] = {}
    running_offset = 0
    for entry in params:
        try:
            dtype = np.dtype(entry["dtype"])
        except TypeError as exc:
            raise CheckpointCorruptError(f"unknown dtype {entry['dtype']!r} in '{path}'") from exc
        shape = tuple(int(d) for d in entry["shape"])
        nbytes = int(entry["nbytes"])
        if math.prod(shape) * dtype.itemsize != nbytes:
            raise ManifestMismatchError(
                f"parameter '{entry['name']}' shape {shape} does not match its {nbytes} stored bytes"
            )
        start = int(entry["offset"])
        if start != running_offset or start + nbytes > len(payload):
            raise ManifestMismatchError(
                f"parameter '{entry['name']}' at offset {start}, expected {running_offset}"
            )
        running_offset += nbytes
        values = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(shape)
        state[entry["name"]] = torch.from_numpy(values.astype(dtype.newbyteorder("="), copy=True))
    return Checkpoint(config=config, iteration=iteration, state=state)

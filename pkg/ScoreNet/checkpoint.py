"""Binary checkpoint format for :class:`ScoreModel`.

Little-endian layout::

    b"SDF1"                      magic
    u32  format version
    u32  n, n bytes              config block (UTF-8 JSON: {"config": ..., "meta": ...})
    u32  dtype, u32 n, n values  frequency block (empty for the U-Net baseline)
    u32  dtype, u64 n, n values  parameter block (flat layout of ScoreModel)
    u32  CRC32 of everything above
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from ScoreNet.model import ScoreModel, ScoreModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"SDF1"
FORMAT_VERSION = 1

_DTYPES = {1: (torch.float32, "<f4"), 2: (torch.float64, "<f8")}
_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


class CheckpointFormatError(RuntimeError):
    """Raised when a checkpoint file is truncated, corrupt or not a checkpoint."""


class CheckpointVersionError(CheckpointFormatError):
    """Raised when a checkpoint was written by another format version."""


@dataclass
class LoadedCheckpoint:
    model: ScoreModel
    meta: Dict[str, Any] = field(default_factory=dict)


def _array_block(values: torch.Tensor, count_format: str) -> bytes:
    code = _CODES.get(values.dtype)
    if code is None:
        raise CheckpointFormatError(f"Unsupported dtype {values.dtype}")
    raw = values.detach().cpu().contiguous().numpy().astype(_DTYPES[code][1]).tobytes()
    return struct.pack("<I" + count_format, code, values.numel()) + raw


def encode_model(model: ScoreModel, meta: Optional[Dict[str, Any]] = None) -> bytes:
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    frequencies = model.fourier_frequencies if model.noise_conditioned else torch.zeros(0, dtype=torch.float64)
    parameters = torch.nn.utils.parameters_to_vector(model.parameters()).detach()

    body = bytearray(MAGIC)
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(header)) + header
    body += _array_block(frequencies.reshape(-1), "I")
    body += _array_block(parameters, "Q")
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_model(model: ScoreModel, path: Path, meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model, meta))
    logger.info("Saved %s checkpoint to %s", model.config.method, path)
    return path


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count_format: str) -> torch.Tensor:
        code, count = self.unpack("<I" + count_format)
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{self.source}: unknown dtype code {code}")
        torch_dtype, np_dtype = _DTYPES[code]
        raw = self.take(count * np.dtype(np_dtype).itemsize)
        return torch.from_numpy(np.frombuffer(raw, dtype=np_dtype).copy()).to(torch_dtype)


def decode_model(data: bytes, source: str = "<bytes>") -> LoadedCheckpoint:
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError(f"{source}: not a score-model checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint format version {version} is not supported (expected version {FORMAT_VERSION})"
        )
    if len(data) < 8:
        raise CheckpointFormatError(f"{source}: truncated checkpoint")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError(f"{source}: checksum mismatch (truncated or corrupt file)")

    (header_len,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ScoreModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{source}: unreadable config block ({exc})") from exc

    frequencies = reader.array("I")
    parameters = reader.array("Q")
    if reader.pos != len(data) - 4:
        raise CheckpointFormatError(f"{source}: trailing bytes before checksum")

    model = ScoreModel(config).to(parameters.dtype)
    if parameters.numel() != model.num_parameters():
        raise CheckpointFormatError(
            f"{source}: parameter block holds {parameters.numel()} values, config needs {model.num_parameters()}"
        )
    model.load_flat_parameters(parameters)
    if config.noise_conditioned:
        if frequencies.numel() != config.fourier_dim:
            raise CheckpointFormatError(f"{source}: frequency block size mismatch")
        model.fourier.frequencies.copy_(frequencies.to(model.fourier.frequencies.dtype))
    return LoadedCheckpoint(model=model, meta=header.get("meta", {}))


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    path = Path(path)
    return decode_model(path.read_bytes(), str(path))


def load_model(path: Path) -> ScoreModel:
    return load_checkpoint(path).model

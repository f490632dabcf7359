"""16-bit binary PGM (P5) reading and writing.

Samples are big-endian ``uint16`` with maxval 65535; sample ``v`` encodes the
intensity ``v / 65535``.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch

MAXVAL = 65535


class PGMFormatError(ValueError):
    """Raised when a file is not a 16-bit P5 PGM image."""


def quantize(image: torch.Tensor) -> np.ndarray:
    """Intensities in [0, 1] → uint16 samples (round half to even)."""
    array = image.detach().to(torch.float64).cpu().numpy()
    if array.ndim == 3:
        if array.shape[0] != 1:
            raise PGMFormatError(f"PGM holds a single channel, got shape {array.shape}")
        array = array[0]
    if array.ndim != 2:
        raise PGMFormatError(f"Expected an (H, W) or (1, H, W) image, got shape {array.shape}")
    return np.rint(np.clip(array, 0.0, 1.0) * MAXVAL).astype(np.uint16)


def write_pgm(path: Path, image: torch.Tensor) -> Path:
    samples = quantize(image)
    height, width = samples.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    path.write_bytes(header + samples.astype(">u2").tobytes())
    return path


def _header_tokens(data: bytes) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMFormatError("Truncated PGM header")
        tokens.append(data[start:pos])
    # Exactly one whitespace byte separates maxval from the raster.
    return tokens, pos + 1


def read_pgm_samples(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data)
    if tokens[0] != b"P5":
        raise PGMFormatError(f"{path}: magic {tokens[0]!r} is not P5")
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:])
    except ValueError as exc:
        raise PGMFormatError(f"{path}: malformed header") from exc
    if maxval != MAXVAL:
        raise PGMFormatError(f"{path}: maxval {maxval} is not {MAXVAL}")
    expected = width * height * 2
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise PGMFormatError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    return np.frombuffer(raster, dtype=">u2").reshape(height, width).astype(np.uint16)


def read_pgm(path: Path, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Decode to a ``(1, H, W)`` tensor of intensities in [0, 1]."""
    samples = read_pgm_samples(path)
    return torch.from_numpy(samples.astype(np.float64) / MAXVAL).to(dtype)[None]

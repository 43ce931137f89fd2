"""Binary netpbm readers/writers (P6 color, P5 16-bit gray, P4 bitmap).

All writers are deterministic byte-for-byte: fixed header layout, row-major
pixel order, big-endian 16-bit samples for P5, MSB-first bit packing for P4.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write an HxWx3 unit-interval raster as binary P6 with maxval 255."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 raster, got shape {image.shape}")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6, returning an HxWx3 float64 raster in [0, 1]."""
    magic, dims, maxval, payload = _read_binary(path, want=b"P6", n_dims=3)
    w, h = dims[0], dims[1]
    if maxval != 255:
        raise ValueError(f"unsupported P6 maxval {maxval}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm16(path, values: np.ndarray) -> None:
    """Write an HxW array of uint16 samples as binary P5 with maxval 65535."""
    if values.ndim != 2:
        raise ValueError(f"expected HxW array, got shape {values.shape}")
    data = values.astype(">u2")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Read binary P5 with maxval 65535, returning an HxW uint16 array."""
    magic, dims, maxval, payload = _read_binary(path, want=b"P5", n_dims=3)
    w, h = dims[0], dims[1]
    if maxval != 65535:
        raise ValueError(f"unsupported P5 maxval {maxval}")
    samples = np.frombuffer(payload, dtype=">u2", count=h * w)
    return samples.reshape(h, w).astype(np.uint16)


def write_pbm(path, mask: np.ndarray) -> None:
    """Write an HxW binary mask as P4 (bit 1 = set pixel, MSB first)."""
    if mask.ndim != 2:
        raise ValueError(f"expected HxW mask, got shape {mask.shape}")
    bits = (mask != 0).astype(np.uint8)
    h, w = mask.shape
    packed = np.packbits(bits, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def read_pbm(path) -> np.ndarray:
    """Read P4, returning an HxW uint8 mask of 0/1."""
    magic, dims, _, payload = _read_binary(path, want=b"P4", n_dims=2)
    w, h = dims[0], dims[1]
    row_bytes = (w + 7) // 8
    packed = np.frombuffer(payload, dtype=np.uint8, count=h * row_bytes)
    bits = np.unpackbits(packed.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(np.uint8)


def _read_binary(path, want: bytes, n_dims: int):
    """Parse a binary netpbm header: magic, whitespace-separated ints, payload."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(want):
        raise ValueError(f"not a {want.decode()} file: {path}")
    pos = len(want)
    fields = []
    # P4 headers carry 2 ints (w h); P5/P6 carry 3 (w h maxval).
    needed = 2 if n_dims == 2 else 3
    while len(fields) < needed:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after the header
    dims = fields[:2]
    maxval = fields[2] if needed == 3 else 1
    return want, dims, maxval, raw[pos:]

"""File formats: Netpbm images, the EEGF flow container and the EEGM model snapshot.

EEGF layout (little-endian)::

    b"EEGF" | version u16 | bands u16 | pairs u16 | h u16 | w u16
    | f32 dx, dy planes, band-major then pair | lo f32 | hi f32

EEGM layout (little-endian)::

    b"EEGM" | version u16 | tensor count u32
    | per tensor: name length u16, utf-8 name, ndim u8, dims u32 each, f32 data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

FLOW_MAGIC = b"EEGF"
MODEL_MAGIC = b"EEGM"
VERSION = 1


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValidationError("PGM needs a 2-D uint8 image", "formats")
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValidationError("PPM needs an (H, W, 3) uint8 image", "formats")
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def read_netpbm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated Netpbm header", "formats")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: only 8-bit P5/P6 files are supported", "formats")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def to_u8(image: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max normalise to 0..255 (all zeros for a constant image)."""
    image = np.asarray(image, dtype=float)
    lo = float(image.min()) if lo is None else lo
    hi = float(image.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(image.shape, np.uint8)
    return np.clip(np.rint((image - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def flow_container_bytes(flow: np.ndarray, lo: float, hi: float) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 5 or flow.shape[2] != 2:
        raise ValidationError(f"flow must be (bands, pairs, 2, h, w), got {flow.shape}", "formats")
    bands, pairs, _, h, w = flow.shape
    head = FLOW_MAGIC + struct.pack("<5H", VERSION, bands, pairs, h, w)
    body = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    return head + body + struct.pack("<2f", lo, hi)


def write_flow_container(path: str | Path, flow: np.ndarray, lo: float, hi: float) -> None:
    Path(path).write_bytes(flow_container_bytes(flow, lo, hi))


def read_flow_container(path: str | Path) -> tuple[np.ndarray, float, float]:
    """Returns (flow (bands, pairs, 2, h, w) float32, lo, hi)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ValidationError(f"{path}: not an EEGF flow container", "formats")
    version, bands, pairs, h, w = struct.unpack_from("<5H", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported EEGF version {version}", "formats")
    n = bands * pairs * 2 * h * w
    offset = 4 + 10
    if len(raw) != offset + 4 * n + 8:
        raise ValidationError(f"{path}: EEGF size does not match its header", "formats")
    flow = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(bands, pairs, 2, h, w)
    lo, hi = struct.unpack_from("<2f", raw, offset + 4 * n)
    return flow.astype(np.float32), lo, hi


def write_model(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MODEL_MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_model(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValidationError(f"{path}: not an EEGM model snapshot", "formats")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported EEGM version {version}", "formats")
    pos = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        dims = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims).astype(float)
        pos += 4 * size
    return out

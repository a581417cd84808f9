"""IDX datasets, PGM image grids and the POEC checkpoint format.

POEC layout (all integers little-endian)::

    b"POEC"              magic
    u32                  format version (currently 1)
    u32                  number of sections
    repeated, sorted by name:
        u16  name length, then the ASCII name
        u8   kind: 0 = float64 array, 1 = UTF-8 text
        kind 0: u32 ndim, ndim x u64 dims, prod(dims) x f64 (little-endian, C order)
        kind 1: u64 byte length, then the bytes

Only the names in :data:`SECTION_NAMES` are accepted.
"""

from __future__ import annotations

import os
import struct
from importlib import resources
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 31

CHECKPOINT_MAGIC = b"POEC"
CHECKPOINT_VERSION = 1
KIND_ARRAY = 0
KIND_TEXT = 1

SECTION_NAMES = frozenset(
    [
        "conv.filters1",
        "conv.filters2",
        "conv.bias1",
        "conv.bias2",
        "conv.dec_bias2",
        "conv.dec_bias1",
        "conv.meta",
        "encoder.w",
        "decoder.u",
        "stats.sums",
        "stats.counts",
        "config.conv",
        "config.caps",
        "config.decoder",
    ]
)


def sample_data_path() -> str:
    """Path of the bundled 64-image IDX file used for smoke tests."""
    return str(resources.files("capspoe") / "data" / "tiny-images-idx3-ubyte")


class IdxFormatError(ValueError):
    """Malformed or truncated IDX file."""


class IdxLabelFileError(IdxFormatError):
    """An IDX label file was given where an image file was expected."""


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass
class IdxDataset:
    images: np.ndarray  # (count, rows, cols, 1), values in [0, 1]
    count: int
    rows: int
    cols: int


def _read_header(buf, path):
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file shorter than the IDX magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic >> 16 != 0:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    dtype_code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if dtype_code != 0x08:
        raise IdxFormatError(f"{path}: only unsigned-byte IDX data is supported (type 0x{dtype_code:02x})")
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    total = 1
    for d in dims:
        total *= d
        if total > MAX_IDX_ELEMENTS:
            raise IdxFormatError(f"{path}: declared dimensions {dims} are too large")
    if len(buf) - end < total:
        raise IdxFormatError(f"{path}: truncated data, expected {total} bytes, found {len(buf) - end}")
    return magic, dims, end, total


def load_idx_images(path) -> IdxDataset:
    """Parse an IDX image file (magic 0x00000803) and scale pixels by 1/255."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, dims, start, total = _read_header(buf, path)
    if magic == IDX_LABELS_MAGIC:
        raise IdxLabelFileError(f"{path}: this is an IDX label file, not images")
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    count, rows, cols = dims
    pixels = np.frombuffer(buf, dtype=np.uint8, count=total, offset=start)
    images = pixels.reshape(count, rows, cols, 1).astype(np.float64) / 255.0
    return IdxDataset(images=images, count=count, rows=rows, cols=cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic, dims, start, total = _read_header(buf, path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    return np.frombuffer(buf, dtype=np.uint8, count=total, offset=start).copy()


def write_idx_images(images, path):
    """Write ``(count, rows, cols)`` uint8 data as an IDX image file."""
    images = np.asarray(images)
    if images.ndim == 4 and images.shape[-1] == 1:
        images = images[..., 0]
    if images.dtype != np.uint8:
        images = quantize(images)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def quantize(pixels) -> np.ndarray:
    """[0, 1] floats to bytes by ``round(255 p)`` (half away from zero), clipped."""
    p = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def tile_images(images, cols: int) -> np.ndarray:
    """Row-major tiling of equally sized grey images into one array.

    Missing tiles in the last row are left black.
    """
    imgs = [np.asarray(im, dtype=np.float64) for im in images]
    if not imgs:
        raise ValueError("no images to tile")
    imgs = [im[..., 0] if im.ndim == 3 else im for im in imgs]
    h, w = imgs[0].shape
    if any(im.shape != (h, w) for im in imgs):
        raise ValueError("all images in a grid must share one shape")
    if cols < 1:
        raise ValueError("cols must be positive")
    cols = min(cols, len(imgs))
    rows = -(-len(imgs) // cols)
    grid = np.zeros((rows * h, cols * w))
    for k, im in enumerate(imgs):
        r, c = divmod(k, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = im
    return grid


def save_image_grid(images, cols: int, path):
    """Write images as a binary PGM (P5) grid, ``cols`` tiles per row."""
    data = quantize(tile_images(images, cols))
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM with maxval 255 into a uint8 array."""
    with open(path, "rb") as f:
        buf = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only P5 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    if len(buf) - pos < w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def encode_checkpoint(sections: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sections))]
    for name in sorted(sections):
        if name not in SECTION_NAMES:
            raise CheckpointError(f"unknown section name {name!r}")
        raw = name.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw)
        value = sections[name]
        if isinstance(value, str):
            text = value.encode("utf-8")
            parts.append(struct.pack("<BQ", KIND_TEXT, len(text)) + text)
        else:
            arr = np.asarray(value, dtype="<f8", order="C")
            parts.append(struct.pack("<BI", KIND_ARRAY, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    pos = 0
    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a POEC checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("ascii")
        except UnicodeDecodeError as exc:
            raise CheckpointError("section name is not ASCII") from exc
        if name not in SECTION_NAMES:
            raise CheckpointError(f"unknown section name {name!r}")
        if name in sections:
            raise CheckpointError(f"duplicate section {name!r}")
        (kind,) = struct.unpack("<B", take(1))
        if kind == KIND_TEXT:
            (length,) = struct.unpack("<Q", take(8))
            sections[name] = take(length).decode("utf-8")
        elif kind == KIND_ARRAY:
            (ndim,) = struct.unpack("<I", take(4))
            if ndim > 8:
                raise CheckpointError(f"section {name!r} declares {ndim} dimensions")
            shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
            n = 1
            for d in shape:
                n *= d
            if 8 * n > len(buf) - pos:
                raise CheckpointError(f"section {name!r}: shape {shape} exceeds remaining data")
            sections[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        else:
            raise CheckpointError(f"section {name!r} has unknown kind {kind}")
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last section")
    return sections


def save_checkpoint(sections: dict, path):
    data = encode_checkpoint(sections)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def format_config(values: dict) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def parse_config(text: str) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out

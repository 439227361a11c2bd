"""Image file formats.

``IMF1`` is the lossless working format: an ASCII header line
``IMF1 <height> <width>\\n`` followed by ``height * width`` little-endian
float32 samples in row-major order.

Binary PGM (``P5``) is supported at 8 and 16 bits for interchange and
visualization; samples map linearly from [0, 1] and are clamped on write.
"""
from __future__ import annotations

import os
import re

import numpy as np

from .image import DTYPE, as_image

IMF1_MAGIC = b"IMF1"
_IMF1_HEADER = re.compile(rb"IMF1 (\d+) (\d+)\n")


class FormatError(ValueError):
    pass


def encode_imf1(img: np.ndarray) -> bytes:
    img = as_image(img)
    h, w = img.shape
    return b"IMF1 %d %d\n" % (h, w) + img.astype("<f4").tobytes()


def decode_imf1(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one IMF1 block starting at ``offset``.

    Returns the image and the offset just past the block so that
    concatenated blocks can be read in sequence.
    """
    if blob[offset:offset + 4] != IMF1_MAGIC:
        raise FormatError(
            f"bad magic: expected b'IMF1', found {blob[offset:offset + 4]!r}"
        )
    m = _IMF1_HEADER.match(blob, offset)
    if m is None:
        raise FormatError("malformed IMF1 header")
    h, w = int(m.group(1)), int(m.group(2))
    if h < 1 or w < 1:
        raise FormatError(f"invalid IMF1 dimensions {h}x{w}")
    start = m.end()
    nbytes = 4 * h * w
    payload = blob[start:start + nbytes]
    if len(payload) != nbytes:
        raise FormatError(
            f"truncated IMF1 payload: header declares {h}x{w} = {h * w} values, "
            f"found {len(payload) // 4}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(DTYPE)
    if not np.all(np.isfinite(data)):
        raise FormatError("IMF1 payload contains NaN or Inf")
    return data, start + nbytes


def encode_pgm(img: np.ndarray, bits: int = 16) -> bytes:
    if bits not in (8, 16):
        raise FormatError(f"PGM bit depth must be 8 or 16, got {bits}")
    img = as_image(img, dtype=np.float64)
    maxval = (1 << bits) - 1
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    h, w = img.shape
    header = b"P5\n%d %d\n%d\n" % (w, h, maxval)
    dtype = ">u2" if bits == 16 else "u1"
    return header + q.astype(dtype).tobytes()


def _pgm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    # header tokens are whitespace separated; '#' starts a comment to end of line
    tokens = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header: unexpected end of file")
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise FormatError("malformed PGM header: missing raster separator")
    return tokens, pos + 1


def decode_pgm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P5":
        raise FormatError(f"unsupported magic {blob[:2]!r}: only binary P5 PGM is read")
    tokens, start = _pgm_tokens(blob, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed PGM header: {exc}") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PGM header values w={w} h={h} maxval={maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = w * h * dtype.itemsize
    payload = blob[start:start + nbytes]
    if len(payload) != nbytes:
        raise FormatError(
            f"truncated PGM payload: expected {nbytes} bytes, found {len(payload)}"
        )
    q = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return (q.astype(np.float64) / maxval).astype(DTYPE)


def read_image(path) -> np.ndarray:
    """Read an IMF1 or binary PGM file, detected from its magic bytes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] == IMF1_MAGIC:
        img, end = decode_imf1(blob)
        if end != len(blob):
            raise FormatError(f"{path}: {len(blob) - end} trailing bytes after IMF1 payload")
        return img
    if blob[:2] == b"P5":
        return decode_pgm(blob)
    raise FormatError(f"{path}: unsupported magic {blob[:4]!r} (expected IMF1 or P5)")


def write_image(img: np.ndarray, path, bits: int = 16) -> None:
    """Write ``img`` as PGM when ``path`` ends in ``.pgm``, else as IMF1."""
    if os.fspath(path).lower().endswith(".pgm"):
        blob = encode_pgm(img, bits=bits)
    else:
        blob = encode_imf1(img)
    with open(path, "wb") as fh:
        fh.write(blob)

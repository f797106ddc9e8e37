"""Binary PGM (P5) reading and writing.

Images are handled internally as float32 arrays in [0, 1]; on disk they are
8-bit (maxval 255) or 16-bit big-endian (maxval 65535) samples.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

MAXVALS = (255, 65535)


def _header_tokens(buf):
    """Parse the three header integers after ``P5``; returns (tokens, data offset)."""
    tokens = []
    pos = 2
    n = len(buf)
    while len(tokens) < 3:
        if pos >= n:
            raise FormatError("truncated PGM header", offset=pos)
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in PGM header", offset=pos)
            pos = end + 1
        elif c.isdigit():
            start = pos
            while pos < n and buf[pos : pos + 1].isdigit():
                pos += 1
            tokens.append(int(buf[start:pos]))
        else:
            raise FormatError(f"unexpected byte {c!r} in PGM header", offset=pos)
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM maxval", offset=pos)
    return tokens, pos + 1


def decode_pgm(buf: bytes):
    """Return ``(samples, maxval)`` with integer samples of shape (H, W)."""
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {buf[:2]!r})", offset=0)
    (width, height, maxval), offset = _header_tokens(buf)
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM dimensions {width}x{height}", offset=offset)
    if maxval not in MAXVALS:
        raise FormatError(f"unsupported PGM maxval {maxval}", offset=offset)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = buf[offset:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated PGM payload: {len(payload)} of {expected} bytes", offset=len(buf)
        )
    if len(payload) > expected:
        raise FormatError("trailing bytes after PGM payload", offset=offset + expected)
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    if (samples > maxval).any():
        raise FormatError("PGM sample exceeds maxval", offset=offset)
    return samples.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_pgm(samples, maxval=255) -> bytes:
    samples = np.asarray(samples)
    if maxval not in MAXVALS:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    if samples.ndim != 2:
        raise FormatError(f"PGM holds a 2-D image, got shape {samples.shape}")
    height, width = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    return header + samples.astype(dtype).tobytes()


def quantize(image, maxval=255):
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * maxval).astype(
        np.uint16 if maxval > 255 else np.uint8
    )


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def read_image(path):
    """Read a P5 file as float32 in [0, 1]."""
    samples, maxval = read_pgm(path)
    return (samples.astype(np.float64) / maxval).astype(np.float32)


def write_image(image, path, maxval=255):
    """Write a [0, 1] float image (values are clipped, then rounded)."""
    data = encode_pgm(quantize(image, maxval), maxval)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)

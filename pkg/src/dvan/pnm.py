"""Binary PPM (P6) and PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _header_token(buf: bytes, pos: int):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated header comment", pos)
            pos = end + 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], start, pos


def decode(buf: bytes):
    """Parse a P5/P6 file into ``(pixels, maxval)``; pixels are ``(H, W, C)`` integers."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ParseError("not a binary PGM/PPM file (expected P5 or P6)", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    if len(buf) < 3 or buf[2:3] not in _WHITESPACE:
        raise ParseError("magic number must be followed by whitespace", 2)
    pos = 2
    values = []
    for label in ("width", "height", "maxval"):
        tok, at, pos = _header_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"{label} is not a decimal integer: {tok[:16]!r}", at)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", 2)
    if not 1 <= maxval <= 65535:
        raise ParseError(f"maxval {maxval} outside 1..65535", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    depth = 1 if maxval < 256 else 2
    need = width * height * channels * depth
    if len(buf) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    dtype = np.uint8 if depth == 1 else ">u2"
    pixels = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    pixels = pixels.reshape(height, width, channels)
    if np.any(pixels > maxval):
        raise ParseError("sample exceeds maxval", pos)
    return pixels.astype(np.uint16 if depth == 2 else np.uint8), maxval


def encode(pixels: np.ndarray) -> bytes:
    """Encode an 8-bit ``(H, W)``, ``(H, W, 1)`` or ``(H, W, 3)`` array."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise ValueError("encode expects uint8 samples")
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Channel-major floats in [0, 1] to an ``(H, W, C)`` uint8 array."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image: np.ndarray) -> None:
    """Write a ``(C, H, W)`` float image; 1 channel gives P5, 3 give P6."""
    Path(path).write_bytes(encode(to_bytes(image)))


def write_gray(path, values: np.ndarray) -> None:
    """Write a 2-D uint8 array as P5."""
    Path(path).write_bytes(encode(np.asarray(values, dtype=np.uint8)))


def read_image(path) -> np.ndarray:
    """Load P5/P6 as ``(C, H, W)`` float64 scaled to [0, 1]."""
    pixels, maxval = decode(Path(path).read_bytes())
    return pixels.transpose(2, 0, 1).astype(np.float64) / float(maxval)

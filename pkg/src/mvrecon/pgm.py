"""Binary (P5) PGM reading and writing with values mapped linearly to [0, 1]."""

from __future__ import annotations

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                if end < 0:
                    raise PGMError("unterminated comment in header")
                pos = end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError("malformed PGM header")
        out.append(int(data[start:pos]))
    return out, pos


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Return the integer pixel array and its maxval."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise PGMError("only binary grayscale (P5) PGM is supported")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    if not data[pos:pos + 1].isspace():
        raise PGMError("malformed PGM header")
    pos += 1
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise PGMError("unsupported PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(data) - pos < need:
        raise PGMError("truncated PGM pixel data")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.int64), maxval


def read_pgm(path) -> np.ndarray:
    img, maxval = read_pgm_raw(path)
    return img / float(maxval)


def write_pgm(path, image, bits: int = 16):
    """Write a 2-D array of values in [0, 1] (clipped) as an 8- or 16-bit PGM."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    write_pgm_raw(path, q, maxval)


def write_pgm_raw(path, pixels, maxval: int):
    pixels = np.asarray(pixels)
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise ValueError("pixel values exceed maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(pixels.astype(dtype).tobytes())


def image_io(mode: str, path, image=None, bits: int = 16):
    """``image_io("read", path)`` or ``image_io("write", path, image)``."""
    if mode == "read":
        return read_pgm(path)
    if mode == "write":
        return write_pgm(path, image, bits)
    raise ValueError("mode must be 'read' or 'write'")

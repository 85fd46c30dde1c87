"""Binary PGM (P5) and PPM (P6) codec, maxval 255 only."""

import os

import numpy as np

from .errors import PnmError

_WHITESPACE = b" \t\n\r\v\f"


class _Header:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def skip_space(self):
        buf = self.buf
        while self.pos < len(buf):
            ch = buf[self.pos:self.pos + 1]
            if ch == b"#":
                end = buf.find(b"\n", self.pos)
                if end < 0:
                    raise PnmError("comment runs to end of file", self.pos)
                self.pos = end + 1
            elif ch in _WHITESPACE:
                self.pos += 1
            else:
                return

    def integer(self, what):
        self.skip_space()
        start = self.pos
        while self.pos < len(self.buf) and self.buf[self.pos:self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise PnmError(f"expected {what}", start)
        if self.pos < len(self.buf) and self.buf[self.pos:self.pos + 1] not in _WHITESPACE \
                and self.buf[self.pos:self.pos + 1] != b"#":
            raise PnmError(f"malformed {what}", self.pos)
        return int(self.buf[start:self.pos]), start


def decode(buf):
    """Parse a P5/P6 byte string into a uint8 array of shape (H, W) or (H, W, 3)."""
    if len(buf) < 2:
        raise PnmError("file too short for a magic number", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}", 0)
    hdr = _Header(buf)
    hdr.pos = 2
    if hdr.pos < len(buf) and buf[2:3] not in _WHITESPACE and buf[2:3] != b"#":
        raise PnmError("magic number must be followed by whitespace", 2)
    width, width_at = hdr.integer("width")
    height, height_at = hdr.integer("height")
    maxval, maxval_at = hdr.integer("maxval")
    if width < 1 or height < 1:
        raise PnmError(f"non-positive size {width}x{height}", width_at if width < 1 else height_at)
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval}", maxval_at)
    if hdr.pos >= len(buf) or buf[hdr.pos:hdr.pos + 1] not in _WHITESPACE:
        raise PnmError("missing whitespace before raster", hdr.pos)
    start = hdr.pos + 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    have = len(buf) - start
    if have < need:
        raise PnmError(f"truncated raster: need {need} bytes, have {have}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return data.reshape(shape).copy()


def encode(arr):
    """Encode a uint8 (H, W) array as P5 or an (H, W, 3) array as P6."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNM raster must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read(path):
    with open(path, "rb") as fp:
        return decode(fp.read())


def write(arr, path):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fp:
        fp.write(encode(arr))
    os.replace(tmp, path)

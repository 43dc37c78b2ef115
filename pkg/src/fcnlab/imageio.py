"""Minimal 8-bit image I/O: binary PGM/PPM (P5/P6) and PNG (gray or RGB).

Arrays are uint8, shaped (h, w) for gray and (h, w, 3) for RGB.  Parse
errors carry the byte offset where decoding failed.
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ParseError

_WS = b" \t\r\n"


def _as_uint8(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"expected (h, w) or (h, w, 3) array, got {arr.shape}")
    return np.ascontiguousarray(arr)


# -- PNM -------------------------------------------------------------------------

def encode_pnm(arr):
    arr = _as_uint8(arr)
    magic = b"P5" if arr.ndim == 2 else b"P6"
    h, w = arr.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + arr.tobytes()


def decode_pnm(data, path=None):
    if data[:2] not in (b"P5", b"P6"):
        raise ParseError("not a binary PGM/PPM (expected P5 or P6)", 0, path)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            raise ParseError("expected whitespace between header fields", pos, path)
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        tok_start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        token = data[tok_start:pos]
        if not token:
            raise ParseError("truncated header", tok_start, path)
        if not token.isdigit():
            raise ParseError(f"expected a decimal number, found {token[:16]!r}", tok_start, path)
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", pos, path)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", pos, path)
    if pos >= len(data) or data[pos] not in _WS:
        raise ParseError("missing whitespace after maxval", pos, path)
    pos += 1
    need = width * height * channels
    if len(data) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(data) - pos}",
                         len(data), path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape).copy()


# -- PNG -------------------------------------------------------------------------

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind, payload):
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF))


def encode_png(arr):
    arr = _as_uint8(arr)
    h, w = arr.shape[:2]
    color = 0 if arr.ndim == 2 else 2
    rows = arr.reshape(h, -1)
    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw, h, stride, bpp, path, base):
    out = bytearray(h * stride)
    prev = bytearray(stride)
    pos = 0
    for y in range(h):
        if pos >= len(raw):
            raise ParseError("image data ends early", base, path)
        ftype = raw[pos]
        line = bytearray(raw[pos + 1:pos + 1 + stride])
        if len(line) != stride:
            raise ParseError("image data ends early", base, path)
        pos += 1 + stride
        if ftype == 1:
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:
            for i in range(stride):
                line[i] = (line[i] + prev[i]) & 0xFF
        elif ftype == 3:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up_left = prev[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + _paeth(left, prev[i], up_left)) & 0xFF
        elif ftype != 0:
            raise ParseError(f"unknown PNG filter type {ftype}", base, path)
        out[y * stride:(y + 1) * stride] = line
        prev = line
    return bytes(out)


def decode_png(data, path=None):
    if data[:8] != PNG_SIGNATURE:
        raise ParseError("missing PNG signature", 0, path)
    pos = 8
    header = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(data):
            raise ParseError("truncated chunk header", pos, path)
        length, kind = struct.unpack(">I4s", data[pos:pos + 8])
        body_start = pos + 8
        if body_start + length + 4 > len(data):
            raise ParseError(f"truncated {kind.decode('latin-1')} chunk", pos, path)
        payload = data[body_start:body_start + length]
        (crc,) = struct.unpack(">I", data[body_start + length:body_start + length + 4])
        if crc != zlib.crc32(kind + payload) & 0xFFFFFFFF:
            raise ParseError(f"CRC mismatch in {kind.decode('latin-1')} chunk", pos, path)
        if kind == b"IHDR":
            if length != 13:
                raise ParseError("IHDR chunk has wrong length", pos, path)
            header = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            if idat_offset is None:
                idat_offset = body_start
            idat.append(payload)
        elif kind == b"IEND":
            break
        pos = body_start + length + 4
    if header is None:
        raise ParseError("no IHDR chunk", 8, path)
    w, h, depth, color, _, _, interlace = header
    if depth != 8 or color not in (0, 2) or interlace != 0:
        raise ParseError("only non-interlaced 8-bit gray or RGB PNGs are supported", 16, path)
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ParseError(f"corrupt image data ({exc})", idat_offset, path) from None
    channels = 1 if color == 0 else 3
    pixels = _unfilter(raw, h, w * channels, channels, path, idat_offset)
    arr = np.frombuffer(pixels, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


# -- files -------------------------------------------------------------------------

def save_image(path, arr):
    path = Path(path)
    if path.suffix.lower() == ".png":
        path.write_bytes(encode_png(arr))
    elif path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        path.write_bytes(encode_pnm(arr))
    else:
        raise ValueError(f"unsupported image extension {path.suffix!r}")


def load_image(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data, path)
    return decode_pnm(data, path)

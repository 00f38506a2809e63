"""8-bit PNG and binary PGM/PPM reading and writing (stdlib zlib only).

Supported PNG inputs: bit depth 8, color types gray, RGB, gray+alpha and
RGBA (alpha is dropped), non-interlaced.  Writers produce gray or RGB.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


class ImageFormatError(ValueError):
    pass


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def encode_png(pixels: np.ndarray, text: dict[str, str] | None = None) -> bytes:
    """Encode an H x W (gray) or H x W x 3 (RGB) uint8 array."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ImageFormatError(f"PNG writer expects uint8 pixels, got {px.dtype}")
    if px.ndim == 2:
        color, channels = 0, 1
    elif px.ndim == 3 and px.shape[2] == 3:
        color, channels = 2, 3
    else:
        raise ImageFormatError(f"unsupported pixel array shape {px.shape}")
    h, w = px.shape[:2]
    rows = px.reshape(h, w * channels)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    out = [PNG_SIGNATURE, _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0))]
    for key, value in (text or {}).items():
        out.append(_chunk(b"tEXt", key.encode("latin-1") + b"\x00" + value.encode("latin-1")))
    out.append(_chunk(b"IDAT", zlib.compress(raw, 9)))
    out.append(_chunk(b"IEND", b""))
    return b"".join(out)


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        line = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for i in range(bpp, stride):
                cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (3, 4):
            cur = line.copy()
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b = prev[i]
                if ftype == 3:
                    cur[i] = (cur[i] + ((a + b) >> 1)) & 0xFF
                else:
                    c = prev[i - bpp] if i >= bpp else 0
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                    cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise ImageFormatError(f"invalid PNG filter type {ftype} on row {y}")
        out[y] = cur
        prev = cur
    return out


def decode_png(blob: bytes) -> tuple[np.ndarray, dict[str, str]]:
    """Return (H x W or H x W x 3 uint8 pixels, tEXt entries)."""
    if not blob.startswith(PNG_SIGNATURE):
        raise ImageFormatError("not a PNG file")
    pos = len(PNG_SIGNATURE)
    header = None
    idat = []
    text = {}
    while True:
        if pos + 8 > len(blob):
            raise ImageFormatError("truncated PNG: missing IEND")
        length, tag = struct.unpack(">I4s", blob[pos: pos + 8])
        data = blob[pos + 8: pos + 8 + length]
        if len(data) != length or pos + 12 + length > len(blob):
            raise ImageFormatError(f"truncated PNG chunk {tag!r}")
        (crc,) = struct.unpack(">I", blob[pos + 8 + length: pos + 12 + length])
        if zlib.crc32(tag + data) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"CRC mismatch in PNG chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif tag == b"IDAT":
            idat.append(data)
        elif tag == b"tEXt":
            k, _, v = data.partition(b"\x00")
            text[k.decode("latin-1")] = v.decode("latin-1")
        elif tag == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG without IHDR")
    w, h, depth, color, _, _, interlace = header
    if depth != 8 or color not in _CHANNELS:
        raise ImageFormatError(f"unsupported PNG: bit depth {depth}, color type {color}")
    if interlace:
        raise ImageFormatError("interlaced PNG is not supported")
    channels = _CHANNELS[color]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG image data: {exc}") from None
    if len(raw) != h * (w * channels + 1):
        raise ImageFormatError("PNG image data has the wrong length")
    px = _unfilter(raw, h, w * channels, channels).reshape(h, w, channels)
    if channels == 1:
        px = px[:, :, 0]
    elif channels == 2:
        px = px[:, :, 0]
    elif channels == 4:
        px = px[:, :, :3]
    return np.ascontiguousarray(px), text


def _pnm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(blob) and blob[pos: pos + 1].isspace():
            pos += 1
        if blob[pos: pos + 1] == b"#":
            while pos < len(blob) and blob[pos: pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def decode_pnm(blob: bytes) -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError("only binary PGM (P5) and PPM (P6) are supported")
    (w, h, maxval), pos = _pnm_tokens(blob, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ImageFormatError("16-bit PNM is not supported")
    channels = 1 if magic == b"P5" else 3
    n = w * h * channels
    if len(blob) - pos < n:
        raise ImageFormatError(f"truncated PNM: expected {n} bytes of pixel data")
    px = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return px.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def encode_pnm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    magic = b"P5" if px.ndim == 2 else b"P6"
    return magic + f"\n{px.shape[1]} {px.shape[0]}\n255\n".encode() + px.tobytes()


def read_pixels(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob.startswith(PNG_SIGNATURE):
        return decode_png(blob)[0]
    if blob[:2] in (b"P5", b"P6"):
        return decode_pnm(blob)
    raise ImageFormatError(f"{path}: unsupported image format (PNG or binary PGM/PPM expected)")


def load_image(path) -> np.ndarray:
    """Channel-first float array in [0, 1] (1 channel for gray, 3 for color)."""
    px = read_pixels(path)
    arr = px.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def save_image(path, values: np.ndarray, text: dict[str, str] | None = None) -> None:
    """Write a [0, 1] array (H x W or C x H x W) as PNG, or PGM/PPM by suffix."""
    v = np.asarray(values)
    if v.ndim == 3:
        v = v[0] if v.shape[0] == 1 else v.transpose(1, 2, 0)
    px = to_uint8(v)
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        path.write_bytes(encode_pnm(px))
    else:
        path.write_bytes(encode_png(px, text))

"""File formats: binary PGM/PPM, 8-bit PNG, raw float64 tensor dumps.

Images are uint8 arrays of shape (H, W) or (H, W, C).
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError, IoError

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# PNM
# ---------------------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # single whitespace byte ends the header


def decode_pnm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"not a binary PGM/PPM (magic {magic!r})")
    try:
        (w, h, maxval), pos = _pnm_tokens(buf, 3)
    except ValueError as exc:
        raise DataError("malformed PNM header") from exc
    if not 0 < maxval < 256:
        raise DataError(f"only 8-bit PNM supported (maxval {maxval})")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    raw = buf[pos:pos + n]
    if len(raw) != n:
        raise DataError("truncated PNM pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, ch)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img[:, :, 0].copy() if ch == 1 else img.copy()


def encode_pnm(img: np.ndarray, comment: str | None = None) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise DataError(f"cannot encode image of shape {img.shape} as PNM")
    if comment:
        header = header[:3] + f"# {comment}\n" + header[3:]
    return header.encode("ascii") + np.ascontiguousarray(img).tobytes()


# ---------------------------------------------------------------------------
# PNG (8-bit, non-interlaced)
# ---------------------------------------------------------------------------

_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_PNG_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _unfilter(data: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(h):
        ftype = data[pos]
        line = np.frombuffer(data[pos + 1:pos + 1 + stride], dtype=np.uint8).astype(np.int32)
        pos += 1 + stride
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        else:
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) >> 1
                elif ftype == 4:
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                else:
                    raise DataError(f"bad PNG filter type {ftype}")
                cur[x] = (line[x] + pred) & 0xFF
        out[y] = cur
        prev = cur
    return out


def decode_png(buf: bytes) -> np.ndarray:
    if not buf.startswith(_PNG_SIG):
        raise DataError("not a PNG file")
    pos, idat, ihdr = 8, [], None
    while pos + 8 <= len(buf):
        length, ctype = struct.unpack(">I4s", buf[pos:pos + 8])
        chunk = buf[pos + 8:pos + 8 + length]
        pos += 12 + length
        if ctype == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", chunk)
        elif ctype == b"IDAT":
            idat.append(chunk)
        elif ctype == b"IEND":
            break
    if ihdr is None:
        raise DataError("PNG without IHDR")
    w, h, depth, ctype, _, _, interlace = ihdr
    if depth != 8 or interlace != 0 or ctype not in _PNG_CHANNELS:
        raise DataError("only 8-bit non-interlaced grey/RGB(A) PNG is supported")
    ch = _PNG_CHANNELS[ctype]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise DataError("corrupt PNG data stream") from exc
    if len(raw) < h * (w * ch + 1):
        raise DataError("truncated PNG data")
    img = _unfilter(raw, h, w * ch, ch).reshape(h, w, ch)
    if ch == 2:
        img = img[:, :, :1]
    elif ch == 4:
        img = img[:, :, :3]
    return img[:, :, 0].copy() if img.shape[2] == 1 else img.copy()


def encode_png(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    ctype = 0 if img.ndim == 2 else 2
    h, w = img.shape[:2]
    rows = img.reshape(h, -1)
    raw = b"".join(b"\x00" + r.tobytes() for r in rows)

    def chunk(tag: bytes, data: bytes) -> bytes:
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    return (_PNG_SIG + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0))
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# path-level helpers
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if buf.startswith(_PNG_SIG):
        return decode_png(buf)
    return decode_pnm(buf)


def write_image(path, img: np.ndarray, comment: str | None = None) -> None:
    """PNG by suffix, otherwise PGM/PPM; ``comment`` goes into the PNM header."""
    path = Path(path)
    data = encode_png(img) if path.suffix.lower() == ".png" else encode_pnm(img, comment)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_raw_tensor(path, arr: np.ndarray, cfg_hash: str, extra: dict | None = None) -> Path:
    """Write little-endian float64 data plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    arr = np.asarray(arr, dtype=np.float64)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {"shape": list(arr.shape), "dtype": "<f8", "config_hash": cfg_hash, **(extra or {})}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(arr.astype("<f8").tobytes())
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return sidecar


def read_raw_tensor(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"])
    return arr.astype(np.float64), meta


def heatmap_to_image(m: np.ndarray) -> np.ndarray:
    """Linear rescale of a 2-D map to 0..255 (a flat map becomes all zeros)."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)

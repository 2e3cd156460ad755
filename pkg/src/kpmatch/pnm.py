"""Binary PPM (P6) and PGM (P5) with 8-bit samples.

Images are float arrays in ``[0, 1]``: ``3×H×W`` for colour, ``H×W`` for
grey.  Quantisation rounds to the nearest of 256 levels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM needs a 3×H×W image, got {img.shape}")
    _, h, w = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(img.transpose(1, 2, 0)).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs an H×W image, got {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes()


def _header(blob: bytes):
    # magic, width, height, maxval separated by whitespace, comments allowed
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError("image header ends early")
        fields.append(blob[start:pos])
    # exactly one whitespace byte separates header and raster
    return fields, pos + 1


def decode_pnm(blob: bytes) -> np.ndarray:
    fields, pos = _header(blob)
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError("malformed image header") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"only 8-bit images are supported (maxval {maxval}, size {w}x{h})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    have = len(blob) - pos
    if have < need:
        raise TruncatedFileError(f"image raster has {max(have, 0)} of {need} bytes")
    raster = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    values = raster.astype(np.float64) / 255.0
    if channels == 1:
        return values.reshape(h, w)
    return values.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path, img) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())

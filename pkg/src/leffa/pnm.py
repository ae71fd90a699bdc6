"""Binary PPM (P6) and PGM (P5) images, 8 bits per sample."""
from __future__ import annotations

import os

import numpy as np


class FormatError(ValueError):
    pass


def _encode(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    if image.min(initial=0.0) < -1e-6 or image.max(initial=0.0) > 1 + 1e-6:
        raise ValueError(f"image values must lie in [0, 1], got [{image.min()}, {image.max()}]")
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image) -> bytes:
    """``(3, H, W)`` floats in [0, 1] to P6 bytes."""
    image = np.asarray(getattr(image, "data", image))
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    pixels = _encode(image).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def encode_pgm(image) -> bytes:
    """``(1, H, W)`` or ``(H, W)`` floats in [0, 1] to P5 bytes."""
    image = np.asarray(getattr(image, "data", image))
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {image.shape}")
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + _encode(image).tobytes()


def _parse_header(blob: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if blob[:2] != magic:
        raise FormatError(f"expected {magic.decode()} magic, got {blob[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise FormatError("truncated header")
        if blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated header comment")
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed header token at byte {start}")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"unsupported header values {fields}")
    return width, height, maxval, pos + 1


def decode_ppm(blob: bytes) -> np.ndarray:
    w, h, maxval, offset = _parse_header(blob, b"P6")
    payload = blob[offset:offset + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise FormatError(f"expected {3 * w * h} pixel bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1) / float(maxval)).astype(np.float32)


def decode_pgm(blob: bytes) -> np.ndarray:
    w, h, maxval, offset = _parse_header(blob, b"P5")
    payload = blob[offset:offset + w * h]
    if len(payload) != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(1, h, w)
    return (pixels / float(maxval)).astype(np.float32)


def write_ppm(image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_pgm(image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())

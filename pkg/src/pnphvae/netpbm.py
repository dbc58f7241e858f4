"""Binary PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

import numpy as np

from .core_math import ImageGrid


class NetpbmError(ValueError):
    pass


def _tokens(blob: bytes, n: int):
    """First ``n`` header tokens and the offset just past the single
    whitespace byte that ends the header."""
    out, i = [], 0
    while len(out) < n:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= len(blob):
            raise NetpbmError(f"header ends early at byte {i}")
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace() and blob[i : i + 1] != b"#":
            i += 1
        out.append((start, blob[start:i]))
    if i >= len(blob) or not blob[i : i + 1].isspace():
        raise NetpbmError(f"missing whitespace after header at byte {i}")
    return out, i + 1


def decode(blob: bytes) -> ImageGrid:
    if len(blob) < 2:
        raise NetpbmError("file too short for a magic number at byte 0")
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} at byte 0")
    toks, off = _tokens(blob, 4)
    vals = []
    for pos, tok in toks[1:]:
        if not tok.isdigit():
            raise NetpbmError(f"expected a positive integer at byte {pos}, got {tok!r}")
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height} at byte {toks[1][0]}")
    if maxval not in (255, 65535):
        raise NetpbmError(f"unsupported maxval {maxval} at byte {toks[3][0]}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    if len(blob) - off < need:
        raise NetpbmError(f"payload truncated at byte {len(blob)}: need {need} bytes from byte {off}")
    raw = np.frombuffer(blob, dtype=dtype, count=width * height * channels, offset=off)
    arr = raw.astype(float) / maxval
    arr = arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)
    return ImageGrid(arr)


def quantize(arr, maxval: int = 255) -> np.ndarray:
    """Clamp to [0, 1] and round half up to integer levels."""
    a = np.clip(np.asarray(arr, dtype=float), 0.0, 1.0)
    return np.floor(a * maxval + 0.5).astype(np.int64)


def encode(img, maxval: int = 255) -> bytes:
    if maxval not in (255, 65535):
        raise NetpbmError(f"unsupported maxval {maxval}")
    arr = img.as_array() if isinstance(img, ImageGrid) else np.asarray(img, dtype=float)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot encode an array of shape {arr.shape}")
    q = quantize(arr, maxval)
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    return magic + f"\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii") + payload


def read_image(path) -> ImageGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return decode(blob)
    except NetpbmError as exc:
        raise NetpbmError(f"{path}: {exc}") from None


def write_image(path, img, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img, maxval))

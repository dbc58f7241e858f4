"""Versioned parameter files.

Layout: an ASCII header, one directive per line, then a raw payload::

    PNPHVAE-PARAMS 1
    kind <model kind>
    levels <L>
    dims <d_0> ... <d_{L-1}>
    xshape <n_0> ...
    meta <key>=<value> ...          (optional, repeatable)
    tensor <name> <n_0> ...          (one per tensor, declaration order)
    data float64-le
    <payload: every tensor in declaration order, C order, little-endian f64>
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAGIC = "PNPHVAE-PARAMS"
VERSION = 1
_DATA_LINE = "data float64-le"


class ParamFileError(ValueError):
    pass


@dataclass
class ParamFile:
    kind: str
    dims: list
    x_shape: tuple
    tensors: dict  # name -> ndarray, insertion order is declaration order
    meta: dict = field(default_factory=dict)


def _fmt_meta_value(v) -> str:
    s = repr(v) if isinstance(v, float) else str(v)
    if any(ch.isspace() for ch in s) or "=" in s:
        raise ParamFileError(f"metadata value {s!r} may not contain whitespace or '='")
    return s


def dumps(pf: ParamFile) -> bytes:
    lines = [
        f"{MAGIC} {VERSION}",
        f"kind {pf.kind}",
        f"levels {len(pf.dims)}",
        "dims " + " ".join(str(int(d)) for d in pf.dims),
        "xshape " + " ".join(str(int(n)) for n in pf.x_shape),
    ]
    if pf.meta:
        lines.append("meta " + " ".join(f"{k}={_fmt_meta_value(v)}" for k, v in pf.meta.items()))
    payload = []
    for name, arr in pf.tensors.items():
        arr = np.asarray(arr, dtype=float)
        if any(ch.isspace() for ch in name):
            raise ParamFileError(f"tensor name {name!r} contains whitespace")
        lines.append(" ".join(["tensor", name, *(str(n) for n in arr.shape)]))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    lines.append(_DATA_LINE)
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(payload)


def loads(blob: bytes) -> ParamFile:
    offset = 0
    header = []
    while True:
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise ParamFileError(f"unterminated header at byte {offset}")
        try:
            line = blob[offset:nl].decode("ascii")
        except UnicodeDecodeError as exc:
            raise ParamFileError(f"non-ASCII header line at byte {offset}") from exc
        header.append((offset, line))
        offset = nl + 1
        if line == _DATA_LINE:
            break
    first_off, first = header[0]
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise ParamFileError(f"bad magic at byte {first_off}: {first!r}")
    if int(parts[1]) != VERSION:
        raise ParamFileError(f"unsupported parameter file version {parts[1]}")

    kind, levels, dims, x_shape = None, None, None, ()
    meta: dict = {}
    shapes: list = []
    for off, line in header[1:-1]:
        key, _, rest = line.partition(" ")
        vals = rest.split()
        if key == "kind":
            kind = rest.strip()
        elif key == "levels":
            levels = int(rest)
        elif key == "dims":
            dims = [int(v) for v in vals]
        elif key == "xshape":
            x_shape = tuple(int(v) for v in vals)
        elif key == "meta":
            for item in vals:
                k, eq, v = item.partition("=")
                if not eq:
                    raise ParamFileError(f"malformed metadata {item!r} at byte {off}")
                meta[k] = v
        elif key == "tensor":
            if not vals:
                raise ParamFileError(f"tensor line without a name at byte {off}")
            shapes.append((vals[0], tuple(int(v) for v in vals[1:])))
        else:
            raise ParamFileError(f"unknown header directive {key!r} at byte {off}")
    if kind is None or dims is None:
        raise ParamFileError("header is missing 'kind' or 'dims'")
    if levels is not None and levels != len(dims):
        raise ParamFileError(f"levels={levels} disagrees with {len(dims)} dims")

    tensors = {}
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(blob):
            raise ParamFileError(f"payload truncated in tensor {name!r} at byte {offset}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(float).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ParamFileError(f"{len(blob) - offset} trailing bytes after payload at byte {offset}")
    return ParamFile(kind=kind, dims=dims, x_shape=x_shape, tensors=tensors, meta=meta)


def save(path, pf: ParamFile) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(pf))


def load(path) -> ParamFile:
    with open(path, "rb") as fh:
        return loads(fh.read())

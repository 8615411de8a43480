"""Checkpoint archive: named fp32 arrays behind a text manifest.

Layout (all offsets relative to the start of the data blob):

    PHOTOGEO-CKPT-1\n
    <count>\n
    <name> <dim0,dim1,...> <byte offset>\n   (one line per array)
    \n
    <raw little-endian fp32 data>

Array names carry a ``param/`` or ``buffer/`` prefix so network weights
and batch-norm statistics round-trip together.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["HEADER", "save_checkpoint", "load_checkpoint",
           "pack_model", "unpack_model"]

HEADER = "PHOTOGEO-CKPT-1"


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as fp32 with a text manifest."""
    items = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} must not contain whitespace")
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        items.append(f"{name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = f"{HEADER}\n{len(items)}\n" + "\n".join(items) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(manifest.encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, _, rest = raw.partition(b"\n")
    if head.decode("ascii", errors="replace") != HEADER:
        raise ValueError(f"not a {HEADER} checkpoint: {path}")
    count_line, _, rest = rest.partition(b"\n")
    count = int(count_line)
    entries = []
    for _ in range(count):
        line, _, rest = rest.partition(b"\n")
        name, shape_s, off_s = line.decode("ascii").split(" ")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        entries.append((name, shape, int(off_s)))
    blank, _, blob = rest.partition(b"\n")
    if blank:
        raise ValueError("malformed checkpoint manifest")
    out = {}
    for name, shape, off in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        out[name] = arr.reshape(shape).copy()
    return out


def pack_model(params: dict[str, Tensor],
               buffers: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays.update({f"buffer/{k}": v for k, v in buffers.items()})
    return arrays


def unpack_model(arrays: dict[str, np.ndarray]):
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr.astype(np.float32), requires_grad=True)
        elif kind == "buffer":
            buffers[key] = arr.astype(np.float32)
        else:
            raise ValueError(f"unknown checkpoint entry {name!r}")
    return params, buffers

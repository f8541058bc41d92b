"""Binary checkpoint format for :class:`MlpParams`.

Layout (all integers little-endian)::

    8 bytes   magic  b"PNERFCKP"
    u32       format version
    u32       length of the architecture descriptor
    bytes     descriptor, UTF-8 JSON with sorted keys
    u8        precision tag (32 or 64)
    ...       every tensor, row-major little-endian scalars, declaration order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ChecksumMismatch, VersionMismatch
from .mlp import Architecture, MlpParams

MAGIC = b"PNERFCKP"
FORMAT_VERSION = 1


def dumps(params: MlpParams) -> bytes:
    arch = params.arch
    desc = json.dumps(arch.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<B", arch.precision))
    le = np.dtype(arch.dtype).newbyteorder("<")
    for t in params.tensors:
        buf.write(np.ascontiguousarray(t, dtype=le).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> MlpParams:
    if data[:8] != MAGIC:
        raise ChecksumMismatch("not a checkpoint file (bad magic)")
    version, n = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    pos = 16
    arch = Architecture(**json.loads(data[pos:pos + n].decode("utf-8")))
    pos += n
    (precision,) = struct.unpack_from("<B", data, pos)
    pos += 1
    if precision != arch.precision:
        raise ChecksumMismatch("precision tag disagrees with descriptor")
    le = np.dtype(arch.dtype).newbyteorder("<")
    tensors = []
    for _, shape in arch.tensor_shapes():
        count = int(np.prod(shape))
        nbytes = count * le.itemsize
        if pos + nbytes > len(data):
            raise ChecksumMismatch("checkpoint truncated")
        tensors.append(np.frombuffer(data, dtype=le, count=count, offset=pos).reshape(shape).astype(arch.dtype))
        pos += nbytes
    if pos != len(data):
        raise ChecksumMismatch("trailing bytes after last tensor")
    return MlpParams(arch, tensors)


def save_checkpoint(params: MlpParams, path) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path) -> MlpParams:
    return loads(Path(path).read_bytes())

"""Binary checkpoint format for :class:`~sslstm.network.NetworkParams`.

Layout (all integers u32 little-endian, all reals f64 little-endian)::

    b"SSLM" | version | D | H | C | n_layers
    for each layer: w_x, w_h, bias      (each: rows | cols | row-major payload)
    w_hc, bias_c
    crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError
from .network import NetworkParams

MAGIC = b"SSLM"
VERSION = 1


def encode(net: NetworkParams) -> bytes:
    dims = net.dims
    parts = [MAGIC, struct.pack("<5I", VERSION, dims.n_inputs, dims.n_hidden, dims.n_classes, dims.n_layers)]
    for a in net.arrays():
        parts.append(struct.pack("<2I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> NetworkParams:
    if len(blob) < 4 + 20 + 4 or blob[:4] != MAGIC:
        raise DataError("not an SSLM checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError("checkpoint CRC mismatch")
    version, d, h, c, n_layers = struct.unpack_from("<5I", body, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    expected = []
    d_in = d
    for _ in range(n_layers):
        expected += [(4 * h, d_in), (4 * h, h), (4 * h, 1)]
        d_in = h
    expected += [(c, h), (c, 1)]

    offset = 24
    arrays = []
    for shape in expected:
        rows, cols = struct.unpack_from("<2I", body, offset)
        offset += 8
        if (rows, cols) != shape:
            raise DataError(f"checkpoint array shape {(rows, cols)}, expected {shape}")
        n = rows * cols
        if offset + 8 * n > len(body):
            raise DataError("truncated checkpoint")
        arrays.append(np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(rows, cols))
        offset += 8 * n
    if offset != len(body):
        raise DataError("trailing bytes in checkpoint")
    return NetworkParams.from_arrays(arrays)


def save(net: NetworkParams, path: str | Path) -> None:
    Path(path).write_bytes(encode(net))


def load(path: str | Path) -> NetworkParams:
    return decode(Path(path).read_bytes())

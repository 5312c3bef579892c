from __future__ import annotations

import struct
import zlib

import numpy as np
import pytest

from sslstm import checkpoint
from sslstm.errors import DataError
from sslstm.network import NetworkDims, forward_window, init_params


@pytest.fixture
def net():
    return init_params(NetworkDims(5, 7, 3, 2), 42)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, net, tmp_path):
        path = tmp_path / "m.sslm"
        checkpoint.save(net, path)
        back = checkpoint.load(path)
        assert back.equals(net)
        x = np.random.default_rng(0).normal(size=(2, 9, 5))
        a, _, _ = forward_window(net, x)
        b, _, _ = forward_window(back, x)
        assert a.tobytes() == b.tobytes()

    def test_layout(self, net):
        blob = checkpoint.encode(net)
        assert blob[:4] == b"SSLM"
        assert struct.unpack_from("<5I", blob, 4) == (1, 5, 7, 3, 2)
        payload = sum(8 + 8 * a.size for a in net.arrays())
        assert len(blob) == 24 + payload + 4
        assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
        # first array header and first weight
        assert struct.unpack_from("<2I", blob, 24) == (28, 5)
        assert struct.unpack_from("<d", blob, 32)[0] == net.layers[0].w_x[0, 0]

    def test_encoding_is_deterministic(self, net):
        assert checkpoint.encode(net) == checkpoint.encode(net.copy())

    def test_bad_magic(self, net):
        blob = bytearray(checkpoint.encode(net))
        blob[0:4] = b"XXXX"
        with pytest.raises(DataError, match="magic"):
            checkpoint.decode(bytes(blob))

    def test_crc_detects_flip(self, net):
        blob = bytearray(checkpoint.encode(net))
        blob[100] ^= 1
        with pytest.raises(DataError, match="CRC"):
            checkpoint.decode(bytes(blob))

    def test_truncated(self, net):
        with pytest.raises(DataError):
            checkpoint.decode(checkpoint.encode(net)[:50])

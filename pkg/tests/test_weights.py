import struct
import zlib

import numpy as np
import pytest

from gendissect import nn, scenes, weights


def test_round_trip_bit_exact(planted, tmp_path):
    net, _ = planted
    path = tmp_path / "model.gdw"
    weights.save_weights(net, path)
    loaded = weights.load_weights(path)
    assert loaded.split_index == net.split_index
    assert loaded.latent_dim == net.latent_dim
    assert len(loaded.layers) == len(net.layers)
    for a, b in zip(net.layers, loaded.layers):
        assert a.kind == b.kind
        if a.kernel is not None:
            assert a.kernel.tobytes() == b.kernel.tobytes()
            assert a.bias.tobytes() == b.bias.tobytes()
    z = scenes.sample_z(11, 2)
    assert np.array_equal(nn.forward(net, z).image, nn.forward(loaded, z).image)


def test_save_load_twice_identical_bytes(planted, tmp_path):
    net, _ = planted
    p1, p2 = tmp_path / "a.gdw", tmp_path / "b.gdw"
    weights.save_weights(net, p1)
    weights.save_weights(net, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.gdw"
    path.write_bytes(b"XXXX" + bytes(32))
    with pytest.raises(weights.BadMagicError):
        weights.load_weights(path)


def test_truncated_file(planted, tmp_path):
    net, _ = planted
    path = tmp_path / "model.gdw"
    weights.save_weights(net, path)
    data = path.read_bytes()
    clipped = data[:len(data) // 2]
    # keep the footer shape valid so truncation is detected inside the body
    body = clipped[:-12] if len(clipped) > 12 else clipped
    path.write_bytes(body + struct.pack("<III", 3, 32, zlib.crc32(body)))
    with pytest.raises(weights.TruncatedFileError):
        weights.load_weights(path)


def test_dimension_mismatch(tmp_path):
    # dense layer declaring an out_shape inconsistent with its output count
    body = weights.MAGIC + struct.pack("<I", 1)
    body += struct.pack("<B", 1)                       # dense
    body += struct.pack("<I", 4) + struct.pack("<4I", 4, 2, 3, 3)   # out=4 but 3x3 shape
    body += np.zeros(4 * 2 + 4, dtype="<f4").tobytes()
    footer = struct.pack("<III", 1, 2, zlib.crc32(body))
    path = tmp_path / "dim.gdw"
    path.write_bytes(body + footer)
    with pytest.raises(weights.DimensionMismatchError):
        weights.load_weights(path)


def test_checksum_error(planted, tmp_path):
    net, _ = planted
    path = tmp_path / "model.gdw"
    weights.save_weights(net, path)
    data = bytearray(path.read_bytes())
    data[100] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(weights.ChecksumError):
        weights.load_weights(path)


def test_error_classes_distinct():
    classes = {weights.BadMagicError, weights.TruncatedFileError,
               weights.DimensionMismatchError, weights.ChecksumError}
    assert len(classes) == 4
    for cls in classes:
        assert issubclass(cls, weights.WeightFormatError)

import struct
import zlib

import numpy as np
import pytest

from bcqtune import bcq, qfile
from bcqtune import toymodel as tm
from bcqtune.alphatune import TrainConfig, train
from bcqtune.bcq import ROW, QuantConfig
from bcqtune.errors import (BadMagicError, ChecksumError, CompatibilityError, ConfigError, IntegrityError,
                            VersionError)
from bcqtune.tasks import make_reversal, reversal_vocab


def recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def saved_and_loaded(model, path):
    qfile.save_model(path, model)
    return qfile.load_model(path)


@pytest.fixture
def reversal_base(tmp_path):
    cfg = tm.ModelConfig(vocab=reversal_vocab(), h=16, n_layers=1, n_ctx=12, q=2)
    model = tm.quantize_model(tm.init_dense(cfg, 4), QuantConfig(q=2))
    return saved_and_loaded(model, tmp_path / "base.bcq")


# -- BCQ1 --------------------------------------------------------------------------------------

def test_model_roundtrip_byte_identical(tiny_model, tmp_path):
    a = tmp_path / "a.bcq"
    b = tmp_path / "b.bcq"
    digest = qfile.save_model(a, tiny_model)
    qfile.save_model(b, qfile.load_model(a))
    assert a.read_bytes() == b.read_bytes()
    assert qfile.load_model(a).base_hash == digest


def test_model_roundtrip_dequantized_exact_at_f32(tiny_model, tmp_path):
    loaded = saved_and_loaded(tiny_model, tmp_path / "m.bcq")
    for (_, a), (_, b) in zip(tiny_model.linear_layers(), loaded.linear_layers()):
        ref = a.weights.copy()
        for s in ref.scales:
            s.values[...] = s.values.astype(np.float32)
        assert np.array_equal(bcq.dequantize(ref), bcq.dequantize(b.weights))
        assert np.array_equal(a.bias.astype(np.float32), b.bias)
        assert all(np.array_equal(p.words, r.words) for p, r in zip(a.weights.planes, b.weights.planes))


def test_model_config_roundtrip(tmp_path):
    cfg = tm.ModelConfig(vocab=9, h=8, n_layers=1, n_ctx=5)
    m = tm.quantize_model(tm.init_dense(cfg, 0), QuantConfig(q=1, g=ROW))
    assert saved_and_loaded(m, tmp_path / "r.bcq").config == m.config


def test_truncated_file_is_integrity_error(tiny_model, tmp_path):
    data = qfile.serialize_model(tiny_model)
    for cut in (0, 3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(IntegrityError):
            qfile.deserialize_model(data[:cut])


def test_truncated_body_with_valid_crc(tiny_model):
    body = qfile.serialize_model(tiny_model)[:-4]
    with pytest.raises(IntegrityError):
        qfile.deserialize_model(recrc(body[:-17]))
    with pytest.raises(IntegrityError):
        qfile.deserialize_model(recrc(body + b"\0"))


def test_flipped_byte_is_checksum_error(tiny_model):
    data = bytearray(qfile.serialize_model(tiny_model))
    for pos in (5, 40, len(data) // 2, len(data) - 5):
        bad = data.copy()
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            qfile.deserialize_model(bytes(bad))


def test_bad_magic(tiny_model):
    data = qfile.serialize_model(tiny_model)
    with pytest.raises(BadMagicError):
        qfile.deserialize_model(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        qfile.deserialize_checkpoint(data)


def test_version_mismatch(tiny_model):
    body = bytearray(qfile.serialize_model(tiny_model)[:-4])
    body[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionError):
        qfile.deserialize_model(recrc(bytes(body)))


def test_errors_are_distinct():
    assert len({BadMagicError, ChecksumError, VersionError}) == 3
    assert not issubclass(ChecksumError, BadMagicError) and not issubclass(VersionError, ChecksumError)


def test_dense_roundtrip(tmp_path):
    cfg = tm.ModelConfig(vocab=7, h=8, n_layers=2, n_ctx=4)
    m = tm.init_dense(cfg, 1)
    qfile.save_dense(tmp_path / "d.bin", m)
    back = qfile.load_dense(tmp_path / "d.bin")
    assert qfile.serialize_dense(back) == qfile.serialize_dense(m)
    with pytest.raises(ConfigError):
        qfile.serialize_model(m)


# -- BCQA --------------------------------------------------------------------------------------

def test_checkpoint_apply_roundtrip(reversal_base, tmp_path):
    trained = reversal_base.copy()
    train(trained, make_reversal(32), TrainConfig(lr=1e-2, epochs=1))
    qfile.save_checkpoint(tmp_path / "t.ckpt", trained)
    restored = qfile.apply_checkpoint(reversal_base.copy(), tmp_path / "t.ckpt")
    for (_, a), (_, b) in zip(trained.linear_layers(), restored.linear_layers()):
        for s, r in zip(a.weights.scales, b.weights.scales):
            assert np.array_equal(s.values.astype(np.float32), r.values)
    assert tm.frozen_digest(restored) == tm.frozen_digest(reversal_base)


def test_checkpoint_touches_only_its_planes(reversal_base):
    ckpt = qfile.deserialize_checkpoint(qfile.serialize_checkpoint(reversal_base, planes=(1,)))
    for per in ckpt.scales:
        per[1][...] = 7.0
    target = reversal_base.copy()
    qfile.apply_checkpoint(target, ckpt)
    for (_, a), (_, b) in zip(reversal_base.linear_layers(), target.linear_layers()):
        assert np.all(b.weights.scales[0].values == 7.0)
        assert np.array_equal(a.weights.scales[1].values, b.weights.scales[1].values)


def test_checkpoint_hash_mismatch(reversal_base, tmp_path):
    qfile.save_checkpoint(tmp_path / "t.ckpt", reversal_base)
    cfg = reversal_base.config
    other = saved_and_loaded(tm.quantize_model(tm.init_dense(cfg, 99), QuantConfig(q=2)), tmp_path / "o.bcq")
    with pytest.raises(CompatibilityError):
        qfile.apply_checkpoint(other, tmp_path / "t.ckpt")


def test_checkpoint_corruption(reversal_base):
    data = bytearray(qfile.serialize_checkpoint(reversal_base))
    data[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        qfile.deserialize_checkpoint(bytes(data))


def test_checkpoint_size_matches_prediction(reversal_base):
    data = qfile.serialize_checkpoint(reversal_base, planes=(1, 2))
    assert len(data) == qfile.checkpoint_file_size(reversal_base.config, ROW, (1, 2))


# -- storage arithmetic --------------------------------------------------------------------------

def test_model_file_size_exact(tiny_model, tmp_path):
    qfile.save_model(tmp_path / "m.bcq", tiny_model)
    assert (tmp_path / "m.bcq").stat().st_size == qfile.model_file_size(tiny_model.config, 3, 4)


def test_layer_section_padding_reported():
    s = qfile.layer_size("x", 3, 72, 2, ROW)
    assert s.plane_bytes == 54
    assert s.plane_padding_bytes == 2 * 3 * 16 - 54
    assert s.on_disk_bytes == 12 + 2 * 3 * 16 + 4 * 2 * 3


@pytest.mark.parametrize("name, q, g, expected_bytes", [
    ("att_qkv", 1, ROW, 405_504),
])
def test_layer_bytes_hand_example(name, q, g, expected_bytes):
    rows = {s.name: s for s in qfile.size_report(qfile.GPT2_MEDIUM, q, g)}
    assert rows[name].total_bytes == expected_bytes


def test_size_report_examples():
    ffn = {q: {s.name: s for s in qfile.size_report(qfile.GPT2_MEDIUM, q, 512)}["ffn_4h_h"].total_mb
           for q in (3,)}
    assert abs(ffn[3] - 1.67) <= 0.01
    h4h = {s.name: s for s in qfile.size_report(qfile.GPT2_MEDIUM, 2, ROW)}["ffn_h_4h"]
    assert abs(h4h.total_mb - 1.08) <= 0.01


def test_size_report_invalid_geometry():
    with pytest.raises(ConfigError):
        qfile.size_report(qfile.GPT2_MEDIUM, 2, 3000)


@pytest.mark.parametrize("q", [1, 2, 3])
def test_compression_ratio(q):
    for s in qfile.size_report(qfile.GPT2_MEDIUM, q, ROW):
        assert s.fp32_bytes / s.total_bytes >= 0.95 * 32 / q


def test_medium_checkpoint_size():
    size = qfile.checkpoint_file_size(qfile.GPT2_MEDIUM)
    assert size - 221_184 * 4 < 1000
    assert round(size / qfile.MB, 1) == 0.9

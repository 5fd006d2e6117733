import struct

import numpy as np
import pytest

import casp.checkpoint as ckpt
from casp.checkpoint import ChecksumError, checkpoint_bytes, load_checkpoint, save_checkpoint
from casp.model import LowRank, TransformerConfig, init_model, materialize
from casp.quantize import quantize_greedy, quantize_rtn, quantize_vq

CFG = TransformerConfig(d=8, n_layers=2, vocab_size=16, max_seq_len=8)


def same_model(a, b):
    assert a.config == b.config
    np.testing.assert_array_equal(a.tok_emb, b.tok_emb)
    np.testing.assert_array_equal(a.pos_emb, b.pos_emb)
    for la, lb in zip(a.layers, b.layers):
        for name, t in la.tensors().items():
            u = lb.tensors()[name]
            assert type(t) is type(u)
            np.testing.assert_array_equal(materialize(t), materialize(u))


def mixed_model():
    model = init_model(CFG, seed=4)
    rng = np.random.default_rng(0)
    w = materialize(model.layers[0].w_v)
    x = rng.standard_normal((40, 8))
    a = rng.standard_normal((8, 2)).astype(np.float32)
    b = rng.standard_normal((2, 8)).astype(np.float32)
    return model.replace_layer(
        0,
        w_q=LowRank(a, b),
        w_k=LowRank(quantize_rtn(a, 3, 8), quantize_vq(b, 2, 2)),
        w_v=quantize_greedy(w, x, 4, 16),
        mlp_up=quantize_vq(materialize(model.layers[0].mlp_up), 1, 4, seed=1),
    ).replace_layer(1, w_o=quantize_rtn(materialize(model.layers[1].w_o), 2, 5))


def test_dense_round_trip(tmp_path):
    model = init_model(TransformerConfig(d=16, n_layers=3), seed=42)
    path = tmp_path / "m.caspkpt"
    save_checkpoint(model, path)
    same_model(model, load_checkpoint(path))
    assert path.read_bytes()[:4] == b"CASP"


def test_mixed_round_trip_is_byte_stable(tmp_path):
    model = mixed_model()
    path = tmp_path / "m.caspkpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    same_model(model, back)
    assert checkpoint_bytes(back) == path.read_bytes()


def test_empty_model():
    cfg = TransformerConfig(d=8, n_layers=0, vocab_size=16, max_seq_len=8)
    with pytest.raises(ValueError, match="empty model"):
        checkpoint_bytes(init_model(cfg))


def test_bad_magic(tmp_path):
    data = bytearray(checkpoint_bytes(init_model(CFG)))
    data[:4] = b"XXXX"
    path = tmp_path / "x.caspkpt"
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="not a CASP checkpoint"):
        load_checkpoint(path)


def test_unsupported_version():
    data = bytearray(checkpoint_bytes(init_model(CFG)))
    data[4:8] = struct.pack("<I", 999)
    with pytest.raises(ValueError, match="unsupported version"):
        ckpt.checkpoint_from_bytes(bytes(data))


def test_flipped_byte_trips_checksum():
    data = bytearray(checkpoint_bytes(mixed_model()))
    data[len(data) // 2] ^= 0x40
    with pytest.raises(ChecksumError):
        ckpt.checkpoint_from_bytes(bytes(data))


def test_truncated_file():
    data = checkpoint_bytes(init_model(CFG))
    with pytest.raises(ValueError):
        ckpt.checkpoint_from_bytes(data[:-20])


def test_oversized_tensor_rejected(monkeypatch):
    monkeypatch.setattr(ckpt, "MAX_ELEMENTS", 100)
    with pytest.raises(ValueError, match="exceeds 2\\^31"):
        checkpoint_bytes(init_model(CFG))


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_checkpoint(init_model(CFG), tmp_path / "missing" / "m.caspkpt")

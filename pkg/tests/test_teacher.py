import struct

import numpy as np
import pytest

from pointdistill.errors import (BadMagicError, MissingInputError, NonFiniteValueError,
                                 ShapeMismatchError)
from pointdistill.numerics import FrozenTensorError, Tape, Tensor, mse
from pointdistill.persistence import sample_id
from pointdistill.teacher import (PrefixEmbedding, TeacherFixtureSet, encode_fixtures, load_fixtures,
                                  synth_teacher, write_fixtures)


def fixture_set(n, l=10, d_cap=768, seed=0):
    rng = np.random.default_rng(seed)
    fx = TeacherFixtureSet(l, d_cap)
    for i in range(n):
        fx.add(sample_id(i), rng.standard_normal((l, d_cap)))
    return fx


def test_two_sample_file_loads(tmp_path):
    fx = fixture_set(2)
    write_fixtures(tmp_path / "t.pdtf", fx)
    back = load_fixtures(tmp_path / "t.pdtf")
    assert len(back) == 2 and (back.l, back.d_cap) == (10, 768)
    for sid in fx.ids:
        np.testing.assert_array_equal(back[sid], fx[sid])


def test_byte_layout_matches_documentation():
    fx = TeacherFixtureSet(1, 2)
    fx.add(b"A" * 16, [[1.0, -2.0]])
    raw = encode_fixtures(fx)
    assert raw[:4] == b"PDTF"
    assert struct.unpack("<IQII", raw[4:24]) == (1, 1, 1, 2)
    assert raw[24:40] == b"A" * 16
    assert raw[40:].hex() == "0000803f000000c0"  # 1.0, -2.0 as little-endian float32
    assert len(raw) == 24 + 16 + 8


def test_empty_file_is_valid(tmp_path):
    write_fixtures(tmp_path / "e.pdtf", TeacherFixtureSet(10, 768))
    assert len(load_fixtures(tmp_path / "e.pdtf")) == 0


def test_short_row_is_shape_mismatch(tmp_path):
    raw = bytearray(encode_fixtures(fixture_set(1)))
    (tmp_path / "s.pdtf").write_bytes(bytes(raw[:-4]))  # 767 values in the last row
    with pytest.raises(ShapeMismatchError):
        load_fixtures(tmp_path / "s.pdtf")


def test_distinct_errors(tmp_path):
    with pytest.raises(MissingInputError):
        load_fixtures(tmp_path / "missing.pdtf")
    (tmp_path / "m.pdtf").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(BadMagicError):
        load_fixtures(tmp_path / "m.pdtf")
    fx = TeacherFixtureSet(1, 2)
    fx.embeddings[b"B" * 16] = np.array([[np.nan, 0.0]], np.float32)
    (tmp_path / "n.pdtf").write_bytes(encode_fixtures(fx))
    with pytest.raises(NonFiniteValueError):
        load_fixtures(tmp_path / "n.pdtf")


def test_roundtrip_is_bit_exact(tmp_path):
    fx = fixture_set(5, l=3, d_cap=7, seed=2)
    write_fixtures(tmp_path / "a.pdtf", fx)
    raw = (tmp_path / "a.pdtf").read_bytes()
    write_fixtures(tmp_path / "b.pdtf", load_fixtures(tmp_path / "a.pdtf"))
    assert (tmp_path / "b.pdtf").read_bytes() == raw


def test_synth_noise_free_same_class_identical_and_classes_differ():
    a = synth_teacher(3, 10, 768, 0.0, seed=1)
    b = synth_teacher(3, 10, 768, 0.0, seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, synth_teacher(4, 10, 768, 0.0, seed=1))
    np.testing.assert_array_equal(synth_teacher(1, 10, 768, 0.2, 9), synth_teacher(1, 10, 768, 0.2, 9))
    assert a.dtype == np.float32 and a.shape == (10, 768)


def test_synth_scale_is_unit_over_sqrt_dcap():
    a = synth_teacher(0, 64, 768, 0.0, seed=0).astype(np.float64)
    assert abs(a.std() * np.sqrt(768) - 1.0) < 0.02


def test_synth_same_class_closer_than_cross_class():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, 100)
    emb = np.stack([synth_teacher(int(c), 10, 64, 0.1, seed=i) for i, c in enumerate(labels)]).reshape(100, -1)
    d = np.sqrt(((emb[:, None] - emb[None]) ** 2).sum(-1))
    same = labels[:, None] == labels[None]
    off = ~np.eye(100, dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_synth_rejects_negative_noise():
    with pytest.raises(ValueError):
        synth_teacher(0, 2, 2, -0.1, 0)


def test_prefix_embedding_is_frozen():
    p = PrefixEmbedding(np.ones((2, 3)))
    assert p.frozen and not p.requires_grad
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = mse(x, p)
    tape.backward(loss)
    assert p.grad is None and x.grad is not None
    with pytest.raises(ValueError):
        PrefixEmbedding([[np.inf]])


def test_frozen_guard_fires_if_a_gradient_is_forced_in():
    from pointdistill.numerics.tensor import _accumulate
    p = PrefixEmbedding(np.ones((1, 1)))
    with pytest.raises(FrozenTensorError):
        _accumulate(p, np.ones((1, 1)), {})

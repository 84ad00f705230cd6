import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tokenprune.agent import AgentConfig, PruningAgent
from tokenprune.demonstrations import generate_demo
from tokenprune.environment import generate_sample
from tokenprune.errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError, VersionMismatchError
from tokenprune.storage import (decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset,
                                load_checkpoint, pack_bits, save_checkpoint, unpack_bits)


def test_empty_checkpoint():
    data = encode_checkpoint({})
    assert data[:4] == b"TPRL" and len(data) == 16
    assert struct.unpack("<III", data[4:16])[:2] == (1, 0)
    assert decode_checkpoint(data) == {}


def test_layout_by_hand():
    data = encode_checkpoint({"s": {"w": np.array([[1.5, -2.0]])}})
    body = (b"TPRL" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"s" + struct.pack("<I", 1)
            + struct.pack("<I", 1) + b"w" + struct.pack("<III", 2, 1, 2) + struct.pack("<2d", 1.5, -2.0))
    assert data == body + struct.pack("<I", zlib.crc32(body))


def test_agent_round_trip_is_bit_exact(tmp_path):
    agent = PruningAgent(AgentConfig(4, 6, 8, 2, 8), np.random.default_rng(0))
    sections = {"policy": agent.state_dict()}
    path = tmp_path / "a.ckpt"
    save_checkpoint(sections, path)
    back = load_checkpoint(path)
    for k, v in sections["policy"].items():
        assert back["policy"][k].tobytes() == v.tobytes() and back["policy"][k].shape == v.shape
    assert encode_checkpoint(back) == path.read_bytes()


tensors = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                     elements=st.floats(allow_nan=False, allow_infinity=False))


@settings(max_examples=50)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.dictionaries(st.text(max_size=5), tensors, max_size=3),
                       max_size=3))
def test_round_trip_property(sections):
    back = decode_checkpoint(encode_checkpoint(sections))
    assert list(back) == list(sections)
    for name, ts in sections.items():
        assert list(back[name]) == list(ts)
        for k, v in ts.items():
            assert back[name][k].shape == v.shape and back[name][k].tobytes() == v.tobytes()


def _sample_file():
    return encode_checkpoint({"p": {"w": np.arange(6.0).reshape(2, 3)}})


def test_each_failure_has_its_own_error():
    data = _sample_file()
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XPRL" + data[4:])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:2])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:-10])
    wrong = bytearray(data)
    wrong[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(bytes(wrong))
    with pytest.raises(FormatError):
        decode_checkpoint(data[:-4] + b"\0" + data[-4:])


def test_every_single_byte_flip_is_caught():
    data = _sample_file()
    original = decode_checkpoint(data)
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x01
        try:
            got = decode_checkpoint(bytes(bad))
        except FormatError:
            continue
        assert not np.array_equal(got["p"]["w"], original["p"]["w"])  # pragma: no cover
    with pytest.raises(ChecksumError):
        bad = bytearray(data)
        bad[-12] ^= 0xFF
        decode_checkpoint(bytes(bad))


def test_writer_rejects_bad_tensors():
    with pytest.raises(FormatError):
        encode_checkpoint({"s": {"w": np.array([np.nan])}})


def test_duplicate_section_rejected():
    body = b"TPRL" + struct.pack("<II", 1, 2) + (struct.pack("<I", 1) + b"a" + struct.pack("<I", 0)) * 2
    with pytest.raises(FormatError, match="duplicate"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_bit_packing_lsb_first():
    assert pack_bits([1, 0, 0, 0, 0, 0, 0, 0, 1]) == bytes([0b00000001, 0b00000001])
    assert pack_bits([0, 1, 1]) == bytes([0b110])
    bits = np.random.default_rng(0).random(13) < 0.5
    np.testing.assert_array_equal(unpack_bits(pack_bits(bits), 13), bits)


def test_dataset_round_trip():
    samples = [generate_sample(i, n_tokens=10, d_v=4, d_q=3, n_relevant=3, signal_rank=1) for i in range(3)]
    rng = np.random.default_rng(1)
    demos = [generate_demo(s, rng.standard_normal((10, 2)), rng.standard_normal(2)) for s in samples]
    data = encode_dataset(10, 4, 3, samples, demos)
    assert data[:8] == b"TPRLDATA"
    header, back, dback = decode_dataset(data)
    assert header == {"n_tokens": 10, "d_v": 4, "d_q": 3}
    for a, b in zip(samples, back):
        assert a.seed == b.seed and a.tokens.tobytes() == b.tokens.tobytes()
        np.testing.assert_array_equal(a.relevant, b.relevant)
    for d, (seed, maps, labels) in zip(demos, dback):
        assert seed == d.sample_seed
        for step, m, lab in zip(d.steps, maps, labels):
            np.testing.assert_array_equal(step.index_map, m)
            np.testing.assert_array_equal(step.labels, lab)
    only, s_none, d_none = decode_dataset(encode_dataset(10, 4, 3, samples=samples))
    assert d_none is None and len(s_none) == 3
    with pytest.raises(FormatError):
        encode_dataset(11, 4, 3, samples)
    with pytest.raises(FormatError):
        decode_dataset(data[:20] + bytes([data[20] ^ 1]) + data[21:])  # header dimension
    with pytest.raises(ChecksumError):
        decode_dataset(data[:-20] + bytes([data[-20] ^ 1]) + data[-19:])  # label or float payload

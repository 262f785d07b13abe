import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from conftest import tiny_config
from mrovseg import io
from mrovseg.errors import ConfigError, ContractError, IOFailure
from mrovseg.model import MROVSeg


class TestTensorFile:
    def test_header_layout(self):
        buf = io.encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert buf[:8] == b"MRTENSR1"
        assert struct.unpack("<III", buf[8:20]) == (2, 2, 3)
        assert np.frombuffer(buf[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @settings(max_examples=30)
    @given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_roundtrip(self, arr):
        np.testing.assert_array_equal(io.decode_tensor(io.encode_tensor(arr)), arr)

    def test_bad_magic(self):
        with pytest.raises(IOFailure, match="magic"):
            io.decode_tensor(b"NOTATENS" + bytes(8))

    def test_truncated_payload(self):
        buf = io.encode_tensor(np.ones((2, 2)))
        with pytest.raises(IOFailure):
            io.decode_tensor(buf[:-1])

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOFailure):
            io.read_tensor(tmp_path / "nope.mrt")


class TestImages:
    def test_ppm_roundtrip(self, tmp_path, rng):
        img = np.round(rng.random((3, 5, 7)) * 255) / 255
        io.write_ppm(tmp_path / "a.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
        np.testing.assert_allclose(io.read_ppm(tmp_path / "a.ppm"), img)

    def test_pgm_roundtrip(self, tmp_path, rng):
        lab = rng.integers(0, 256, (4, 6))
        io.write_pgm(tmp_path / "l.pgm", lab)
        assert (tmp_path / "l.pgm").read_bytes()[:2] == b"P5"
        np.testing.assert_array_equal(io.read_pgm(tmp_path / "l.pgm"), lab)

    def test_pgm_range(self, tmp_path):
        with pytest.raises(ContractError):
            io.write_pgm(tmp_path / "l.pgm", np.array([[256]]))

    def test_garbage_image(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"garbage")
        with pytest.raises(IOFailure):
            io.read_ppm(tmp_path / "x.ppm")


class TestJsonAndVocabulary:
    def test_vocabulary(self, tmp_path):
        (tmp_path / "c.json").write_text('["cat", "dog"]')
        assert io.read_vocabulary(tmp_path / "c.json") == ["cat", "dog"]

    @pytest.mark.parametrize("text", ['{"a": 1}', '[1, 2]', '["", "x"]'])
    def test_bad_vocabulary(self, tmp_path, text):
        (tmp_path / "c.json").write_text(text)
        with pytest.raises((ConfigError, ContractError)):
            io.read_vocabulary(tmp_path / "c.json")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("[oops")
        with pytest.raises((ConfigError, IOFailure)):
            io.read_json(tmp_path / "c.json")


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        a, b = MROVSeg(tiny_config(seed=0)), MROVSeg(tiny_config(seed=1))
        io.save_checkpoint(tmp_path / "ck", a.store, {"note": 1})
        manifest = io.load_checkpoint(tmp_path / "ck", b.store)
        assert manifest["config"] == {"note": 1}
        assert b.store.checksum(list(b.store.params)) == a.store.checksum(list(a.store.params))
        frozen = {e["name"] for e in manifest["tensors"] if e["frozen"]}
        assert frozen == a.store.frozen

    def test_architecture_mismatch(self, tmp_path):
        a = MROVSeg(tiny_config())
        io.save_checkpoint(tmp_path / "ck", a.store)
        other = MROVSeg(tiny_config(queries=4))
        with pytest.raises(ConfigError):
            io.load_checkpoint(tmp_path / "ck", other.store)

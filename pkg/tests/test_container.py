"""Tests for the binary tensor container."""
import numpy as np
import pytest
from numpy.testing import assert_allclose

from linearno import container as C


def example_sections(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "weights/a": rng.standard_normal((3, 4)),
        "weights/b": rng.standard_normal((2, 2, 2)).astype(np.float32),
        "counts": rng.integers(0, 1000, size=7).astype(np.uint64),
        "scalar": np.array(3.5),
    }


class TestRoundTrip:
    def test_bytes_round_trip(self):
        sections = example_sections()
        back = C.from_bytes(C.to_bytes(sections))
        assert list(back) == list(sections)
        for name in sections:
            got, want = back[name], np.asarray(sections[name])
            assert got.dtype == want.dtype
            assert got.shape == want.shape
            assert np.array_equal(got, want)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "data.lnoc"
        C.save(path, example_sections(1))
        back = C.load(path)
        assert set(back) == set(example_sections(1))

    def test_write_is_deterministic(self):
        """Identical sections serialise to byte-identical blobs."""
        a = C.to_bytes(example_sections(2))
        b = C.to_bytes(example_sections(2))
        assert a == b

    def test_empty_container(self):
        assert C.from_bytes(C.to_bytes({})) == {}

    def test_empty_array_round_trip(self):
        """Zero-length sections (0 samples) survive the round trip."""
        back = C.from_bytes(C.to_bytes({"empty": np.zeros((0, 5))}))
        assert back["empty"].shape == (0, 5)

    def test_text_and_json_helpers(self):
        meta = {"seed": 3, "split": "train", "note": "ünïcode"}
        arr = C.pack_json(meta)
        assert arr.dtype == np.uint64
        assert C.unpack_json(arr) == meta
        rt = C.from_bytes(C.to_bytes({"meta": arr}))
        assert C.unpack_json(rt["meta"]) == meta

    def test_loaded_arrays_are_writable(self):
        back = C.from_bytes(C.to_bytes({"x": np.ones(3)}))
        back["x"][0] = 2.0


class TestStructuredErrors:
    def test_bad_magic(self):
        blob = bytearray(C.to_bytes({"x": np.ones(2)}))
        blob[:4] = b"NOPE"
        with pytest.raises(C.MagicError):
            C.from_bytes(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(C.to_bytes({"x": np.ones(2)}))
        blob[4] = 99
        # fix the whole-file CRC so the version check is what fires
        import zlib
        import struct
        body = bytes(blob[:-4])
        blob[-4:] = struct.pack("<I", zlib.crc32(body))
        with pytest.raises(C.VersionError):
            C.from_bytes(bytes(blob))

    def test_flipped_payload_byte(self):
        blob = bytearray(C.to_bytes({"x": np.ones(8)}))
        blob[30] ^= 0xFF
        with pytest.raises(C.ChecksumError):
            C.from_bytes(bytes(blob))

    def test_truncation(self):
        blob = C.to_bytes({"x": np.ones(8), "y": np.zeros(3)})
        for cut in (3, 10, len(blob) // 2, len(blob) - 1):
            with pytest.raises(C.ContainerError):
                C.from_bytes(blob[:cut])

    def test_trailing_garbage(self):
        blob = C.to_bytes({"x": np.ones(2)})
        with pytest.raises(C.ContainerError):
            C.from_bytes(blob + b"\x00")

    def test_unstorable_dtype(self):
        with pytest.raises(C.DtypeError):
            C.to_bytes({"x": np.ones(3, dtype=np.int32)})

    def test_duplicate_names(self):
        import struct
        import zlib
        # hand-craft a container with the same section twice
        sec = C.to_bytes({"x": np.ones(1)})
        body = sec[8:-4]  # single encoded section
        header = C.MAGIC + struct.pack("<II", C.VERSION, 2)
        data = header + body + body
        data += struct.pack("<I", zlib.crc32(data))
        with pytest.raises(C.ContainerError):
            C.from_bytes(data)

    def test_not_bytes(self):
        with pytest.raises(C.ContainerError):
            C.from_bytes(12345)


class TestCorruptionFuzz:
    def test_fuzz_no_crash_no_silent_success(self):
        """Random byte flips, truncations and extensions either raise a
        ContainerError or (for the identity perturbation) parse exactly."""
        rng = np.random.default_rng(99)
        blob = C.to_bytes(example_sections(4))
        n_err = 0
        for _ in range(300):
            mode = rng.integers(0, 3)
            corrupted = bytearray(blob)
            if mode == 0:  # flip a byte
                i = int(rng.integers(0, len(blob)))
                delta = int(rng.integers(1, 256))
                corrupted[i] = (corrupted[i] + delta) % 256
            elif mode == 1:  # truncate
                corrupted = corrupted[: int(rng.integers(0, len(blob)))]
            else:  # append garbage
                corrupted = corrupted + bytes(rng.integers(0, 256, size=int(rng.integers(1, 9)), dtype=np.uint8))
            try:
                C.from_bytes(bytes(corrupted))
            except C.ContainerError:
                n_err += 1
            else:
                raise AssertionError("corrupted container parsed silently")
        assert n_err == 300

"""Unit tests for numerics module."""

import numpy as np
import pytest

from tbad_synth.errors import CorruptFileError, ValidationError
from tbad_synth.numerics import (
    FP16_MAX,
    CodecStats,
    compute_dtype,
    decode_tensor,
    encode_tensor,
    fp16_roundtrip,
    gaussian,
    load_tensor,
    make_rng,
    q8_decode,
    q8_encode,
    save_tensor,
    storage_precision,
)


class TestRandomStreams:
    """Test counter-based random streams."""

    def test_same_stream_same_values(self):
        a = gaussian(make_rng(3, "sample", 1), (4, 4))
        b = gaussian(make_rng(3, "sample", 1), (4, 4))
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = gaussian(make_rng(3, "sample", 1), (8,))
        b = gaussian(make_rng(3, "sample", 2), (8,))
        c = gaussian(make_rng(4, "sample", 1), (8,))
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_gaussian_dtype(self):
        assert gaussian(make_rng(0), (3,), np.float32).dtype == np.float32
        assert gaussian(make_rng(0), (3,)).dtype == np.float64

    def test_gaussian_moments(self):
        x = gaussian(make_rng(11, "moments"), (200_000,))
        assert abs(x.mean()) < 0.01
        assert abs(x.std() - 1.0) < 0.01

    def test_negative_seed_rejected(self):
        with pytest.raises(ValidationError):
            make_rng(-1)

    def test_empty_shape_rejected(self):
        with pytest.raises(ValidationError):
            gaussian(make_rng(0), ())


class TestPrecision:
    def test_compute_dtype(self):
        assert compute_dtype("fp64") == np.float64
        assert compute_dtype("fp32") == np.float32
        assert compute_dtype("fp16-store") == np.float32

    def test_storage_precision(self):
        assert storage_precision("fp16-store") == "fp16"
        assert storage_precision("fp64") == "fp64"

    def test_unknown_precision(self):
        with pytest.raises(ValidationError):
            compute_dtype("bf16")


class TestFp16:
    """Test binary16 storage round-trips."""

    def test_relative_error_bound(self):
        rng = make_rng(0, "fp16")
        x = rng.uniform(-1000.0, 1000.0, size=10_000)
        x = x[np.abs(x) > 1e-3]
        y = fp16_roundtrip(x)
        assert np.max(np.abs(y - x) / np.abs(x)) <= 2.0**-11

    def test_saturation_counts_overflows(self):
        stats = CodecStats()
        y = fp16_roundtrip(np.array([1e6, -1e6, 1.0]), stats)
        assert y[0] == FP16_MAX
        assert y[1] == -FP16_MAX
        assert stats.fp16_overflows == 2


class TestQ8:
    """Test blockwise absmax 8-bit codes."""

    def test_error_bound_over_many_blocks(self):
        rng = make_rng(1, "q8")
        x = rng.standard_normal(64 * 10_000) * rng.uniform(0.01, 100.0, size=64 * 10_000)
        q = q8_encode(x, 64)
        y = q8_decode(q)
        blocks = np.abs(x.reshape(-1, 64)).max(axis=1)
        err = np.abs(y - x).reshape(-1, 64).max(axis=1)
        assert np.all(err <= blocks / 127.0 * (1 + 1e-6))

    def test_zero_block_is_exact(self):
        x = np.zeros(128)
        x[64:] = np.linspace(-1, 1, 64)
        y = q8_decode(q8_encode(x, 64))
        assert np.array_equal(y[:64], np.zeros(64))

    def test_partial_block_shape(self):
        x = np.arange(10, dtype=np.float32).reshape(2, 5)
        q = q8_encode(x, 4)
        assert q.scales.shape == (3,)
        assert q8_decode(q).shape == (2, 5)

    def test_codes_in_range(self):
        q = q8_encode(make_rng(2).standard_normal(1000), 64)
        assert q.codes.dtype == np.int8
        assert q.codes.min() >= -127

    def test_bad_block_size(self):
        with pytest.raises(ValidationError):
            q8_encode(np.ones(4), 0)


class TestTensorContainer:
    """Test the TNS1 tensor layout."""

    def test_header_layout(self):
        buf = encode_tensor(np.zeros((2, 3), dtype=np.float32), "fp32")
        assert buf[:4] == b"TNS1"
        assert buf[4] == 0  # fp32 tag
        assert buf[5] == 2  # rank
        assert len(buf) == 4 + 2 + 2 * 4 + 6 * 4

    def test_fp64_preserves_bits(self):
        x = make_rng(5).standard_normal((3, 4))
        y, end = decode_tensor(encode_tensor(x, "fp64"))
        assert y.dtype == np.float64
        assert np.array_equal(x, y)
        assert end == len(encode_tensor(x, "fp64"))

    def test_fp16_decodes_to_fp32(self):
        y, _ = decode_tensor(encode_tensor(np.array([0.5, 1.5]), "fp16"))
        assert y.dtype == np.float32
        assert np.array_equal(y, [0.5, 1.5])

    def test_decode_at_offset(self):
        a = encode_tensor(np.ones(3), "fp32")
        b = encode_tensor(np.full(2, 7.0), "fp32")
        y, end = decode_tensor(a + b, len(a))
        assert np.array_equal(y, [7.0, 7.0])
        assert end == len(a) + len(b)

    def test_bad_magic_reports_position(self):
        with pytest.raises(CorruptFileError) as exc:
            decode_tensor(b"XXXX" + b"\x00" * 8)
        assert exc.value.position == 0

    def test_truncated_payload(self):
        buf = encode_tensor(np.ones(16), "fp32")
        with pytest.raises(CorruptFileError) as exc:
            decode_tensor(buf[:-3])
        assert "truncated" in str(exc.value)

    def test_unknown_tag(self):
        buf = bytearray(encode_tensor(np.ones(2), "fp32"))
        buf[4] = 9
        with pytest.raises(CorruptFileError):
            decode_tensor(bytes(buf))

    def test_file_roundtrip_and_trailing_bytes(self, temp_dir):
        path = temp_dir / "x.tns"
        x = np.arange(6, dtype=np.float32).reshape(3, 2)
        save_tensor(path, x)
        assert np.array_equal(load_tensor(path), x)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptFileError):
            load_tensor(path)

    def test_unsupported_precision(self):
        with pytest.raises(ValidationError):
            encode_tensor(np.ones(2), "int8")

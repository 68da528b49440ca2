"""
Tests for the CSR encodings and the storage reports.
"""

import math

import numpy as np
import pytest

from models.network import with_weights
from storage.csr import (
    bits_for,
    decode,
    dummy_zeros,
    encode_csr_absolute,
    encode_csr_relative,
    nonzero_gaps,
)
from storage.report import (
    KB,
    MB,
    format_bytes,
    optimize_index_bits,
    parse_amount,
    report_from_counts,
    reports_frame,
    storage_report,
)
from tests.conftest import tiny_net


def _sparse(rng, rows=None, cols=None):
    rows = rows or int(rng.integers(1, 9))
    cols = cols or int(rng.integers(1, 9))
    m = rng.normal(size=(rows, cols))
    m[rng.random((rows, cols)) < rng.uniform(0.0, 1.0)] = 0.0
    return m


class TestRoundTrip:
    """decode(encode(m)) == m for both index schemes."""

    def test_relative_every_bit_width(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            m = _sparse(rng)
            bits = int(rng.integers(1, 13))
            np.testing.assert_array_equal(decode(encode_csr_relative(m, bits)), m)

    def test_absolute(self):
        rng = np.random.default_rng(1)
        for _ in range(2_000):
            m = _sparse(rng)
            block = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            np.testing.assert_array_equal(decode(encode_csr_absolute(m, block)), m)

    def test_large_matrix_relative(self):
        rng = np.random.default_rng(2)
        m = _sparse(rng, 120, 300)
        for bits in (1, 4, 12):
            np.testing.assert_array_equal(decode(encode_csr_relative(m, bits)), m)


class TestDummyZeros:
    def test_gap_nine_at_three_bits(self):
        m = np.zeros((1, 9))
        m[0, 8] = 1.0
        encoding = encode_csr_relative(m, 3)
        assert encoding.dummy_zero_count == 1
        assert encoding.nonzeros == 1
        np.testing.assert_array_equal(encoding.indices, [7, 0])

    def test_gap_eight_fits(self):
        m = np.zeros((1, 8))
        m[0, 7] = 1.0
        assert encode_csr_relative(m, 3).dummy_zero_count == 0

    def test_matches_ceiling_formula(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            m = _sparse(rng, 6, 40)
            gaps = nonzero_gaps(m)
            for bits in range(1, 7):
                expected = sum(math.ceil(g / 2 ** bits) - 1 for g in gaps)
                assert dummy_zeros(gaps, bits) == expected
                assert encode_csr_relative(m, bits).dummy_zero_count == expected

    def test_stored_gaps_fit_the_width(self):
        rng = np.random.default_rng(4)
        m = _sparse(rng, 20, 20)
        encoding = encode_csr_relative(m, 2)
        assert encoding.indices.max(initial=0) < 4
        assert encoding.stored_numbers == 2 * (encoding.nonzeros + encoding.dummy_zero_count)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            encode_csr_relative(np.eye(2), 0)


class TestAbsoluteAccounting:
    def test_four_by_four_with_five_nonzeros(self):
        m = np.zeros((4, 4))
        m[0, 0] = m[1, 2] = m[2, 1] = m[3, 3] = m[3, 0] = 1.0
        encoding = encode_csr_absolute(m)
        assert encoding.nonzeros == 5
        assert encoding.stored_numbers == 15
        assert encoding.index_bits == 2
        # 5 x (8 + 2) value/index bits + 5 extents x 3 bits
        assert encoding.storage_bits(8) == 5 * 10 + 5 * 3

    def test_blocks_cover_the_matrix(self):
        m = np.ones((130, 70))
        encoding = encode_csr_absolute(m)
        assert len(encoding.blocks) == 3 * 2
        assert encoding.nonzeros == 130 * 70

    def test_bits_for(self):
        assert [bits_for(c) for c in (1, 2, 3, 4, 5, 64, 65)] == [0, 1, 2, 2, 3, 6, 7]


class TestPublishedArithmetic:
    """Storage numbers recomputed from published counts."""

    def test_alexnet_weight_store(self):
        report = report_from_counts(0.3e6, 2.3e6, 7, index_bits=6)
        assert report.weight_store_bytes == pytest.approx(0.2625 * MB)
        assert report.relative_lower_bound_bytes == pytest.approx(0.4875 * MB)

    def test_alexnet_quantized_prior_work(self):
        assert report_from_counts(0.65e6, 2.3e6, 7).weight_store_bytes == pytest.approx(0.56875 * MB)

    def test_lenet_baseline(self):
        report = report_from_counts(25_500, 25_500, 32, regime="structured")
        assert report.weight_store_bytes == 102 * KB
        assert report.weight_plus_index_bytes == report.weight_store_bytes
        assert report.index_bits == 0

    def test_units(self):
        assert parse_amount("2.2M") == pytest.approx(2.2e6)
        assert parse_amount("25.5K") == 25_500
        assert parse_amount("0.26MB") == pytest.approx(260_000)
        assert parse_amount("11.2×") == 11.2
        assert format_bytes(0.2625 * MB) == "0.26MB"
        assert format_bytes(390) == "0.39KB"


class TestOptimizeIndexBits:
    def test_dense_rows_want_one_bit(self):
        bits, report = optimize_index_bits(np.ones((4, 4)), quant_bits=8)
        assert bits == 1
        assert report.dummy_zeros == 0
        assert report.relative_bytes == 16 * 9 / 8

    def test_tie_goes_to_fewer_bits(self):
        m = np.zeros((1, 4))
        m[0, 2] = m[0, 3] = 1.0
        # gaps 3, 1 at 1-bit weights: 3 entries x 2 bits == 2 entries x 3 bits
        bits, report = optimize_index_bits(m, quant_bits=1)
        assert bits == 1
        assert report.dummy_zeros == 1
        assert report.relative_bytes == 6 / 8

    def test_long_gaps_want_more_bits(self):
        m = np.zeros((1, 1024))
        m[0, ::64] = 1.0
        bits, report = optimize_index_bits(m, quant_bits=4)
        assert bits == 6
        assert report.dummy_zeros == 0

    def test_empty_matrix(self):
        _, report = optimize_index_bits(np.zeros((3, 3)))
        assert report.relative_bytes == 0.0


class TestStorageReport:
    def test_untouched_model_reports_no_compression(self):
        report = storage_report(tiny_net(0), scope="all")
        assert report.compression_rate == 1.0
        assert not report.indexed
        assert report.index_bits == 0

    def test_pruned_model(self):
        model = tiny_net(1)
        w = model.weight_arrays()["conv1"]
        mask = np.zeros(w.shape, dtype=bool)
        mask[:, 0, 1, :] = True
        pruned = with_weights(model, {"conv1": w * mask}, {"conv1": mask})
        report = storage_report(pruned, quant_bits=8)
        assert report.weight_count == 12
        assert report.dense_count == 36
        assert report.pruning_rate == 3
        assert report.indexed and report.index_bits >= 1
        assert report.weight_plus_index_bytes >= report.relative_lower_bound_bytes
        absolute = storage_report(pruned, quant_bits=8, scheme="absolute")
        assert absolute.weight_plus_index_bytes == absolute.absolute_bytes

    def test_structured_regime_has_no_index(self):
        model = tiny_net(2)
        w = model.weight_arrays()["conv1"]
        w[2:] = 0.0
        report = storage_report(with_weights(model, {"conv1": w}), quant_bits=4, regime="structured")
        assert report.weight_count == 18
        assert report.weight_plus_index_bytes == 18 * 4 / 8
        assert report.compression_rate == pytest.approx(36 * 32 / (18 * 4))

    def test_frame_columns(self):
        frame = reports_frame([("dense", storage_report(tiny_net(3)))])
        assert {"label", "weight_store", "weight_plus_index", "compress_rate"} <= set(frame.columns)

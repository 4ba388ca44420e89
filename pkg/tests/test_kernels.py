"""Kernel equivalence against the scalar oracle, packing round-trips, costs."""

import numpy as np
import pytest

from squant.kernels import (
    CostCounter,
    accumulation_depth_limit,
    gemm_i4_packed,
    gemm_i8,
    gemm_mixed,
    pack_int4,
    scalar_reference_gemm,
    unpack_int4,
)
from squant.seeding import substream


def random_case(rng, max_dim=64, full_range=True):
    m = int(rng.integers(1, max_dim + 1))
    k = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    w = rng.integers(-8, 8, size=(m, k)).astype(np.int8)
    x = rng.integers(-128, 128, size=(k, n)).astype(np.int8)
    if full_range:
        # force the extremes into every case
        w.reshape(-1)[int(rng.integers(w.size))] = -8
        w.reshape(-1)[int(rng.integers(w.size))] = 7
        x.reshape(-1)[int(rng.integers(x.size))] = -128
        x.reshape(-1)[int(rng.integers(x.size))] = 127
    return w, x


class TestPacking:
    def test_worked_example_units(self):
        wp = pack_int4(np.array([[1, -2], [3, 4]], dtype=np.int8))
        # unit = hi * 2^16 + lo, arithmetic (not OR-masked)
        np.testing.assert_array_equal(wp.packed, [[3 * 65536 + 1, 4 * 65536 - 2]])
        assert not wp.pad_row

    def test_zero_matrix(self):
        wp = pack_int4(np.zeros((4, 3), dtype=np.int8))
        assert not wp.packed.any()

    def test_odd_rows_padded(self):
        wp = pack_int4(np.ones((3, 2), dtype=np.int8))
        assert wp.pair_rows == 2
        assert wp.pad_row
        assert wp.logical_rows == 3

    def test_roundtrip_exact(self):
        rng = substream(3, "pack-rt")
        for _ in range(50):
            m, k = int(rng.integers(1, 20)), int(rng.integers(1, 20))
            w = rng.integers(-8, 8, size=(m, k)).astype(np.int8)
            np.testing.assert_array_equal(unpack_int4(pack_int4(w)), w)

    def test_extreme_values_roundtrip(self):
        w = np.array([[-8, 7], [7, -8], [-8, -8]], dtype=np.int8)
        np.testing.assert_array_equal(unpack_int4(pack_int4(w)), w)

    def test_range_error_names_index(self):
        w = np.zeros((3, 3), dtype=np.int8)
        w[1, 2] = 8
        with pytest.raises(ValueError, match=r"8 at \(1, 2\)"):
            pack_int4(w)

    def test_rejects_wrong_dtype(self):
        with pytest.raises(ValueError, match="int8"):
            pack_int4(np.zeros((2, 2), dtype=np.int32))


class TestGemmI8:
    def test_identity_widens(self):
        rng = substream(3, "i8-id")
        x = rng.integers(-128, 128, size=(5, 7)).astype(np.int8)
        out = gemm_i8(np.eye(5, dtype=np.int8), x, CostCounter())
        assert out.dtype == np.int32
        np.testing.assert_array_equal(out, x.astype(np.int32))

    def test_worked_example(self):
        w = np.array([[1, -2], [3, 4]], dtype=np.int8)
        x = np.array([[5], [-6]], dtype=np.int8)
        cost = CostCounter()
        np.testing.assert_array_equal(gemm_i8(w, x, cost), [[17], [-9]])
        assert cost.mul_count == 2 * 2 * 1

    def test_matches_scalar_oracle(self):
        rng = substream(3, "i8-oracle")
        for _ in range(100):
            w, x = random_case(rng, max_dim=16)
            np.testing.assert_array_equal(
                gemm_i8(w, x, CostCounter()), scalar_reference_gemm(w, x)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dims"):
            gemm_i8(np.zeros((2, 3), dtype=np.int8), np.zeros((2, 3), dtype=np.int8), CostCounter())

    def test_depth_bound_enforced(self):
        k = accumulation_depth_limit(8, 8) + 1
        w = np.zeros((1, k), dtype=np.int8)
        x = np.zeros((k, 1), dtype=np.int8)
        with pytest.raises(ValueError, match="accumulation bound"):
            gemm_i8(w, x, CostCounter())


class TestGemmI4Packed:
    def test_worked_example_with_counts(self):
        w = np.array([[1, -2], [3, 4]], dtype=np.int8)
        x = np.array([[5], [-6]], dtype=np.int8)
        cost_p, cost_b = CostCounter(), CostCounter()
        out = gemm_i4_packed(pack_int4(w), x, cost_p)
        np.testing.assert_array_equal(out, [[17], [-9]])
        gemm_i8(w, x, cost_b)
        assert cost_p.mul_count == 2 and cost_b.mul_count == 4

    def test_zero_activations(self):
        wp = pack_int4(substream(3, "i4-z").integers(-8, 8, size=(6, 5)).astype(np.int8))
        out = gemm_i4_packed(wp, np.zeros((5, 3), dtype=np.int8), CostCounter())
        assert not out.any()

    def test_bitexact_vs_byte_kernel(self):
        rng = substream(3, "i4-oracle")
        for _ in range(200):
            w, x = random_case(rng, max_dim=32)
            got = gemm_i4_packed(pack_int4(w), x, CostCounter())
            want = gemm_i8(w, x, CostCounter())
            np.testing.assert_array_equal(got, want)

    def test_extreme_value_split_exact(self):
        # the low lane tops out at -8 * -128 = 1024, still inside 15 bits
        w = np.array([[-8, -8], [7, -8]], dtype=np.int8)
        x = np.array([[-128, 127], [-128, 127]], dtype=np.int8)
        got = gemm_i4_packed(pack_int4(w), x, CostCounter())
        np.testing.assert_array_equal(got, scalar_reference_gemm(w, x))

    def test_odd_rows(self):
        rng = substream(3, "i4-odd")
        w = rng.integers(-8, 8, size=(7, 9)).astype(np.int8)
        x = rng.integers(-128, 128, size=(9, 4)).astype(np.int8)
        got = gemm_i4_packed(pack_int4(w), x, CostCounter())
        assert got.shape == (7, 4)
        np.testing.assert_array_equal(got, gemm_i8(w, x, CostCounter()))

    def test_cost_formula(self):
        for m in (1, 2, 5, 8):
            w = np.ones((m, 3), dtype=np.int8)
            x = np.ones((3, 4), dtype=np.int8)
            cost = CostCounter()
            gemm_i4_packed(pack_int4(w), x, cost)
            pairs = (m + 1) // 2
            assert cost.mul_count == pairs * 3 * 4
            assert cost.add_count == 3 * pairs * 3 * 4

    def test_halving_even_rows(self):
        w = np.ones((16, 8), dtype=np.int8)
        x = np.ones((8, 8), dtype=np.int8)
        cp, cb = CostCounter(), CostCounter()
        gemm_i4_packed(pack_int4(w), x, cp)
        gemm_i8(w, x, cb)
        assert cp.mul_count * 2 == cb.mul_count


class TestRowBlocking:
    def test_identical_across_block_sizes(self):
        rng = substream(3, "blocks")
        w, x = random_case(rng, max_dim=33)
        wp = pack_int4(w)
        base_b = gemm_i8(w, x, CostCounter())
        base_p = gemm_i4_packed(wp, x, CostCounter())
        for block in (1, 2, 3, 7, 64):
            np.testing.assert_array_equal(gemm_i8(w, x, CostCounter(), row_block=block), base_b)
            np.testing.assert_array_equal(
                gemm_i4_packed(wp, x, CostCounter(), row_block=block), base_p
            )


class TestGemmMixed:
    def scales(self):
        return {"alpha_w": 0.05, "alpha_hi": 0.02, "alpha_lo": 0.3}

    def test_lo_empty_equals_packed_path(self):
        rng = substream(3, "mix-lo0")
        w = rng.integers(-8, 8, size=(6, 5)).astype(np.int8)
        x = rng.integers(-128, 128, size=(5, 4)).astype(np.int8)
        wp = pack_int4(w)
        out = gemm_mixed(wp, {"hi": x, "lo": x[:, :0]}, self.scales(), CostCounter())
        want = gemm_i4_packed(wp, x, CostCounter()).astype(np.float32) * np.float32(
            np.float32(0.05) * np.float32(0.02)
        )
        np.testing.assert_array_equal(out, want)

    def test_hi_empty_equals_w4a4_path(self):
        rng = substream(3, "mix-hi0")
        w = rng.integers(-8, 8, size=(4, 3)).astype(np.int8)
        x = rng.integers(-8, 8, size=(3, 5)).astype(np.int8)
        wp = pack_int4(w)
        out = gemm_mixed(wp, {"hi": x[:, :0], "lo": x}, self.scales(), CostCounter())
        want = gemm_i4_packed(wp, x, CostCounter()).astype(np.float32) * np.float32(
            np.float32(0.05) * np.float32(0.3)
        )
        np.testing.assert_array_equal(out, want)

    def test_random_split_matches_per_group_runs(self):
        rng = substream(3, "mix-split")
        for _ in range(20):
            m, k = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            n_hi, n_lo = int(rng.integers(0, 8)), int(rng.integers(0, 8))
            w = rng.integers(-8, 8, size=(m, k)).astype(np.int8)
            x_hi = rng.integers(-128, 128, size=(k, n_hi)).astype(np.int8)
            x_lo = rng.integers(-8, 8, size=(k, n_lo)).astype(np.int8)
            wp = pack_int4(w)
            sc = self.scales()
            out = gemm_mixed(wp, {"hi": x_hi, "lo": x_lo}, sc, CostCounter())
            assert out.shape == (m, n_hi + n_lo)
            if n_hi:
                want_hi = gemm_i8(w, x_hi, CostCounter()).astype(np.float32) * np.float32(
                    np.float32(sc["alpha_w"]) * np.float32(sc["alpha_hi"])
                )
                np.testing.assert_array_equal(out[:, :n_hi], want_hi)
            if n_lo:
                want_lo = gemm_i4_packed(wp, x_lo, CostCounter()).astype(np.float32) * np.float32(
                    np.float32(sc["alpha_w"]) * np.float32(sc["alpha_lo"])
                )
                np.testing.assert_array_equal(out[:, n_hi:], want_lo)

    def test_mixed_cost_between_uniform_paths(self):
        m, k, n = 8, 6, 10
        rng = substream(3, "mix-cost")
        w = rng.integers(-8, 8, size=(m, k)).astype(np.int8)
        wp = pack_int4(w)
        x8 = rng.integers(-128, 128, size=(k, n)).astype(np.int8)
        x4 = rng.integers(-8, 8, size=(k, n)).astype(np.int8)
        c_mixed = CostCounter()
        gemm_mixed(wp, {"hi": x8[:, : n // 2], "lo": x4[:, n // 2 :]}, self.scales(), c_mixed)
        c4, c8 = CostCounter(), CostCounter()
        gemm_i4_packed(wp, x4, c4)
        gemm_i8(w, x8, c8)
        assert c4.mul_count < c_mixed.mul_count < c8.mul_count

    def test_group_width_mismatch(self):
        wp = pack_int4(np.zeros((2, 3), dtype=np.int8))
        bad = np.zeros((4, 2), dtype=np.int8)
        with pytest.raises(ValueError, match="do not match K"):
            gemm_mixed(wp, {"hi": bad, "lo": bad[:, :0]}, self.scales(), CostCounter())

    def test_lo_group_range_checked(self):
        wp = pack_int4(np.zeros((2, 3), dtype=np.int8))
        x_lo = np.full((3, 2), 9, dtype=np.int8)
        with pytest.raises(ValueError, match="outside"):
            gemm_mixed(wp, {"hi": x_lo[:, :0], "lo": x_lo}, self.scales(), CostCounter())


class TestScalarOracle:
    def test_identity_copy(self):
        x = substream(3, "so-id").integers(-128, 128, size=(4, 6)).astype(np.int8)
        np.testing.assert_array_equal(
            scalar_reference_gemm(np.eye(4, dtype=np.int8), x), x.astype(np.int32)
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dims"):
            scalar_reference_gemm(np.zeros((2, 3), dtype=np.int8), np.zeros((4, 2), dtype=np.int8))

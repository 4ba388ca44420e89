"""Integer GeMM kernels with an instruction cost model.

Three multiply paths over int8 operands with exact 32-bit accumulation:

- ``gemm_i8``: plain byte-level kernel, one multiply per MAC.
- ``gemm_i4_packed``: weights from adjacent rows are packed into one 32-bit
  unit (high row at bit offset 16), so one multiply against a shared
  activation serves two output rows. The product splits exactly because the
  low-lane partial product is bounded by 8*128 = 1024 < 2^15.
- ``gemm_mixed``: per-token-group dispatch, 8-bit activation columns through
  the byte kernel and 4-bit columns through the packed kernel, each group
  dequantized by its own scale pair.

Cost convention: one accumulate-add per partial product. The packed split
additionally charges one subtract per unit product, giving
add_count = 3 * ceil(M/2) * K * N versus M * K * N for the byte kernel.
Shifts and masks are not counted.

Packing stores ``unit = hi * 2^16 + lo`` arithmetically rather than OR-ing
masked lanes: with a negative low lane the OR form leaves a +1 borrow in the
high half, which would corrupt ``hi = (p - low) >> 16`` by one activation per
unit. The arithmetic form keeps the split branch-free and exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CostCounter",
    "PackedInt4Matrix",
    "accumulation_depth_limit",
    "gemm_i4_packed",
    "gemm_i8",
    "gemm_mixed",
    "pack_int4",
    "scalar_reference_gemm",
    "unpack_int4",
]


@dataclass
class CostCounter:
    """Multiply/add tallies for one kernel call (or one dispatch of calls)."""

    mul_count: int = 0
    add_count: int = 0

    def reset(self) -> None:
        self.mul_count = 0
        self.add_count = 0


@dataclass
class PackedInt4Matrix:
    """Row-pair packed 4-bit weights, one int32 unit per (pair, column)."""

    logical_rows: int
    cols: int
    packed: np.ndarray  # int32 [ceil(rows/2), cols]
    pad_row: bool

    @property
    def pair_rows(self) -> int:
        return self.packed.shape[0]


def accumulation_depth_limit(weight_bits: int, act_bits: int) -> int:
    """Largest K for which int32 accumulation cannot overflow."""
    per_product = (1 << (weight_bits - 1)) * (1 << (act_bits - 1))
    return (1 << 31) // per_product


def _check_int8(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if x.dtype != np.int8:
        raise ValueError(f"{name} must be int8, got {x.dtype}")
    return x


def _check_depth(k: int, weight_bits: int) -> None:
    limit = accumulation_depth_limit(weight_bits, 8)
    if k > limit:
        raise ValueError(f"K={k} exceeds the int32 accumulation bound {limit}")


def pack_int4(w: np.ndarray) -> PackedInt4Matrix:
    """Pack an int8 matrix with 4-bit values; odd row counts get a zero pad row."""
    w = _check_int8(w, "w")
    bad = np.argwhere((w < -8) | (w > 7))
    if bad.size:
        i, j = bad[0]
        raise ValueError(f"value {int(w[i, j])} at ({int(i)}, {int(j)}) outside [-8, 7]")
    m, k = w.shape
    pad = m % 2 == 1
    if pad:
        w = np.vstack([w, np.zeros((1, k), dtype=np.int8)])
    lo = w[0::2].astype(np.int32)
    hi = w[1::2].astype(np.int32)
    return PackedInt4Matrix(m, k, hi * 65536 + lo, pad)


def unpack_int4(wp: PackedInt4Matrix) -> np.ndarray:
    """Exact inverse of pack_int4, pad row dropped."""
    unit = wp.packed
    lo = ((unit & 0xFFFF) ^ 0x8000) - 0x8000
    hi = (unit - lo) >> 16
    out = np.empty((2 * wp.pair_rows, wp.cols), dtype=np.int8)
    out[0::2] = lo
    out[1::2] = hi
    return out[: wp.logical_rows]


def _row_blocks(rows: int, row_block: int | None):
    step = rows if not row_block else row_block
    for start in range(0, rows, step):
        yield start, min(start + step, rows)


def gemm_i8(
    w: np.ndarray, x: np.ndarray, cost: CostCounter, row_block: int | None = None
) -> np.ndarray:
    """Byte-level kernel: int32 out = int8 w [M,K] @ int8 x [K,N]."""
    w = _check_int8(w, "w")
    x = _check_int8(x, "x")
    m, k = w.shape
    if x.shape[0] != k:
        raise ValueError(f"inner dims differ: {w.shape} x {x.shape}")
    _check_depth(k, 8)
    n = x.shape[1]
    x32 = x.astype(np.int32)
    out = np.empty((m, n), dtype=np.int32)
    for lo_r, hi_r in _row_blocks(m, row_block):
        out[lo_r:hi_r] = w[lo_r:hi_r].astype(np.int32) @ x32
    cost.mul_count += m * k * n
    cost.add_count += m * k * n
    return out


def gemm_i4_packed(
    wp: PackedInt4Matrix, x: np.ndarray, cost: CostCounter, row_block: int | None = None
) -> np.ndarray:
    """Packed kernel: one multiply per row pair, exact split of the product.

    For each unit u = w_hi * 2^16 + w_lo and activation a, the single product
    p = u * a is split as low = sign_extend_16(p & 0xFFFF) (= w_lo * a) and
    hi = (p - low) >> 16 (= w_hi * a), both exact under the 4x8-bit bound.
    """
    x = _check_int8(x, "x")
    k, n = x.shape
    if wp.cols != k:
        raise ValueError(f"inner dims differ: packed {wp.logical_rows}x{wp.cols} x {x.shape}")
    _check_depth(k, 4)
    m = wp.logical_rows
    x32 = x.astype(np.int32)
    out = np.empty((2 * wp.pair_rows, n), dtype=np.int32)
    for lo_r, hi_r in _row_blocks(wp.pair_rows, row_block):
        p = wp.packed[lo_r:hi_r, :, None] * x32[None, :, :]
        low = ((p & 0xFFFF) ^ 0x8000) - 0x8000
        high = (p - low) >> 16
        out[2 * lo_r : 2 * hi_r : 2] = low.sum(axis=1, dtype=np.int32)
        out[2 * lo_r + 1 : 2 * hi_r : 2] = high.sum(axis=1, dtype=np.int32)
    cost.mul_count += wp.pair_rows * k * n
    cost.add_count += 3 * wp.pair_rows * k * n
    return out[:m]


def gemm_mixed(
    wp: PackedInt4Matrix,
    x_groups: dict,
    scales: dict,
    cost: CostCounter,
    row_block: int | None = None,
) -> np.ndarray:
    """Two-kernel dispatch over token groups sharing one packed weight matrix.

    ``x_groups['hi']`` holds the 8-bit token columns (byte kernel on the
    unpacked weights), ``x_groups['lo']`` the 4-bit token columns (packed
    kernel, values must fit 4 bits). Returns float32 [M, N_hi + N_lo] with
    the hi block first; callers restore token order. Scales multiply per
    group as alpha_w * alpha_x.
    """
    x_hi = _check_int8(x_groups["hi"], "x_hi")
    x_lo = _check_int8(x_groups["lo"], "x_lo")
    if x_hi.shape[0] != wp.cols or x_lo.shape[0] != wp.cols:
        raise ValueError(
            f"group rows {x_hi.shape[0]}/{x_lo.shape[0]} do not match K={wp.cols}"
        )
    if x_lo.size and (x_lo.min() < -8 or x_lo.max() > 7):
        raise ValueError("4-bit group holds values outside [-8, 7]")
    m = wp.logical_rows
    out = np.empty((m, x_hi.shape[1] + x_lo.shape[1]), dtype=np.float32)
    a_w = np.float32(scales["alpha_w"])
    if x_hi.shape[1]:
        acc = gemm_i8(unpack_int4(wp), x_hi, cost, row_block)
        out[:, : x_hi.shape[1]] = acc.astype(np.float32) * (a_w * np.float32(scales["alpha_hi"]))
    if x_lo.shape[1]:
        acc = gemm_i4_packed(wp, x_lo, cost, row_block)
        out[:, x_hi.shape[1] :] = acc.astype(np.float32) * (a_w * np.float32(scales["alpha_lo"]))
    return out


def scalar_reference_gemm(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Triple-loop oracle in plain Python integers; kept deliberately naive."""
    w = _check_int8(w, "w")
    x = _check_int8(x, "x")
    m, k = w.shape
    if x.shape[0] != k:
        raise ValueError(f"inner dims differ: {w.shape} x {x.shape}")
    n = x.shape[1]
    wl = w.tolist()
    xcols = x.T.tolist()
    out = np.empty((m, n), dtype=np.int32)
    for i in range(m):
        row = wl[i]
        for j in range(n):
            col = xcols[j]
            acc = 0
            for a, b in zip(row, col):
                acc += a * b
            out[i, j] = acc
    return out

"""Property-based invariants across the numeric core.

Five suites: softmax row-normalization (float and fixed), event-ordering
over randomized timing configurations, dataset round-trip byte-identity,
MAC permutation-invariance, and quantizer monotonicity.
"""

import os
import tempfile
from fractions import Fraction

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qdetect.dataset import (
    ImageConfig,
    build_dataset,
    default_ion_centers,
    load_dataset,
    save_dataset,
)
from qdetect.fixedpoint import (
    FixedFormat,
    fixed_matmul,
    mac_accumulate,
    quantize,
    to_real,
)
from qdetect.polymlp import calibrate_input_quantizer
from qdetect.timingsim import _PRIORITY, TimingConfig, simulate_frame
from qdetect.vit import (
    EXP_FRACTION_BITS,
    build_exp_table,
    fixed_softmax,
    softmax_rows,
)

FMT = FixedFormat(16, 8)


# ---------------------------------------------------------------------------
# 1. softmax row-normalization


class TestSoftmaxNormalization:
    @given(hnp.arrays(np.float64, (7, 5),
                      elements=st.floats(-700.0, 700.0)))
    def test_float_rows_sum_to_one(self, x):
        p = softmax_rows(x)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        assert np.all(p >= 0.0)
        assert np.all(p <= 1.0)

    @given(hnp.arrays(np.float64, (4, 6),
                      elements=st.floats(-50.0, 50.0)))
    def test_float_order_preserving(self, x):
        p = softmax_rows(x)
        for row_x, row_p in zip(x, p):
            order = np.argsort(row_x, kind="stable")
            assert np.all(np.diff(row_p[order]) >= -1e-15)

    @given(hnp.arrays(np.int64, (5, 8),
                      elements=st.integers(-(1 << 14), (1 << 14))))
    def test_fixed_rows_sum_near_unit(self, codes):
        table = build_exp_table()
        p = fixed_softmax(codes, table, fraction_bits=8)
        unit = 1 << EXP_FRACTION_BITS
        row_len = codes.shape[-1]
        sums = p.sum(axis=-1)
        assert np.all(np.abs(sums - unit) <= row_len)
        assert np.all(p >= 0)

    @given(
        hnp.arrays(np.int64, (3, 6),
                   elements=st.integers(-(1 << 13), (1 << 13))),
        st.integers(-(1 << 12), 1 << 12),
    )
    def test_fixed_shift_invariance_is_exact(self, codes, c):
        table = build_exp_table()
        base = fixed_softmax(codes, table, fraction_bits=8)
        shifted = fixed_softmax(codes + c, table, fraction_bits=8)
        np.testing.assert_array_equal(base, shifted)

    @given(hnp.arrays(np.int64, (2, 7),
                      elements=st.integers(-(1 << 14), (1 << 14))))
    def test_fixed_monotone_within_row(self, codes):
        table = build_exp_table()
        p = fixed_softmax(codes, table, fraction_bits=8)
        for row_c, row_p in zip(codes, p):
            order = np.argsort(row_c, kind="stable")
            assert np.all(np.diff(row_p[order]) >= 0)


# ---------------------------------------------------------------------------
# 2. event ordering over randomized timing configurations


class TestEventOrdering:
    @settings(max_examples=1000, deadline=None,
              suppress_health_check=[HealthCheck.too_slow])
    @given(
        h=st.integers(1, 48),
        w=st.integers(1, 64),
        extra_slots=st.integers(0, 700),
        pclk=st.integers(1_000, 1_000_000_000),
        fclk=st.integers(1_000_000, 1_000_000_000),
        cycles=st.integers(1, 1_000_000),
        exp_us=st.integers(0, 5_000),
        ft_us=st.integers(0, 2_000),
    )
    def test_invariants(self, h, w, extra_slots, pclk, fclk, cycles,
                        exp_us, ft_us):
        cfg = TimingConfig(
            image=(h, w),
            dnn_cycles=cycles,
            pixel_clock_hz=Fraction(pclk),
            slots_per_line=w + extra_slots,
            exposure_s=Fraction(exp_us, 1_000_000),
            frame_transfer_s=Fraction(ft_us, 1_000_000),
            fpga_clock_hz=Fraction(fclk),
        )
        events = simulate_frame(cfg).events
        names = [ev.signal for ev in events]
        times = [ev.time for ev in events]

        assert names[0] == "trigger" and times[0] == 0
        assert all(a <= b for a, b in zip(times, times[1:]))
        keys = [(ev.time, _PRIORITY[ev.signal]) for ev in events]
        assert keys == sorted(keys)

        assert names.count("LVAL_rise") == h
        assert names.count("LVAL_fall") == h
        for unique in ("trigger", "FVAL_rise", "FVAL_fall", "tx_done",
                       "DNN_valid"):
            assert names.count(unique) == 1

        assert names.index("FVAL_rise") < names.index("LVAL_rise")
        assert names.index("tx_done") < names.index("DNN_valid")

        at = {ev.signal: ev.time for ev in events
              if names.count(ev.signal) == 1}
        assert at["DNN_valid"] - at["tx_done"] == Fraction(cycles, fclk)
        assert at["FVAL_rise"] == Fraction(exp_us + ft_us, 1_000_000)


# ---------------------------------------------------------------------------
# 3. dataset round-trip byte-identity


class TestDatasetRoundTrip:
    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 2**63 - 1),
        count=st.integers(4, 24),
        h=st.integers(8, 10),
        w=st.integers(6, 12),
        ions=st.integers(1, 2),
    )
    def test_save_load_save_is_byte_stable(self, seed, count, h, w, ions):
        assume(ions == 1 or w >= 8)  # two 5-px-spaced ions need the width
        cfg = ImageConfig(
            height=h, width=w,
            ion_centers=default_ion_centers(h, w, ions),
        )
        ds = build_dataset(cfg, count, 0.75, seed=seed)
        with tempfile.TemporaryDirectory() as d:
            p1 = os.path.join(d, "a.qimg")
            p2 = os.path.join(d, "b.qimg")
            save_dataset(ds, p1)
            loaded = load_dataset(p1)
            save_dataset(loaded, p2)
            with open(p1, "rb") as fh:
                raw1 = fh.read()
            with open(p2, "rb") as fh:
                raw2 = fh.read()
        assert raw1 == raw2
        np.testing.assert_array_equal(loaded.train_pixels, ds.train_pixels)
        np.testing.assert_array_equal(loaded.test_pixels, ds.test_pixels)
        np.testing.assert_array_equal(loaded.train_labels, ds.train_labels)
        np.testing.assert_array_equal(loaded.test_labels, ds.test_labels)


# ---------------------------------------------------------------------------
# 4. MAC permutation-invariance


class TestMacPermutation:
    @given(
        st.lists(
            st.tuples(st.integers(-(1 << 15), (1 << 15) - 1),
                      st.integers(-(1 << 15), (1 << 15) - 1)),
            min_size=1, max_size=64,
        ),
        st.randoms(use_true_random=False),
    )
    def test_mac_independent_of_order(self, pairs, rnd):
        a = np.array([p[0] for p in pairs], dtype=np.int64)
        b = np.array([p[1] for p in pairs], dtype=np.int64)
        base = mac_accumulate(a, b, FMT)
        idx = list(range(len(pairs)))
        for _ in range(3):
            rnd.shuffle(idx)
            assert mac_accumulate(a[idx], b[idx], FMT) == base

    @given(
        hnp.arrays(np.int64, (3, 10),
                   elements=st.integers(-(1 << 12), (1 << 12))),
        hnp.arrays(np.int64, (10, 4),
                   elements=st.integers(-(1 << 12), (1 << 12))),
        st.randoms(use_true_random=False),
    )
    def test_matmul_inner_dim_permutation(self, a, b, rnd):
        base = fixed_matmul(a, b, FMT)
        idx = list(range(a.shape[1]))
        rnd.shuffle(idx)
        np.testing.assert_array_equal(
            fixed_matmul(a[:, idx], b[idx, :], FMT), base
        )

    @given(
        hnp.arrays(np.int64, (2, 6),
                   elements=st.integers(-(1 << 12), (1 << 12))),
        hnp.arrays(np.int64, (6, 3),
                   elements=st.integers(-(1 << 12), (1 << 12))),
    )
    def test_matmul_matches_elementwise_mac(self, a, b):
        got = fixed_matmul(a, b, FMT)
        for i in range(a.shape[0]):
            for j in range(b.shape[1]):
                assert got[i, j] == mac_accumulate(a[i], b[:, j], FMT)


# ---------------------------------------------------------------------------
# 5. quantizer monotonicity


class TestQuantizerMonotonicity:
    FORMATS = (FixedFormat(16, 8), FixedFormat(12, 6), FixedFormat(18, 10))

    @given(
        st.floats(-300.0, 300.0), st.floats(-300.0, 300.0),
        st.sampled_from(range(3)),
    )
    def test_codes_monotone(self, x, y, fmt_idx):
        fmt = self.FORMATS[fmt_idx]
        if x > y:
            x, y = y, x
        assert quantize(x, fmt) <= quantize(y, fmt)

    @given(st.floats(-120.0, 120.0))
    def test_round_trip_within_half_step(self, x):
        code = quantize(x, FMT)
        assert abs(to_real(code, FMT) - x) <= 0.5 / FMT.scale + 1e-15

    @given(st.floats(128.0, 1e6))
    def test_saturates_high(self, x):
        assert quantize(x, FMT) == FMT.max_code

    @given(st.floats(-1e6, -128.5))
    def test_saturates_low(self, x):
        assert quantize(x, FMT) == FMT.min_code

    @given(
        st.lists(st.floats(0.0, 4096.0), min_size=8, max_size=64),
        st.floats(0.0, 4096.0), st.floats(0.0, 4096.0),
    )
    def test_input_quantizer_monotone(self, pixels, x, y):
        q = calibrate_input_quantizer(
            np.array(pixels), bits=2, calibration=("minmax",)
        )
        if q.hi <= q.lo:
            return  # degenerate constant calibration set
        if x > y:
            x, y = y, x
        cx, cy = q.encode(np.array([x, y]))
        assert cx <= cy
        assert 0 <= cx <= q.levels and 0 <= cy <= q.levels

"""Tests for the clock-cycle pipeline timing simulator.

Every expected timestamp is computed independently with exact Fraction
arithmetic, so the simulator's slot bookkeeping is checked against
closed-form oracles rather than against itself.
"""

from fractions import Fraction

import pytest

from qdetect.errors import ConfigurationError, TraceError
from qdetect.timingsim import (
    CALIBRATED_SLOTS_PER_LINE,
    MLP_PROFILE,
    NOMINAL_SLOTS_PER_LINE,
    PROFILES,
    REFERENCE_GPU_MS,
    VIT_1QUBIT_PROFILE,
    VIT_3QUBIT_PROFILE,
    TimingConfig,
    export_trace,
    ideal_send_time,
    latency_report,
    line_utilization,
    pixel_receive_times,
    read_trace,
    render_latency_report,
    simulate_frame,
    vit_cycle_model,
)
from qdetect.vit import VitConfig

MHZ17 = Fraction(17_000_000)
T_SLOT = Fraction(1, 17_000_000)


def cfg_10x10(**kw):
    base = dict(image=(10, 10), dnn_cycles=5)
    base.update(kw)
    return TimingConfig(**base)


def times_of(trace, signal):
    return [ev.time for ev in trace.events if ev.signal == signal]


def first(trace, signal):
    return times_of(trace, signal)[0]


# ---------------------------------------------------------------------------
# configuration


class TestConfig:
    def test_defaults(self):
        cfg = cfg_10x10()
        assert cfg.pixel_clock_hz == MHZ17
        assert cfg.slots_per_line == 512
        assert cfg.fpga_clock_hz == Fraction(250_000_000)
        assert cfg.exposure_s == Fraction(1, 1000)
        assert cfg.frame_transfer_s == Fraction(41, 100_000)

    def test_float_times_become_exact_decimals(self):
        cfg = cfg_10x10(exposure_s=2e-3, frame_transfer_s=0.5e-3)
        assert cfg.exposure_s == Fraction(1, 500)
        assert cfg.frame_transfer_s == Fraction(1, 2000)

    def test_width_cannot_exceed_slots(self):
        with pytest.raises(ConfigurationError):
            TimingConfig(image=(4, 700), dnn_cycles=5)

    def test_positive_frequencies_required(self):
        with pytest.raises(ConfigurationError):
            cfg_10x10(pixel_clock_hz=0)
        with pytest.raises(ConfigurationError):
            cfg_10x10(fpga_clock_hz=-1)

    def test_dnn_cycles_required_positive(self):
        with pytest.raises(ConfigurationError):
            cfg_10x10(dnn_cycles=0)

    def test_slot_profiles(self):
        assert NOMINAL_SLOTS_PER_LINE == 512
        assert CALIBRATED_SLOTS_PER_LINE == 649


class TestProfiles:
    def test_cycle_constants(self):
        assert MLP_PROFILE.cycles == 5
        assert VIT_1QUBIT_PROFILE.cycles == 4054
        assert VIT_3QUBIT_PROFILE.cycles == 8797

    def test_kinds(self):
        assert MLP_PROFILE.kind == "mlp"
        assert VIT_1QUBIT_PROFILE.kind == "vit"
        assert VIT_3QUBIT_PROFILE.kind == "vit"

    def test_mapping(self):
        assert PROFILES["mlp"] is MLP_PROFILE
        assert PROFILES["vit1"] is VIT_1QUBIT_PROFILE
        assert PROFILES["vit3"] is VIT_3QUBIT_PROFILE


# ---------------------------------------------------------------------------
# frame simulation


class TestSimulateFrame:
    def test_trigger_at_zero_and_fval_exact(self):
        trace = simulate_frame(cfg_10x10())
        assert first(trace, "trigger") == 0
        assert first(trace, "FVAL_rise") == Fraction(141, 100_000)

    def test_tx_done_slot_arithmetic(self):
        trace = simulate_frame(cfg_10x10())
        delta = first(trace, "tx_done") - first(trace, "FVAL_rise")
        assert delta == Fraction(9 * 512 + 10, 17_000_000)
        approx_us = float(delta) * 1e6
        assert abs(approx_us - 271.6) < 0.1

    def test_mlp_dnn_delta_is_20ns(self):
        trace = simulate_frame(cfg_10x10(dnn_cycles=MLP_PROFILE.cycles))
        delta = first(trace, "DNN_valid") - first(trace, "tx_done")
        assert delta == Fraction(1, 50_000_000)

    def test_vit_dnn_deltas_exact(self):
        t1 = simulate_frame(cfg_10x10(dnn_cycles=VIT_1QUBIT_PROFILE.cycles))
        d1 = first(t1, "DNN_valid") - first(t1, "tx_done")
        assert d1 == Fraction(4054, 250_000_000)
        assert d1 == Fraction(16_216, 1_000_000_000)  # 16.216 us
        cfg3 = TimingConfig(image=(12, 24),
                            dnn_cycles=VIT_3QUBIT_PROFILE.cycles)
        t3 = simulate_frame(cfg3)
        d3 = first(t3, "DNN_valid") - first(t3, "tx_done")
        assert d3 == Fraction(35_188, 1_000_000_000)  # 35.188 us

    def test_line_pulse_count_and_width(self):
        cfg = TimingConfig(image=(12, 24), dnn_cycles=5)
        trace = simulate_frame(cfg)
        rises = times_of(trace, "LVAL_rise")
        falls = times_of(trace, "LVAL_fall")
        assert len(rises) == 12 and len(falls) == 12
        fval = first(trace, "FVAL_rise")
        for r, (up, down) in enumerate(zip(rises, falls)):
            assert up == fval + r * 512 * T_SLOT
            assert down - up == 24 * T_SLOT

    def test_tx_done_coincides_with_last_lval_fall(self):
        trace = simulate_frame(cfg_10x10())
        assert first(trace, "tx_done") == times_of(trace, "LVAL_fall")[-1]
        # tie order: the coincident fall is emitted before tx_done
        names = [ev.signal for ev in trace.events]
        last_fall_pos = max(i for i, n in enumerate(names) if n == "LVAL_fall")
        assert names.index("tx_done") == last_fall_pos + 1

    def test_fval_fall_after_full_frame_window(self):
        trace = simulate_frame(cfg_10x10())
        fval = first(trace, "FVAL_rise")
        assert first(trace, "FVAL_fall") == fval + 10 * 512 * T_SLOT
        assert first(trace, "FVAL_fall") > first(trace, "tx_done")

    def test_event_times_non_decreasing(self):
        trace = simulate_frame(cfg_10x10(dnn_cycles=8797))
        times = [ev.time for ev in trace.events]
        assert all(a <= b for a, b in zip(times, times[1:]))

    def test_ordering_invariant(self):
        trace = simulate_frame(cfg_10x10())
        assert (first(trace, "trigger") <= first(trace, "FVAL_rise")
                <= first(trace, "LVAL_rise")  # noqa: W503
                <= first(trace, "tx_done")  # noqa: W503
                < first(trace, "DNN_valid"))  # noqa: W503
        # the frame edge is emitted before the first line edge it coincides with
        names = [ev.signal for ev in trace.events]
        assert names.index("FVAL_rise") < names.index("LVAL_rise")

    def test_deterministic(self):
        a = simulate_frame(cfg_10x10())
        b = simulate_frame(cfg_10x10())
        assert a.events == b.events

    def test_pixel_receive_times(self):
        cfg = cfg_10x10()
        times = pixel_receive_times(cfg)
        trace = simulate_frame(cfg)
        fval = first(trace, "FVAL_rise")
        tx = first(trace, "tx_done")
        assert len(times) == 100
        assert times[-1] == tx
        assert all(fval < t <= tx for t in times)
        assert times[0] == fval + T_SLOT

    def test_full_width_line_tie_order(self):
        cfg = TimingConfig(image=(3, 8), slots_per_line=8, dnn_cycles=5)
        trace = simulate_frame(cfg)
        names_times = [(ev.signal, ev.time) for ev in trace.events
                       if ev.signal in ("LVAL_rise", "LVAL_fall")]
        # at each shared boundary the fall of line r precedes the rise of r+1
        for i in range(1, 3):
            boundary = [nt for nt in names_times
                        if nt[1] == first(trace, "FVAL_rise")
                        + i * 8 * T_SLOT]
            assert [n for n, _ in boundary] == ["LVAL_fall", "LVAL_rise"]

    def test_pixel_clock_scale_covariance(self):
        slow = simulate_frame(cfg_10x10())
        fast = simulate_frame(cfg_10x10(pixel_clock_hz=34_000_000))
        d_slow = first(slow, "tx_done") - first(slow, "FVAL_rise")
        d_fast = first(fast, "tx_done") - first(fast, "FVAL_rise")
        assert d_slow == 2 * d_fast

    def test_dnn_stage_isolation(self):
        a = simulate_frame(cfg_10x10())
        b = simulate_frame(cfg_10x10(pixel_clock_hz=99_000_000,
                                     slots_per_line=700))
        da = first(a, "DNN_valid") - first(a, "tx_done")
        db = first(b, "DNN_valid") - first(b, "tx_done")
        assert da == db


# ---------------------------------------------------------------------------
# derived link metrics


class TestLineUtilization:
    def test_nominal(self):
        assert line_utilization(cfg_10x10()) == Fraction(10, 512)

    def test_calibrated_matches_measured(self):
        util = line_utilization(cfg_10x10(slots_per_line=649))
        assert util == Fraction(10, 649)
        assert abs(float(util) * 100 - 1.54) < 0.01

    def test_full_line(self):
        cfg = TimingConfig(image=(4, 512), dnn_cycles=5)
        assert line_utilization(cfg) == 1


class TestIdealSend:
    def test_ideal_seconds(self):
        ideal, _ = ideal_send_time(cfg_10x10())
        assert ideal == Fraction(100, 17_000_000)
        assert abs(float(ideal) * 1e6 - 5.88) < 0.01

    def test_calibrated_speedup_near_65(self):
        _, speedup = ideal_send_time(cfg_10x10(slots_per_line=649))
        assert speedup == Fraction(649, 10)
        assert abs(float(speedup) - 65.0) <= 2.0

    def test_no_dummy_slots_means_no_speedup(self):
        cfg = TimingConfig(image=(4, 512), dnn_cycles=5)
        _, speedup = ideal_send_time(cfg)
        assert speedup == 1


# ---------------------------------------------------------------------------
# analytic cycle model


class TestVitCycleModel:
    CFG = VitConfig(image=(10, 10), patch_size=5, n_classes=2)

    def test_reuse_doubles_multiplexed_stages(self):
        est1 = vit_cycle_model(self.CFG)
        est2 = vit_cycle_model(self.CFG, reuse=2)
        for stage, cycles in est1["stages"].items():
            if stage in est1["multiplexed"]:
                assert est2["stages"][stage] == 2 * cycles
            else:
                assert est2["stages"][stage] == cycles

    def test_reuse_four_quadruples(self):
        est1 = vit_cycle_model(self.CFG)
        est4 = vit_cycle_model(self.CFG, reuse=4)
        for stage in est1["multiplexed"]:
            assert est4["stages"][stage] == 4 * est1["stages"][stage]

    def test_per_stage_reuse_mapping(self):
        est = vit_cycle_model(self.CFG, reuse={"project": 8})
        base = vit_cycle_model(self.CFG)
        assert est["stages"]["project"] == 8 * base["stages"]["project"]
        assert est["stages"]["qkv"] == base["stages"]["qkv"]

    def test_non_dividing_reuse_rejected(self):
        # head stage multiply count is D*C = 32; 7 does not divide it
        with pytest.raises(ConfigurationError):
            vit_cycle_model(self.CFG, reuse={"head": 7})

    def test_total_is_stage_sum(self):
        est = vit_cycle_model(self.CFG, reuse=2)
        assert est["total"] == sum(est["stages"].values())


# ---------------------------------------------------------------------------
# latency report


class TestLatencyReport:
    def test_fval_latency_exact(self):
        cfg = cfg_10x10(slots_per_line=649)
        rep = latency_report(simulate_frame(cfg), cfg)
        assert rep.fval_latency_s == Fraction(141, 100_000)

    def test_breakdown_contiguous(self):
        cfg = cfg_10x10(slots_per_line=649, dnn_cycles=4054)
        rep = latency_report(simulate_frame(cfg), cfg)
        stages = rep.breakdown
        assert stages[0][1] == 0
        for (_, _, end), (_, start, _) in zip(stages, stages[1:]):
            assert end == start
        assert stages[-1][2] == rep.dnn_valid_latency_s

    def test_ordering_invariant(self):
        cfg = cfg_10x10()
        rep = latency_report(simulate_frame(cfg), cfg)
        assert 0 < rep.fval_latency_s < rep.tx_done_latency_s \
            < rep.dnn_valid_latency_s

    def test_metrics_match_helpers(self):
        cfg = cfg_10x10(slots_per_line=649, dnn_cycles=4054)
        rep = latency_report(simulate_frame(cfg), cfg)
        assert rep.line_utilization == line_utilization(cfg)
        ideal, speedup = ideal_send_time(cfg)
        assert rep.ideal_send_s == ideal
        assert rep.send_speedup == speedup
        assert rep.dnn_compute_s == Fraction(4054, 250_000_000)

    def test_missing_event_raises(self):
        cfg = cfg_10x10()
        trace = simulate_frame(cfg)
        broken = type(trace)(
            config=trace.config,
            events=tuple(ev for ev in trace.events
                         if ev.signal != "DNN_valid"),
        )
        with pytest.raises(TraceError):
            latency_report(broken, cfg)

    def test_gpu_reference_rows(self):
        assert REFERENCE_GPU_MS[(10, 10)]["dnn_valid"] == 211.95
        assert REFERENCE_GPU_MS[(12, 24)]["dnn_valid"] == 214.70
        assert REFERENCE_GPU_MS[(10, 10)]["model"] == 2.85
        assert REFERENCE_GPU_MS[(12, 24)]["model"] == 2.95
        cfg = cfg_10x10(slots_per_line=649)
        rep = latency_report(simulate_frame(cfg), cfg)
        assert rep.gpu_reference == REFERENCE_GPU_MS[(10, 10)]

    def test_render_mentions_signals_and_profile(self):
        cfg = cfg_10x10(slots_per_line=649, dnn_cycles=4054)
        text = render_latency_report(latency_report(simulate_frame(cfg), cfg))
        for token in ("FVAL", "tx_done", "DNN_valid", "calibrated",
                      "211.95", "2.85", "1.410"):
            assert token in text
        nominal = render_latency_report(
            latency_report(simulate_frame(cfg_10x10()), cfg_10x10())
        )
        assert "nominal" in nominal

    def test_render_without_reference(self):
        cfg = TimingConfig(image=(6, 6), dnn_cycles=5)
        rep = latency_report(simulate_frame(cfg), cfg)
        assert rep.gpu_reference is None
        assert "211.95" not in render_latency_report(rep)


# ---------------------------------------------------------------------------
# trace export


class TestExport:
    def test_round_trip_and_integer_ns(self, tmp_path):
        cfg = cfg_10x10(slots_per_line=649, dnn_cycles=5)
        trace = simulate_frame(cfg)
        path = tmp_path / "trace.tsv"
        export_trace(trace, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == len(trace.events)
        sig, ns = lines[0].split("\t")
        assert sig == "trigger" and ns == "0"
        loaded = read_trace(path)
        assert loaded[0] == ("trigger", 0)
        assert all(isinstance(v, int) for _, v in loaded)

    def test_known_nanosecond_values(self, tmp_path):
        cfg = cfg_10x10(slots_per_line=649, dnn_cycles=5)
        trace = simulate_frame(cfg)
        path = tmp_path / "trace.tsv"
        export_trace(trace, path)
        loaded = dict_of_first(read_trace(path))
        assert loaded["FVAL_rise"] == 1_410_000
        tx_exact = Fraction(141, 100_000) + Fraction(9 * 649 + 10, 17_000_000)
        assert loaded["tx_done"] == round(tx_exact * 10**9)

    def test_export_deterministic(self, tmp_path):
        cfg = cfg_10x10()
        p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
        export_trace(simulate_frame(cfg), p1)
        export_trace(simulate_frame(cfg), p2)
        assert p1.read_bytes() == p2.read_bytes()


def dict_of_first(pairs):
    out = {}
    for name, value in pairs:
        out.setdefault(name, value)
    return out

"""Clock-cycle timing of the camera link and the in-fabric classifiers.

Simulates one frame: trigger, exposure, frame transfer, FVAL assertion,
per-line LVAL windows at the pixel clock, last-pixel receipt (tx_done) and
classification completion (DNN_valid).  All timestamps are exact rational
arithmetic — the classifier deltas come out as exact nanosecond counts, not
floats.  The second half quantifies the link inefficiency: each line
occupies a fixed slot budget regardless of how few real pixels it carries,
so a 10-pixel line in a 649-slot interval uses 1.5% of the link.

Run:  python3 demos/05_frame_timing.py
"""

from fractions import Fraction

from qdetect.config import preset, vit_config
from qdetect.timingsim import (
    PROFILES,
    TimingConfig,
    ideal_send_time,
    latency_report,
    line_utilization,
    render_latency_report,
    simulate_frame,
    vit_cycle_model,
)


def show_profile(name: str, image: tuple) -> None:
    profile = PROFILES[name]
    cfg = TimingConfig(image=image, dnn_cycles=profile.cycles,
                       slots_per_line=649)
    trace = simulate_frame(cfg)
    print(f"--- {name}: {profile.cycles} cycles at 250 MHz on "
          f"{image[0]}x{image[1]} ---")
    head = list(trace.events[:5]) + [
        ev for ev in trace.events if ev.signal in ("tx_done", "DNN_valid")
    ]
    for ev in head:
        ns = ev.time * 10**9
        print(f"  {str(ev.signal):10s} {float(ns):>14.1f} ns"
              f"   (exact {ns})")
    delta = trace.first("DNN_valid") - trace.first("tx_done")
    print(f"  classifier latency: exactly {delta} s "
          f"= {float(delta * 10**9):g} ns\n")


def main() -> None:
    show_profile("mlp", (10, 10))
    show_profile("vit1", (10, 10))
    show_profile("vit3", (12, 24))

    print("--- where the transformer's cycles go (1-qubit net, reuse 8) ---")
    net_cfg = vit_config(preset("paper-1qubit"))
    model = vit_cycle_model(net_cfg, reuse=8)
    for stage, cycles in model["stages"].items():
        tag = (f" ({model['mults'][stage]} mults, multiplexed)"
               if stage in model["multiplexed"] else " (fixed-function)")
        print(f"  {stage:10s} {cycles:6d} cycles{tag}")
    print(f"  {'total':10s} {model['total']:6d} cycles "
          f"= {model['total'] * 4} ns at 250 MHz")
    print("  (an idealized lower bound; the shipped profiles carry "
          "measured totals)\n")

    cfg1 = TimingConfig(image=(10, 10), dnn_cycles=PROFILES["vit1"].cycles,
                        slots_per_line=649)

    print("--- link occupancy (calibrated 649-slot lines) ---")
    util = line_utilization(cfg1)
    ideal, speedup = ideal_send_time(cfg1)
    print(f"  10 real pixels per 649-slot line -> utilization "
          f"{float(100 * util):.2f}% ({util})")
    print(f"  ideal dummy-free send of 100 px at 17 MHz: "
          f"{float(ideal * 10**6):.2f} us")
    print(f"  a dummy-free link would ship the frame "
          f"{float(speedup):.1f}x faster "
          f"(= slots/width = {speedup})\n")

    print("--- full latency report (vit1) ---")
    print(render_latency_report(latency_report(simulate_frame(cfg1), cfg1)))


if __name__ == "__main__":
    main()

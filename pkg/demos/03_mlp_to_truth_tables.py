"""From trained polynomial MLP to pure truth tables.

Trains the quantization-aware sparse polynomial MLP on a reduced dataset,
then compiles every neuron into lookup tables: each sub-neuron becomes a
table over its 2-bit fan-in codes, and a separate adder table folds the
sub-neuron sum and activation requantization.  After compilation the network
is *only* wiring and tables — the demo verifies every table entry against
the arithmetic, confirms end-to-end argmax equivalence, and prints the
netlist head plus the per-neuron entry counts that make the design fit in
FPGA LUT fabric.

Run:  python3 demos/03_mlp_to_truth_tables.py   (about a minute)
"""

import dataclasses

import numpy as np

from qdetect.config import image_config, mlp_config, preset
from qdetect.dataset import build_dataset
from qdetect.fidelity import mmf_error_percent
from qdetect.polymlp import (
    compile_truth_tables,
    eval_lut,
    lut_netlist,
    predict,
    train,
    verify_equivalence,
)
from qdetect.threshold import calibrate_model, classify_batch


def main() -> None:
    run_cfg = preset("paper-3qubit")
    ds = build_dataset(image_config(run_cfg), 8_000, split_ratio=0.9, seed=7)
    cfg = dataclasses.replace(mlp_config(run_cfg), epochs=12)
    print(f"architecture: widths {cfg.all_widths}, fan-in {cfg.fan_in}, "
          f"degree {cfg.poly_degree}, {cfg.subneurons} sub-neurons, "
          f"{cfg.activation_bits}-bit activations")
    print(f"training on {len(ds.train_labels)} images, "
          f"{cfg.epochs} epochs ...")
    model = train(cfg, ds)
    print(f"final loss {model.final_loss:.4f}")

    thr_err = mmf_error_percent(
        classify_batch(ds.test_pixels, calibrate_model(ds)),
        ds.test_labels, 3)
    mlp_err = mmf_error_percent(predict(model, ds.test_pixels),
                                ds.test_labels, 3)
    print(f"test-split error: threshold {thr_err:.2f}% vs "
          f"quantized MLP {mlp_err:.2f}%\n")

    net = compile_truth_tables(model)
    print("compiled layers:")
    beta, a_subs = cfg.activation_bits, cfg.subneurons
    for i, layer in enumerate(net.layers):
        width = layer.sub_tables.shape[0]
        fan_in = layer.connectivity.shape[-1]
        per_neuron = (layer.sub_tables.size + layer.adder_tables.size) // width
        formula = a_subs * 2 ** (beta * fan_in) + 2 ** ((beta + 1) * a_subs)
        print(f"  layer {i}: {width:3d} neurons x {per_neuron} "
              f"entries/neuron (= {a_subs}*2^({beta}*{fan_in}) + "
              f"2^({beta + 1}*{a_subs}) = {formula})")

    report = verify_equivalence(model, net, n_samples=0)
    agree = np.mean(predict(model, ds.test_pixels)
                    == eval_lut(net, ds.test_pixels))
    print(f"\n{report.summary()}")
    print(f"argmax agreement on the {len(ds.test_labels)}-image test split: "
          f"{100 * float(agree):.2f}%")

    print("\nnetlist head:")
    for line in lut_netlist(net).splitlines()[:10]:
        print(f"  {line}")


if __name__ == "__main__":
    main()

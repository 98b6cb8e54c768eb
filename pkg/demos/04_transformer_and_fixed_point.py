"""The transformer classifier and its 16-bit fixed-point twin.

Trains the mini vision transformer (patch embedding + one multi-head
self-attention block + batch-norm linear head, all hand-rolled numpy with
manual backprop), then quantizes every weight to ap_fixed<16,8>: 16-bit
codes with 8 fraction bits, saturating arithmetic, round-to-nearest-even.
Softmax becomes a 256-entry exponential table plus one integer reciprocal;
the demo shows the table's anatomy and compares float vs fixed decisions
image by image.

Run:  python3 demos/04_transformer_and_fixed_point.py   (about two minutes)
"""

import dataclasses

import numpy as np

from qdetect.config import image_config, preset, vit_config
from qdetect.dataset import build_dataset
from qdetect.fidelity import mmf_error_percent
from qdetect.fixedpoint import FixedFormat
from qdetect.vit import (
    EXP_STEP,
    build_exp_table,
    predict_fixed,
    predict_vit,
    quantize_vit,
    train_vit,
)


def main() -> None:
    run_cfg = preset("paper-3qubit")
    ds = build_dataset(image_config(run_cfg), 8_000, split_ratio=0.9, seed=7)
    cfg = dataclasses.replace(vit_config(run_cfg), epochs=15)
    print(f"transformer: {cfg.image[0]}x{cfg.image[1]} image -> "
          f"{cfg.n_patches} patches of {cfg.patch_size}x{cfg.patch_size}, "
          f"latent {cfg.latent_dim}, {cfg.n_heads} heads, "
          f"{cfg.n_layers} block(s)")
    print(f"training on {len(ds.train_labels)} images, "
          f"{cfg.epochs} epochs ...")
    model = train_vit(cfg, ds)

    float_err = mmf_error_percent(predict_vit(model, ds.test_pixels),
                                  ds.test_labels, 3)
    print(f"float test error {float_err:.2f}%\n")

    fmt = FixedFormat(16, 8)
    fixed = quantize_vit(model, fmt)
    print(f"quantized to {fmt}: representable range "
          f"[{fmt.min_value}, {fmt.max_value}] in steps of 1/{fmt.scale:.0f}")
    print(f"saturated weight values: {fixed.saturated}")

    table = build_exp_table()
    print(f"\nsoftmax exponential table: {len(table)} entries, "
          f"entry i = round(exp(-i * {EXP_STEP}) * 2^14)")
    print(f"  head  {[int(v) for v in table[:6]]}")
    print(f"  tail  {[int(v) for v in table[-3:]]}  "
          f"(score gaps beyond {len(table) - 1} steps of {EXP_STEP} "
          f"clamp to the last entry)")

    fixed_pred = predict_fixed(fixed, ds.test_pixels)
    float_pred = predict_vit(model, ds.test_pixels)
    fixed_err = mmf_error_percent(fixed_pred, ds.test_labels, 3)
    agree = float(np.mean(fixed_pred == float_pred))
    flips = int(np.sum(fixed_pred != float_pred))
    print(f"\nfixed-point test error {fixed_err:.2f}% "
          f"(float {float_err:.2f}%, delta "
          f"{abs(fixed_err - float_err):.3f} pp)")
    print(f"argmax agreement {100 * agree:.2f}% — {flips} of "
          f"{len(float_pred)} images flipped")
    if flips:
        idx = np.nonzero(fixed_pred != float_pred)[0][:5]
        print(f"flipped image indices (borderline logits): "
              f"{[int(i) for i in idx]}")
    print("\nevery fixed-point operation is integer: inputs quantize once, "
          "matmuls accumulate exactly in int64 with a single "
          "round-to-nearest-even per output, and saturation replaces "
          "overflow.")


if __name__ == "__main__":
    main()

"""The whole workflow in one call: run_pipeline on a reduced 1-qubit preset.

Every stage the ``qdetect run`` command executes — dataset generation,
threshold calibration, both trainers, table compilation and verification,
fixed-point quantization, inference with all four model variants, the
comparison report, and the timing simulations — driven here as a library
call.  Artifacts are content-addressed (the hash in each filename digests
the configuration that produced it), so the second invocation below finds
every file already in place and rebuilds nothing.

Run:  python3 demos/06_full_pipeline.py
"""

import dataclasses
import tempfile

from qdetect.config import preset
from qdetect.pipeline import run_pipeline


def reduced_preset():
    cfg = preset("paper-1qubit")
    # Trim sample count and epochs so the demo finishes in well under a
    # minute; the full preset values live in config.preset.
    return dataclasses.replace(
        cfg,
        dataset=dataclasses.replace(cfg.dataset, count=3000),
        mlp=dataclasses.replace(cfg.mlp, epochs=10),
        vit=dataclasses.replace(cfg.vit, epochs=12),
    )


def main() -> None:
    cfg = reduced_preset()
    print(f"preset {cfg.name!r} reduced to {cfg.dataset.count} images, "
          f"mlp {cfg.mlp.epochs} epochs, vit {cfg.vit.epochs} epochs\n")

    with tempfile.TemporaryDirectory(prefix="qdetect-demo-") as tmp:
        print("=== first pass: everything is built ===")
        result = run_pipeline(cfg, base_dir=tmp)
        for line in result.lines:
            print(" ", line)

        print("\n=== second pass: everything is cached ===")
        again = run_pipeline(cfg, base_dir=tmp)
        for line in again.lines:
            print(" ", line)

        print("\n=== measured mean-measurement-fidelity errors ===")
        for model, err in sorted(result.errors_percent.items(),
                                 key=lambda kv: kv[1]):
            print(f"  {model:10s} {err:6.2f} %")

        print("\n=== comparison report ===")
        report_txt = result.artifacts["report"][0]
        with open(report_txt, encoding="utf-8") as fh:
            print(fh.read())


if __name__ == "__main__":
    main()

"""Command-line entry point.

Subcommands cover each pipeline stage (gen, calibrate, classify, train-mlp,
compile-lut, verify-lut, train-vit, quantize, infer, simulate, report), an
end-to-end runner (run), and artifact inspection (info).  Every flag maps to
exactly one configuration key, named in its help text.

The QDETECT_THREADS environment variable caps worker parallelism.  The
default "0" selects single-threaded deterministic mode: BLAS thread pools
are pinned to one thread before numerical libraries load, so repeated runs
are bit-reproducible.
"""

from __future__ import annotations

import argparse
import os
import sys


def _thread_env() -> None:
    """Pin numerical thread pools before numpy/scipy are imported."""
    raw = os.environ.get("QDETECT_THREADS", "0")
    try:
        workers = max(0, int(raw))
    except ValueError:
        workers = 0
    value = "1" if workers == 0 else str(workers)
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, value)


def _parse_image(text: str):
    from .errors import ConfigurationError

    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise ConfigurationError(
            f"bad image geometry {text!r}; expected HxW such as 10x10"
        ) from exc


def _version_string() -> str:
    from . import __version__
    from .dataset import QIMG_VERSION
    from .polymlp import QLUT_VERSION, QMLP_VERSION
    from .vit import QVIT_VERSION

    return (
        f"qdetect {__version__} "
        f"(formats: QIMG v{QIMG_VERSION}, QMLP v{QMLP_VERSION}, "
        f"QLUT v{QLUT_VERSION}, QVIT v{QVIT_VERSION})"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdetect",
        description=(
            "Qubit-readout software twin: synthetic ion images, threshold / "
            "LUT-MLP / fixed-point transformer classifiers, fidelity "
            "reports, and clock-cycle link timing."
        ),
    )
    parser.add_argument("--version", action="version",
                        version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--ions", type=int, choices=(1, 3), required=True,
                   help="config key dataset.ions (sets 10x10 or 12x24)")
    p.add_argument("--count", type=int, required=True,
                   help="config key dataset.count")
    p.add_argument("--seed", type=int, required=True,
                   help="config key dataset.seed")
    p.add_argument("--out", required=True, help="output QIMG file")
    p.add_argument("--sigma", type=float, help="config key dataset.sigma")
    p.add_argument("--amp", type=float, help="config key dataset.amplitude")
    p.add_argument("--lambda", dest="poisson_lambda", type=float,
                   help="config key dataset.lambda")
    p.add_argument("--bg-mean", type=float, help="config key dataset.bg_mean")
    p.add_argument("--bg-sigma", type=float,
                   help="config key dataset.bg_sigma")
    p.add_argument("--shot-noise", choices=("unit", "scaled"),
                   help="config key dataset.shot_noise")
    p.add_argument("--split", type=float, help="config key dataset.split")

    p = sub.add_parser("calibrate", help="calibrate the ROI threshold model")
    p.add_argument("--data", required=True, help="QIMG dataset")
    p.add_argument("--out", required=True, help="output threshold model")

    p = sub.add_parser("classify",
                       help="classify the test split with a threshold model")
    p.add_argument("--model", required=True, help="threshold model file")
    p.add_argument("--data", required=True, help="QIMG dataset")
    p.add_argument("--report", required=True,
                   help="output classification-result document")

    p = sub.add_parser("train-mlp", help="train the LUT-ready polynomial MLP")
    p.add_argument("--data", required=True, help="QIMG dataset")
    p.add_argument("--config",
                   help="preset name or TOML file ([mlp] section); "
                        "defaults to the preset matching the ion count")
    p.add_argument("--out", required=True, help="output QMLP model")

    p = sub.add_parser("compile-lut",
                       help="compile an MLP into truth tables")
    p.add_argument("--model", required=True, help="QMLP model")
    p.add_argument("--out", required=True, help="output QLUT file")
    p.add_argument("--netlist", help="also dump the text netlist here")

    p = sub.add_parser("verify-lut",
                       help="verify truth tables against the arithmetic")
    p.add_argument("--model", required=True, help="QMLP model")
    p.add_argument("--lut", required=True, help="QLUT file")
    p.add_argument("--samples", type=int, default=0,
                   help="extra random end-to-end argmax checks")

    p = sub.add_parser("train-vit", help="train the transformer classifier")
    p.add_argument("--data", required=True, help="QIMG dataset")
    p.add_argument("--config",
                   help="preset name or TOML file ([vit] section); "
                        "defaults to the preset matching the ion count")
    p.add_argument("--out", required=True, help="output QVIT model")

    p = sub.add_parser("quantize",
                       help="quantize a float transformer to fixed point")
    p.add_argument("--model", required=True, help="float QVIT model")
    p.add_argument("--format", default="16.8",
                   help="config key fixed.format (total.fraction bits)")
    p.add_argument("--out", required=True, help="output fixed QVIT model")

    p = sub.add_parser("infer",
                       help="classify the test split with a trained model")
    p.add_argument("--model", required=True,
                   help="QVIT (float or fixed), QMLP, or QLUT model")
    p.add_argument("--data", required=True, help="QIMG dataset")
    p.add_argument("--report", required=True,
                   help="output classification-result document")

    p = sub.add_parser("simulate", help="simulate frame timing")
    p.add_argument("--profile", choices=("mlp", "vit1", "vit3"),
                   required=True, help="classifier latency profile")
    p.add_argument("--image", required=True,
                   help="geometry HxW, e.g. 10x10")
    p.add_argument("--slots", type=int, default=512,
                   help="config key timing.slots_per_line")
    p.add_argument("--pixel-clock", type=float, default=17e6,
                   help="config key timing.pixel_clock_hz")
    p.add_argument("--fpga-clock", type=float, default=250e6,
                   help="config key timing.fpga_clock_hz")
    p.add_argument("--exposure", type=float, default=1e-3,
                   help="config key timing.exposure_s")
    p.add_argument("--frame-transfer", type=float, default=0.41e-3,
                   help="config key timing.frame_transfer_s")
    p.add_argument("--trace", help="output event trace (TSV)")
    p.add_argument("--report", help="output latency report text")

    p = sub.add_parser("report",
                       help="combine classification results into a table")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="classification-result documents")
    p.add_argument("--out", required=True,
                   help="output prefix (writes PREFIX.txt and PREFIX.csv)")

    p = sub.add_parser("run", help="run the full pipeline")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", help="paper-1qubit or paper-3qubit")
    group.add_argument("--config", help="TOML run configuration")
    p.add_argument("--count", type=int,
                   help="override dataset.count (reduced-scale runs)")
    p.add_argument("--out-dir", help="override run.out_dir")
    p.add_argument("--force", action="store_true",
                   help="rebuild cached artifacts")

    p = sub.add_parser("info", help="describe an artifact file")
    p.add_argument("file", help="any qdetect artifact")

    return parser


# ---------------------------------------------------------------------------
# helpers shared by handlers


def _dataset_label(n_ions: int) -> str:
    return f"{n_ions}-qubit"


def _write_text(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _result_from_predictions(path, preds, labels, n_ions: int,
                             model_name: str) -> float:
    from .fidelity import mmf, tally
    from .pipeline import write_result

    fid = mmf(tally(preds, labels, n_ions))
    write_result(
        path, dataset=_dataset_label(n_ions), model=model_name,
        n_ions=n_ions, samples=len(labels), result=fid,
    )
    return 100.0 * fid.error


def _resolve_training_config(name_or_path, n_ions: int):
    from . import config as cfgmod

    if name_or_path is None:
        name_or_path = "paper-1qubit" if n_ions == 1 else "paper-3qubit"
    return cfgmod.resolve_config(name_or_path)


# ---------------------------------------------------------------------------
# handlers


def _cmd_gen(args) -> int:
    from . import config as cfgmod
    from .dataset import build_dataset, save_dataset

    preset_name = "paper-1qubit" if args.ions == 1 else "paper-3qubit"
    cfg = cfgmod.preset(preset_name)
    import dataclasses

    overrides = {"count": args.count, "seed": args.seed}
    for field_name, value in (
        ("sigma", args.sigma),
        ("amplitude", args.amp),
        ("poisson_lambda", args.poisson_lambda),
        ("bg_mean", args.bg_mean),
        ("bg_sigma", args.bg_sigma),
        ("shot_noise", args.shot_noise),
        ("split", args.split),
    ):
        if value is not None:
            overrides[field_name] = value
    ds_section = dataclasses.replace(cfg.dataset, **overrides)
    cfg = dataclasses.replace(cfg, dataset=ds_section)
    ds = build_dataset(cfgmod.image_config(cfg), ds_section.count,
                       ds_section.split, seed=ds_section.seed)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_images} images to {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    from .dataset import load_dataset
    from .threshold import calibrate_model, save_threshold_model

    ds = load_dataset(args.data)
    model = calibrate_model(ds)
    save_threshold_model(model, args.out)
    print(f"wrote threshold model for {ds.config.n_ions} ion(s) "
          f"to {args.out}")
    return 0


def _cmd_classify(args) -> int:
    from .dataset import load_dataset
    from .threshold import classify_batch, load_threshold_model

    ds = load_dataset(args.data)
    model = load_threshold_model(args.model)
    preds = classify_batch(ds.test_pixels, model)
    error = _result_from_predictions(
        args.report, preds, ds.test_labels, ds.config.n_ions, "threshold"
    )
    print(f"threshold mmf error {error:.2f}% over {len(ds.test_labels)} "
          f"test images -> {args.report}")
    return 0


def _cmd_train_mlp(args) -> int:
    from . import config as cfgmod
    from .dataset import load_dataset
    from .polymlp import save_mlp_model, train

    ds = load_dataset(args.data)
    run_cfg = _resolve_training_config(args.config, ds.config.n_ions)
    model = train(cfgmod.mlp_config(run_cfg), ds)
    save_mlp_model(model, args.out)
    print(f"trained MLP (final loss {model.final_loss:.4f}) -> {args.out}")
    return 0


def _cmd_compile_lut(args) -> int:
    from .polymlp import (
        compile_truth_tables,
        load_mlp_model,
        lut_netlist,
        save_lut_network,
    )

    model = load_mlp_model(args.model)
    net = compile_truth_tables(model)
    save_lut_network(net, args.out)
    total = sum(layer.sub_tables.size + layer.adder_tables.size
                for layer in net.layers)
    print(f"compiled {total} table entries -> {args.out}")
    if args.netlist:
        _write_text(args.netlist, lut_netlist(net))
        print(f"netlist -> {args.netlist}")
    return 0


def _cmd_verify_lut(args) -> int:
    from .polymlp import load_lut_network, load_mlp_model, verify_equivalence

    model = load_mlp_model(args.model)
    net = load_lut_network(args.lut)
    report = verify_equivalence(model, net, n_samples=args.samples)
    print(report.summary())
    return 0 if report.ok else 1


def _cmd_train_vit(args) -> int:
    from . import config as cfgmod
    from .dataset import load_dataset
    from .vit import save_vit_model, train_vit

    ds = load_dataset(args.data)
    run_cfg = _resolve_training_config(args.config, ds.config.n_ions)
    model = train_vit(cfgmod.vit_config(run_cfg), ds)
    save_vit_model(model, args.out)
    print(f"trained transformer -> {args.out}")
    return 0


def _cmd_quantize(args) -> int:
    from .fixedpoint import FixedFormat
    from .vit import FixedVitModel, load_vit_model, quantize_vit, save_vit_model

    model = load_vit_model(args.model)
    if isinstance(model, FixedVitModel):
        from .errors import UsageError

        raise UsageError(f"{args.model} is already fixed point")
    fixed = quantize_vit(model, FixedFormat.parse(args.format))
    save_vit_model(fixed, args.out)
    print(f"quantized to {args.format} "
          f"({fixed.saturated} saturated values) -> {args.out}")
    return 0


def _cmd_infer(args) -> int:
    from . import binio
    from .dataset import load_dataset
    from .errors import FormatMagicError

    ds = load_dataset(args.data)
    magic = binio.peek_magic(args.model)
    if magic == binio.MAGIC_QVIT:
        from .vit import FixedVitModel, load_vit_model, predict_fixed, predict_vit

        model = load_vit_model(args.model)
        if isinstance(model, FixedVitModel):
            preds, name = predict_fixed(model, ds.test_pixels), "vit"
        else:
            preds, name = predict_vit(model, ds.test_pixels), "vit-float"
    elif magic == binio.MAGIC_QMLP:
        from .polymlp import load_mlp_model, predict

        preds, name = predict(load_mlp_model(args.model),
                              ds.test_pixels), "mlp-float"
    elif magic == binio.MAGIC_QLUT:
        from .polymlp import eval_lut, load_lut_network

        preds, name = eval_lut(load_lut_network(args.model),
                               ds.test_pixels), "mlp"
    else:
        raise FormatMagicError(b"QVIT/QMLP/QLUT", magic)
    error = _result_from_predictions(
        args.report, preds, ds.test_labels, ds.config.n_ions, name
    )
    print(f"{name} mmf error {error:.2f}% over {len(ds.test_labels)} "
          f"test images -> {args.report}")
    return 0


def _cmd_simulate(args) -> int:
    from .timingsim import (
        PROFILES,
        TimingConfig,
        export_trace,
        latency_report,
        render_latency_report,
        simulate_frame,
    )

    profile = PROFILES[args.profile]
    cfg = TimingConfig(
        image=_parse_image(args.image),
        dnn_cycles=profile.cycles,
        pixel_clock_hz=args.pixel_clock,
        slots_per_line=args.slots,
        exposure_s=args.exposure,
        frame_transfer_s=args.frame_transfer,
        fpga_clock_hz=args.fpga_clock,
    )
    trace = simulate_frame(cfg)
    text = render_latency_report(latency_report(trace, cfg))
    if args.trace:
        export_trace(trace, args.trace)
        print(f"trace -> {args.trace}")
    if args.report:
        _write_text(args.report, text)
        print(f"report -> {args.report}")
    else:
        print(text, end="")
    return 0


def _cmd_report(args) -> int:
    from .fidelity import compare_report, render_compare_report, report_csv
    from .pipeline import read_result, result_to_fidelity

    results = {}
    latencies = {}
    dataset_label = None
    for path in args.inputs:
        doc = read_result(path)
        name = doc["model"]
        results[name] = result_to_fidelity(doc)
        if "latency_seconds" in doc:
            latencies[name] = doc["latency_seconds"]
        dataset_label = dataset_label or doc.get("dataset")
    rep = compare_report(results, latencies=latencies,
                         dataset=dataset_label or "dataset")
    text = render_compare_report(rep)
    _write_text(f"{args.out}.txt", text)
    _write_text(f"{args.out}.csv", report_csv(rep))
    print(text, end="")
    print(f"wrote {args.out}.txt and {args.out}.csv")
    return 0


def _cmd_run(args) -> int:
    import dataclasses

    from . import config as cfgmod
    from .pipeline import run_pipeline

    if args.preset is not None:
        cfg = cfgmod.preset(args.preset)
    else:
        cfg = cfgmod.resolve_config(args.config)
    if args.count is not None:
        cfg = dataclasses.replace(
            cfg, dataset=dataclasses.replace(cfg.dataset, count=args.count)
        )
    if args.out_dir is not None:
        cfg = dataclasses.replace(
            cfg, run=dataclasses.replace(cfg.run, out_dir=args.out_dir)
        )
    result = run_pipeline(cfg, force=args.force)
    for line in result.lines:
        print(line)
    report_path = result.artifacts["report"][0]
    with open(report_path, "r", encoding="utf-8") as fh:
        print()
        print(fh.read(), end="")
    return 0


def _cmd_info(args) -> int:
    from . import binio

    magic = binio.peek_magic(args.file)
    if magic == binio.MAGIC_QIMG:
        r = binio.read_file(args.file)
        r.expect_magic(binio.MAGIC_QIMG)
        version = r.unpack("H")
        n, h, w = r.unpack("I"), r.unpack("H"), r.unpack("H")
        ions, depth = r.unpack("B"), r.unpack("B")
        seed, boundary = r.unpack("Q"), r.unpack("I")
        print(f"QIMG v{version}: {n} images of {h}x{w} u{depth} pixels, "
              f"{ions} ion(s), seed {seed}, "
              f"{boundary} train / {n - boundary} test")
    elif magic == binio.MAGIC_QMLP:
        from .polymlp import QMLP_VERSION, load_mlp_model

        model = load_mlp_model(args.file)
        cfg = model.config
        print(f"QMLP v{QMLP_VERSION}: widths {cfg.all_widths}, "
              f"fan-in {cfg.fan_in}, degree {cfg.poly_degree}, "
              f"{cfg.activation_bits}-bit activations, "
              f"{cfg.subneurons} sub-neurons, final loss "
              f"{model.final_loss:.4f}")
    elif magic == binio.MAGIC_QLUT:
        from .polymlp import QLUT_VERSION, load_lut_network

        net = load_lut_network(args.file)
        entries = sum(layer.sub_tables.size + layer.adder_tables.size
                      for layer in net.layers)
        widths = [layer.sub_tables.shape[0] for layer in net.layers]
        print(f"QLUT v{QLUT_VERSION}: {len(net.layers)} layers, "
              f"widths {widths}, {entries} table entries, input quantizer "
              f"[{net.input_quantizer.lo:g}, {net.input_quantizer.hi:g}]")
    elif magic == binio.MAGIC_QVIT:
        from .vit import QVIT_VERSION, FixedVitModel, load_vit_model

        model = load_vit_model(args.file)
        cfg = model.config
        kind = ("fixed " + str(model.fmt)
                if isinstance(model, FixedVitModel) else "float")
        extra = (f", {model.saturated} saturated"
                 if isinstance(model, FixedVitModel) else "")
        print(f"QVIT v{QVIT_VERSION} ({kind}): image "
              f"{cfg.image[0]}x{cfg.image[1]}, patch {cfg.patch_size}, "
              f"latent {cfg.latent_dim}, {cfg.n_heads} heads, "
              f"{cfg.n_layers} layer(s), {cfg.n_classes} classes{extra}")
    else:
        from .threshold import MODEL_HEADER

        with open(args.file, "rb") as fh:
            head = fh.read(len(MODEL_HEADER.encode()))
        if head == MODEL_HEADER.encode():
            from .threshold import load_threshold_model

            model = load_threshold_model(args.file)
            print(f"threshold model: {len(model.ions)} ion(s), "
                  f"thresholds "
                  f"{[ion.threshold for ion in model.ions]}")
        else:
            from .errors import FormatMagicError

            raise FormatMagicError(b"QIMG/QMLP/QLUT/QVIT", magic)
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "calibrate": _cmd_calibrate,
    "classify": _cmd_classify,
    "train-mlp": _cmd_train_mlp,
    "compile-lut": _cmd_compile_lut,
    "verify-lut": _cmd_verify_lut,
    "train-vit": _cmd_train_vit,
    "quantize": _cmd_quantize,
    "infer": _cmd_infer,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
    "run": _cmd_run,
    "info": _cmd_info,
}


def main(argv=None) -> int:
    _thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import QdetectError

    try:
        return _HANDLERS[args.command](args)
    except QdetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

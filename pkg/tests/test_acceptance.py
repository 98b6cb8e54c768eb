"""Acceptance gate: every shipped guarantee, checked at its stated tolerance.

Each test measures one guarantee end to end — real data generation, real
training, real compilation — and records a single verdict line with the
measured values.  Expensive artifacts (the 20,000-image training runs) are
shared across tests through module-scoped fixtures.  The whole file runs in
roughly ten minutes on one core.
"""

import dataclasses
import hashlib
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from qdetect import config as cfgmod
from qdetect import polymlp, threshold, vit
from qdetect.dataset import build_dataset
from qdetect.fidelity import mmf, tally
from qdetect.fixedpoint import FixedFormat
from qdetect.pipeline import run_pipeline
from qdetect.timingsim import (
    PROFILES,
    TimingConfig,
    ideal_send_time,
    line_utilization,
    simulate_frame,
)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _error_percent(predictions, labels, n_ions):
    return 100.0 * mmf(tally(predictions, labels, n_ions)).error


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# shared expensive artifacts


@pytest.fixture(scope="module")
def ds3q():
    """25,000 three-ion images at an 0.8 split: exactly 20,000 training
    images (the documented reduced-scale training mode) plus 5,000 test."""
    cfg = cfgmod.preset("paper-3qubit")
    return build_dataset(cfgmod.image_config(cfg), 25_000, 0.8,
                         seed=cfg.dataset.seed)


@pytest.fixture(scope="module")
def thr3q(ds3q):
    return threshold.calibrate_model(ds3q)


@pytest.fixture(scope="module")
def mlp3q(ds3q):
    cfg = cfgmod.mlp_config(cfgmod.preset("paper-3qubit"))
    t0 = time.monotonic()
    model = polymlp.train(cfg, ds3q)
    return model, time.monotonic() - t0


@pytest.fixture(scope="module")
def vit3q(ds3q):
    cfg = cfgmod.vit_config(cfgmod.preset("paper-3qubit"))
    t0 = time.monotonic()
    model = vit.train_vit(cfg, ds3q)
    return model, time.monotonic() - t0


@pytest.fixture(scope="module")
def fixed3q(vit3q):
    return vit.quantize_vit(vit3q[0], FixedFormat(16, 8))


@pytest.fixture(scope="module")
def ds1q():
    cfg = cfgmod.preset("paper-1qubit")
    return build_dataset(cfgmod.image_config(cfg), 10_000,
                         cfg.dataset.split, seed=cfg.dataset.seed)


# ---------------------------------------------------------------------------
# 1. three-qubit thresholding at full scale


def test_three_qubit_threshold_error_band(verdict):
    cfg = cfgmod.preset("paper-3qubit")
    t0 = time.monotonic()
    ds = build_dataset(cfgmod.image_config(cfg), 100_000, cfg.dataset.split,
                       seed=cfg.dataset.seed)
    model = threshold.calibrate_model(ds)
    err = _error_percent(threshold.classify_batch(ds.test_pixels, model),
                         ds.test_labels, 3)
    elapsed = time.monotonic() - t0
    ok = 7.4 <= err <= 15.4 and elapsed < 120.0
    verdict(f"{_status(ok)}  3-qubit threshold on 100k images: "
            f"error {err:.2f}% (band 11.4 +/- 4.0), {elapsed:.1f}s (< 120s)")
    assert 7.4 <= err <= 15.4
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# 2. three-qubit DNN ordering and reduction factors


def test_dnn_ordering_and_reduction_factors(verdict, ds3q, thr3q, mlp3q,
                                            vit3q):
    mlp_model, mlp_seconds = mlp3q
    vit_model, vit_seconds = vit3q
    pixels, labels = ds3q.test_pixels, ds3q.test_labels

    thr_err = _error_percent(threshold.classify_batch(pixels, thr3q),
                             labels, 3)
    net = polymlp.compile_truth_tables(mlp_model)
    mlp_err = _error_percent(polymlp.eval_lut(net, pixels), labels, 3)
    vit_err = _error_percent(vit.predict_vit(vit_model, pixels), labels, 3)

    def factor(err):
        return float("inf") if err == 0 else thr_err / err

    train_minutes = (mlp_seconds + vit_seconds) / 60.0
    ordered = vit_err < mlp_err < thr_err
    factors_ok = factor(mlp_err) >= 3.0 and factor(vit_err) >= 3.0
    ok = ordered and factors_ok and train_minutes < 30.0
    verdict(f"{_status(ok)}  3-qubit ordering at 20k train: "
            f"vit {vit_err:.2f}% < mlp {mlp_err:.2f}% < "
            f"threshold {thr_err:.2f}%; factors {factor(vit_err):.1f}x / "
            f"{factor(mlp_err):.1f}x (>= 3x); training {train_minutes:.1f} "
            f"min (< 30)")
    assert ordered
    assert factors_ok
    assert train_minutes < 30.0


# ---------------------------------------------------------------------------
# 3. one-qubit synthetic stand-in


def test_one_qubit_dnns_beat_threshold(verdict, ds1q):
    preset = cfgmod.preset("paper-1qubit")
    thr = threshold.calibrate_model(ds1q)
    pixels, labels = ds1q.test_pixels, ds1q.test_labels
    thr_err = _error_percent(threshold.classify_batch(pixels, thr),
                             labels, 1)

    mlp_model = polymlp.train(cfgmod.mlp_config(preset), ds1q)
    mlp_err = _error_percent(polymlp.predict(mlp_model, pixels), labels, 1)
    vit_model = vit.train_vit(cfgmod.vit_config(preset), ds1q)
    vit_err = _error_percent(vit.predict_vit(vit_model, pixels), labels, 1)

    ok = mlp_err < thr_err and vit_err < thr_err
    verdict(f"{_status(ok)}  1-qubit stand-in: mlp {mlp_err:.2f}% and "
            f"vit {vit_err:.2f}% both below threshold {thr_err:.2f}%")
    assert mlp_err < thr_err
    assert vit_err < thr_err


# ---------------------------------------------------------------------------
# 4. exhaustive LUT equivalence


def test_lut_exhaustive_equivalence_and_argmax(verdict, ds3q, mlp3q):
    model, _ = mlp3q
    t0 = time.monotonic()
    net = polymlp.compile_truth_tables(model)
    report = polymlp.verify_equivalence(model, net)
    ref = polymlp.predict(model, ds3q.test_pixels)
    got = polymlp.eval_lut(net, ds3q.test_pixels)
    agreement = float(np.mean(ref == got))
    elapsed = time.monotonic() - t0

    ok = (report.ok and not report.mismatches and agreement == 1.0
          and elapsed < 60.0)
    verdict(f"{_status(ok)}  LUT equivalence: {report.n_codes_checked} "
            f"table entries, {len(report.mismatches)} mismatches; argmax "
            f"agreement {100 * agreement:.2f}% on {len(ref)} test images; "
            f"{elapsed:.1f}s (< 60s)")
    assert report.ok
    assert not report.mismatches
    assert agreement == 1.0
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 5. table-entry count formula


def test_lut_entry_count_formula(verdict):
    measured = {}
    for fan_in, expected in ((2, 96), (4, 576)):
        cfg = polymlp.PolyMlpConfig(
            hidden_widths=(4,), n_classes=2, fan_in=fan_in,
            activation_bits=2, subneurons=2, poly_degree=2, seed=0,
        )
        model = polymlp.initialize_model(cfg, input_width=8)
        net = polymlp.compile_truth_tables(model)
        per_neuron = []
        for layer in net.layers:
            width = layer.sub_tables.shape[0]
            entries = layer.sub_tables.size + layer.adder_tables.size
            per_neuron.append(entries // width)
        beta, a = cfg.activation_bits, cfg.subneurons
        formula = a * 2 ** (beta * fan_in) + 2 ** ((beta + 1) * a)
        measured[fan_in] = (per_neuron, formula, expected)

    ok = all(
        all(n == formula == expected for n in per_neuron)
        for per_neuron, formula, expected in measured.values()
    )
    verdict(f"{_status(ok)}  LUT entries/neuron: F=2 -> "
            f"{measured[2][0][0]} (expected 96), F=4 -> "
            f"{measured[4][0][0]} (expected 576)")
    for per_neuron, formula, expected in measured.values():
        for n in per_neuron:
            assert n == formula == expected


# ---------------------------------------------------------------------------
# 6. gradient checks for both trainers


def _relative_fd_error(loss_fn, params):
    """Worst relative error between analytic grads and central differences.

    ``params`` is a list of (array, grad_array) pairs mutated in place.
    """
    h = 1e-6
    worst = 0.0
    for arr, grad in params:
        flat_a = arr.reshape(-1)
        flat_g = grad.reshape(-1)
        for k in range(flat_a.size):
            keep = flat_a[k]
            flat_a[k] = keep + h
            lp = loss_fn()
            flat_a[k] = keep - h
            lm = loss_fn()
            flat_a[k] = keep
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(flat_g[k]), 1e-5)
            worst = max(worst, abs(fd - flat_g[k]) / denom)
    return worst


def test_gradient_checks_both_trainers(verdict):
    rng = np.random.default_rng(24)

    # polynomial MLP trainer, batch-statistics mode (the training path)
    mcfg = polymlp.PolyMlpConfig(hidden_widths=(3, 3), n_classes=2,
                                 fan_in=2, subneurons=2, seed=4)
    mlp_model = polymlp.initialize_model(mcfg, input_width=4, init_rng=rng)
    for c in mlp_model.coeffs:
        c[:] = rng.uniform(-0.4, 0.4, size=c.shape)
    mlp_model.input_quantizer = polymlp.InputQuantizer(lo=0.0, hi=1.0,
                                                       bits=2)
    bn = {
        "gamma": [rng.uniform(0.6, 1.4, size=(w, 2))
                  for w in mcfg.all_widths],
        "bias": [rng.uniform(-0.3, 0.3, size=(w, 2))
                 for w in mcfg.all_widths],
    }
    pixels = rng.uniform(0.1, 0.9, size=(6, 4))
    labels = np.array([0, 1, 0, 1, 1, 0], dtype=np.uint8)
    _, grads, bn_grads, _ = polymlp.loss_and_grads(
        mlp_model, pixels, labels, passthrough=True, bn_state=bn
    )

    def mlp_loss():
        val, *_ = polymlp.loss_and_grads(
            mlp_model, pixels, labels, passthrough=True, bn_state=bn
        )
        return val

    mlp_params = []
    for layer in range(mlp_model.n_layers):
        mlp_params.append((mlp_model.coeffs[layer], grads[layer]))
        mlp_params.append((bn["gamma"][layer], bn_grads["gamma"][layer]))
        mlp_params.append((bn["bias"][layer], bn_grads["bias"][layer]))
    mlp_worst = _relative_fd_error(mlp_loss, mlp_params)

    # transformer trainer, every parameter tensor
    vcfg = vit.VitConfig(image=(2, 4), patch_size=2, latent_dim=4,
                         n_heads=2, n_classes=2, seed=4)
    vit_model = vit.initialize_vit(vcfg, norm_max=100.0,
                                   rng=np.random.default_rng(16))
    vpix = np.random.default_rng(16).integers(
        0, 100, size=(5, 2, 4)).astype(np.float64)
    vlab = np.array([0, 1, 1, 0, 1], dtype=np.uint8)
    _, vgrads, _ = vit.loss_and_grads_vit(vit_model, vpix, vlab)

    def vit_loss():
        val, _, _ = vit.loss_and_grads_vit(vit_model, vpix, vlab)
        return val

    vit_params = [(arr, vgrads[name])
                  for name, arr in vit.parameters(vit_model).items()]
    vit_worst = _relative_fd_error(vit_loss, vit_params)

    ok = mlp_worst < 1e-4 and vit_worst < 1e-4
    verdict(f"{_status(ok)}  gradient checks: worst relative error "
            f"mlp {mlp_worst:.2e}, vit {vit_worst:.2e} (< 1e-4)")
    assert mlp_worst < 1e-4
    assert vit_worst < 1e-4


# ---------------------------------------------------------------------------
# 7. fixed-point fidelity parity


def test_fixed_point_fidelity_parity(verdict, ds3q, vit3q, fixed3q):
    pixels, labels = ds3q.test_pixels, ds3q.test_labels
    float_pred = vit.predict_vit(vit3q[0], pixels)
    fixed_pred = vit.predict_fixed(fixed3q, pixels)
    float_err = _error_percent(float_pred, labels, 3)
    fixed_err = _error_percent(fixed_pred, labels, 3)
    delta_pp = abs(fixed_err - float_err)
    agreement = float(np.mean(float_pred == fixed_pred))

    ok = delta_pp <= 0.5 and agreement >= 0.99
    verdict(f"{_status(ok)}  fixed-point parity: error "
            f"{float_err:.2f}% -> {fixed_err:.2f}% "
            f"(delta {delta_pp:.3f} pp <= 0.5), argmax agreement "
            f"{100 * agreement:.2f}% (>= 99%)")
    assert delta_pp <= 0.5
    assert agreement >= 0.99


# ---------------------------------------------------------------------------
# 8. timing arithmetic


def test_timing_arithmetic_exactness(verdict):
    def compute_delta(profile, image):
        cfg = TimingConfig(image=image, dnn_cycles=PROFILES[profile].cycles,
                           slots_per_line=649)
        trace = simulate_frame(cfg)
        return trace, trace.first("DNN_valid") - trace.first("tx_done")

    trace1, mlp_delta = compute_delta("mlp", (10, 10))
    _, vit1_delta = compute_delta("vit1", (10, 10))
    _, vit3_delta = compute_delta("vit3", (12, 24))
    fval = trace1.first("FVAL_rise")

    cfg1 = TimingConfig(image=(10, 10), dnn_cycles=PROFILES["vit1"].cycles,
                        slots_per_line=649)
    util_pp = 100 * float(line_utilization(cfg1))
    _, speedup = ideal_send_time(cfg1)

    exact = (
        mlp_delta == Fraction(20, 10**9)
        and vit1_delta == Fraction(16_216, 10**9)
        and vit3_delta == Fraction(35_188, 10**9)
        and fval == Fraction(141, 100_000)
    )
    bands = abs(util_pp - 1.54) <= 0.01 and 63.0 <= float(speedup) <= 67.0
    ok = exact and bands
    verdict(f"{_status(ok)}  timing: mlp {mlp_delta} s (= 20 ns), "
            f"vit1 {vit1_delta} s (= 16.216 us), vit3 {vit3_delta} s "
            f"(= 35.188 us), FVAL {fval} s (= 1.41 ms); utilization "
            f"{util_pp:.4f}% (1.54 +/- 0.01), speedup {float(speedup):.1f}x "
            f"(65 +/- 2)")
    assert mlp_delta == Fraction(20, 10**9)
    assert vit1_delta == Fraction(16_216, 10**9)
    assert vit3_delta == Fraction(35_188, 10**9)
    assert fval == Fraction(141, 100_000)
    assert abs(util_pp - 1.54) <= 0.01
    assert 63.0 <= float(speedup) <= 67.0


# ---------------------------------------------------------------------------
# 9. property suites


def test_property_suites_green(verdict):
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q",
         os.path.join(ROOT, "tests", "test_properties.py")],
        cwd=ROOT, capture_output=True, text=True,
    )
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout else ""
    ok = proc.returncode == 0
    verdict(f"{_status(ok)}  property suites: {tail}")
    assert ok, proc.stdout + proc.stderr


# ---------------------------------------------------------------------------
# 10. determinism


def test_preset_determinism_byte_identical(verdict, tmp_path):
    """The preset workflow run twice, in fresh directories, at a reduced
    image count (the stages and formats are scale-independent)."""
    cfg = cfgmod.preset("paper-1qubit")
    cfg = dataclasses.replace(
        cfg, dataset=dataclasses.replace(cfg.dataset, count=4_000))

    trees = []
    for run_name in ("run-a", "run-b"):
        run_cfg = dataclasses.replace(
            cfg, run=dataclasses.replace(cfg.run, out_dir=run_name))
        result = run_pipeline(run_cfg, base_dir=str(tmp_path))
        tree = {}
        for dirpath, _, names in os.walk(result.out_dir):
            for name in names:
                p = os.path.join(dirpath, name)
                with open(p, "rb") as fh:
                    digest = hashlib.sha256(fh.read()).hexdigest()
                tree[os.path.relpath(p, result.out_dir)] = digest
        trees.append(tree)

    identical = trees[0] == trees[1]
    n_files = len(trees[0])
    model_files = [n for n in trees[0]
                   if n.endswith((".qmlp", ".qlut", ".qvit", ".qimg"))]
    report_files = [n for n in trees[0] if "report" in n or "result" in n]
    ok = identical and n_files > 0 and model_files and report_files
    verdict(f"{_status(ok)}  determinism: two preset runs produced "
            f"{n_files} byte-identical files ({len(model_files)} model/data, "
            f"{len(report_files)} reports)")
    assert identical
    assert model_files
    assert report_files

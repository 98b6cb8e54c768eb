"""End-to-end pipeline: generate -> calibrate -> train -> compile -> verify
-> quantize -> infer -> report -> simulate.

Every stage writes its artifact under the run's output directory with a
content-addressed file name: a short digest of the configuration values
(and upstream digests) that determine the artifact's bytes.  Re-running the
same configuration finds the artifacts already present and skips the work;
``force=True`` rebuilds everything.  Because all stages are seeded and
deterministic, two runs of the same configuration produce byte-identical
artifacts whether or not the cache is used.

Classification results are small TOML documents (model name, error, per-state
probabilities, optional per-shot latency) that the report stage and the
``report`` command consume.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import config as cfgmod
from . import polymlp, threshold, timingsim, vit
from .config import RunConfig
from .dataset import Dataset, build_dataset, load_dataset, save_dataset
from .errors import EquivalenceError, ParseError, PipelineError, QdetectError
from .fidelity import (
    FidelityResult,
    compare_report,
    mmf,
    render_compare_report,
    report_csv,
    tally,
)

RESULT_KIND = "classification-result"


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x00")
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# classification result documents


def write_result(path, *, dataset: str, model: str, n_ions: int,
                 samples: int, result: FidelityResult,
                 latency_seconds: float | None = None) -> None:
    """Persist one model's fidelity numbers as a small TOML document."""
    per_state = ", ".join(repr(float(p)) for p in result.per_state)
    lines = [
        f'kind = "{RESULT_KIND}"',
        f'dataset = "{dataset}"',
        f'model = "{model}"',
        f"n_ions = {n_ions}",
        f"samples = {samples}",
        f"mmf = {float(result.mmf)!r}",
        f"mmf_error_percent = {100.0 * float(result.error)!r}",
    ]
    if latency_seconds is not None:
        lines.append(f"latency_seconds = {float(latency_seconds)!r}")
    lines.append(f"per_state = [{per_state}]")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_result(path) -> dict:
    """Parse a classification-result document."""
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    if doc.get("kind") != RESULT_KIND:
        raise ParseError(
            f"{path}: not a {RESULT_KIND} document "
            f"(kind={doc.get('kind')!r})"
        )
    return doc


def result_to_fidelity(doc: dict) -> FidelityResult:
    error = doc["mmf_error_percent"] / 100.0
    return FidelityResult(
        mmf=1.0 - error,
        error=error,
        per_state=np.asarray(doc.get("per_state", []), dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    config: RunConfig
    out_dir: str
    artifacts: dict  # stage name -> tuple of paths
    errors_percent: dict  # model name -> mmf error (percent)
    lines: list  # human-readable progress log


def _stage(result: PipelineResult, name: str, paths, cached: bool,
           seconds: float) -> None:
    paths = tuple(str(p) for p in paths)
    result.artifacts[name] = paths
    state = "cached" if cached else f"built in {seconds:.1f}s"
    for path in paths:
        result.lines.append(f"[{name}] {state}: {path}")


def run_pipeline(cfg: RunConfig, base_dir=None, force: bool = False
                 ) -> PipelineResult:
    """Execute every stage of the configured workflow.

    Artifacts land in ``cfg.run.out_dir`` (resolved against ``base_dir`` or
    the current directory).  Existing artifacts with matching content
    digests are reused unless ``force``.
    """
    out_dir = cfg.run.out_dir
    if base_dir is not None:
        out_dir = os.path.join(base_dir, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    res = PipelineResult(
        config=cfg, out_dir=out_dir, artifacts={}, errors_percent={},
        lines=[],
    )
    n_ions = cfg.dataset.ions
    n_states = 2 ** n_ions
    label = cfg.run.label

    def path(name: str) -> str:
        return os.path.join(out_dir, name)

    def fresh(*paths) -> bool:
        return force or not all(os.path.exists(p) for p in paths)

    # -- gen ---------------------------------------------------------------
    ds_digest = _digest("dataset", cfg.dataset)
    ds_path = path(f"dataset-{ds_digest}.qimg")
    t0 = time.time()
    try:
        if fresh(ds_path):
            ds = build_dataset(
                cfgmod.image_config(cfg), cfg.dataset.count,
                cfg.dataset.split, seed=cfg.dataset.seed,
            )
            save_dataset(ds, ds_path)
            _stage(res, "gen", [ds_path], False, time.time() - t0)
        else:
            ds = load_dataset(ds_path)
            _stage(res, "gen", [ds_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("gen", str(exc)) from exc

    # -- calibrate ---------------------------------------------------------
    thr_path = path(f"threshold-{ds_digest}.txt")
    t0 = time.time()
    try:
        if fresh(thr_path):
            thr_model = threshold.calibrate_model(ds)
            threshold.save_threshold_model(thr_model, thr_path)
            _stage(res, "calibrate", [thr_path], False, time.time() - t0)
        else:
            thr_model = threshold.load_threshold_model(thr_path)
            _stage(res, "calibrate", [thr_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("calibrate", str(exc)) from exc

    # -- train-mlp ----------------------------------------------------------
    mlp_digest = _digest("mlp", ds_digest, cfg.mlp)
    mlp_path = path(f"mlp-{mlp_digest}.qmlp")
    t0 = time.time()
    try:
        if fresh(mlp_path):
            mlp_model = polymlp.train(cfgmod.mlp_config(cfg), ds)
            polymlp.save_mlp_model(mlp_model, mlp_path)
            _stage(res, "train-mlp", [mlp_path], False, time.time() - t0)
        else:
            mlp_model = polymlp.load_mlp_model(mlp_path)
            _stage(res, "train-mlp", [mlp_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("train-mlp", str(exc)) from exc

    # -- compile-lut ----------------------------------------------------------
    lut_path = path(f"lut-{mlp_digest}.qlut")
    netlist_path = path(f"netlist-{mlp_digest}.txt")
    t0 = time.time()
    try:
        if fresh(lut_path, netlist_path):
            net = polymlp.compile_truth_tables(mlp_model)
            polymlp.save_lut_network(net, lut_path)
            tmp = f"{netlist_path}.tmp.{os.getpid()}"
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(polymlp.lut_netlist(net))
            os.replace(tmp, netlist_path)
            _stage(res, "compile-lut", [lut_path, netlist_path], False,
                   time.time() - t0)
        else:
            net = polymlp.load_lut_network(lut_path)
            _stage(res, "compile-lut", [lut_path, netlist_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("compile-lut", str(exc)) from exc

    # -- verify-lut ----------------------------------------------------------
    verify_path = path(f"verify-{mlp_digest}.txt")
    t0 = time.time()
    try:
        if fresh(verify_path):
            report = polymlp.verify_equivalence(mlp_model, net)
            if not report.ok:
                raise EquivalenceError(report.summary())
            tmp = f"{verify_path}.tmp.{os.getpid()}"
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(report.summary() + "\n")
            os.replace(tmp, verify_path)
            _stage(res, "verify-lut", [verify_path], False,
                   time.time() - t0)
        else:
            _stage(res, "verify-lut", [verify_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("verify-lut", str(exc)) from exc

    # -- train-vit ----------------------------------------------------------
    vit_digest = _digest("vit", ds_digest, cfg.vit)
    vit_path = path(f"vit-{vit_digest}.qvit")
    t0 = time.time()
    try:
        if fresh(vit_path):
            vit_model = vit.train_vit(cfgmod.vit_config(cfg), ds)
            vit.save_vit_model(vit_model, vit_path)
            _stage(res, "train-vit", [vit_path], False, time.time() - t0)
        else:
            vit_model = vit.load_vit_model(vit_path)
            _stage(res, "train-vit", [vit_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("train-vit", str(exc)) from exc

    # -- quantize ------------------------------------------------------------
    fixed_digest = _digest("fixed", vit_digest, cfg.fixed)
    fixed_path = path(f"vit-fixed-{fixed_digest}.qvit")
    t0 = time.time()
    try:
        if fresh(fixed_path):
            fixed_model = vit.quantize_vit(vit_model,
                                           cfgmod.fixed_format(cfg))
            vit.save_vit_model(fixed_model, fixed_path)
            _stage(res, "quantize", [fixed_path], False, time.time() - t0)
        else:
            fixed_model = vit.load_vit_model(fixed_path)
            _stage(res, "quantize", [fixed_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("quantize", str(exc)) from exc

    # -- infer ---------------------------------------------------------------
    infer_digest = _digest("infer", ds_digest, mlp_digest, fixed_digest)
    pixels, labels = ds.test_pixels, ds.test_labels
    fpga_hz = cfg.timing.fpga_clock_hz
    vit_profile = cfgmod.dnn_profile_name(cfg, "vit")
    predictions = {
        "threshold": (
            lambda: threshold.classify_batch(pixels, thr_model), None),
        "mlp": (
            lambda: polymlp.eval_lut(net, pixels),
            timingsim.PROFILES["mlp"].cycles / fpga_hz),
        "vit": (
            lambda: vit.predict_fixed(fixed_model, pixels),
            timingsim.PROFILES[vit_profile].cycles / fpga_hz),
        "vit-float": (lambda: vit.predict_vit(vit_model, pixels), None),
    }
    result_paths = {}
    results = {}
    latencies = {}
    t0 = time.time()
    try:
        cached_all = True
        for model_name, (runner, latency) in predictions.items():
            rp = path(f"result-{model_name}-{infer_digest}.toml")
            result_paths[model_name] = rp
            if fresh(rp):
                cached_all = False
                fid = mmf(tally(runner(), labels, n_ions))
                write_result(
                    rp, dataset=label, model=model_name, n_ions=n_ions,
                    samples=len(labels), result=fid,
                    latency_seconds=latency,
                )
            doc = read_result(rp)
            results[model_name] = result_to_fidelity(doc)
            res.errors_percent[model_name] = doc["mmf_error_percent"]
            if "latency_seconds" in doc:
                latencies[model_name] = doc["latency_seconds"]
        _stage(res, "infer", list(result_paths.values()), cached_all,
               time.time() - t0)
    except QdetectError as exc:
        raise PipelineError("infer", str(exc)) from exc

    # -- report --------------------------------------------------------------
    report_txt = path(f"report-{infer_digest}.txt")
    report_csv_path = path(f"report-{infer_digest}.csv")
    t0 = time.time()
    try:
        if fresh(report_txt, report_csv_path):
            table_rows = {
                name: results[name] for name in ("threshold", "mlp", "vit")
            }
            rep = compare_report(table_rows, latencies=latencies,
                                 dataset=label)
            for out_path, text in (
                (report_txt, render_compare_report(rep)),
                (report_csv_path, report_csv(rep)),
            ):
                tmp = f"{out_path}.tmp.{os.getpid()}"
                with open(tmp, "w", encoding="utf-8") as fh:
                    fh.write(text)
                os.replace(tmp, out_path)
            _stage(res, "report", [report_txt, report_csv_path], False,
                   time.time() - t0)
        else:
            _stage(res, "report", [report_txt, report_csv_path], True, 0.0)
    except QdetectError as exc:
        raise PipelineError("report", str(exc)) from exc

    # -- simulate ------------------------------------------------------------
    sim_digest = _digest("simulate", cfg.timing, cfg.dataset.height,
                         cfg.dataset.width)
    sim_paths = []
    t0 = time.time()
    try:
        cached_all = True
        for profile_name in ("mlp", vit_profile):
            tcfg = cfgmod.timing_config(cfg, profile_name)
            trace_path = path(f"trace-{profile_name}-{sim_digest}.tsv")
            latency_path = path(f"latency-{profile_name}-{sim_digest}.txt")
            sim_paths += [trace_path, latency_path]
            if fresh(trace_path, latency_path):
                cached_all = False
                trace = timingsim.simulate_frame(tcfg)
                timingsim.export_trace(trace, trace_path)
                report = timingsim.latency_report(trace, tcfg)
                tmp = f"{latency_path}.tmp.{os.getpid()}"
                with open(tmp, "w", encoding="utf-8") as fh:
                    fh.write(timingsim.render_latency_report(report))
                os.replace(tmp, latency_path)
        _stage(res, "simulate", sim_paths, cached_all, time.time() - t0)
    except QdetectError as exc:
        raise PipelineError("simulate", str(exc)) from exc

    return res

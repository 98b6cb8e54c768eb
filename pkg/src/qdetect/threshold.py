"""Photon-count threshold baseline.

Each ion gets an independent region of interest (default 4 wide, 8 tall,
centered on the ion) and a calibrated count threshold.  An ion is read as
bright when its ROI pixel sum is greater than or equal to its threshold.

Calibration maximizes the balanced per-class fidelity
(p(count >= t | bright) + p(count < t | dark)) / 2 over a candidate set
containing every distinct observed count and every observed count plus one —
this covers all points where the piecewise-constant objective can change, so
the result matches an exhaustive sweep.  Ties break toward the smallest
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, QubitState, default_roi, roi_sums
from .errors import CalibrationError, ClassificationError, ParseError

MODEL_HEADER = "qdetect-threshold-model v1"


@dataclass(frozen=True)
class IonThreshold:
    """ROI, threshold, and calibration fidelity for a single ion."""

    roi: tuple  # (row0, col0, width, height)
    threshold: float
    calibration_fidelity: float


@dataclass(frozen=True)
class ThresholdModel:
    """Per-ion thresholds; ion order matches the dataset's ion order."""

    ions: tuple

    @classmethod
    def from_parts(cls, rois, thresholds, fidelities) -> "ThresholdModel":
        return cls(ions=tuple(
            IonThreshold(tuple(int(v) for v in roi), float(t), float(f))
            for roi, t, f in zip(rois, thresholds, fidelities)
        ))

    @property
    def n_ions(self) -> int:
        return len(self.ions)


def calibrate(bright_counts, dark_counts) -> tuple:
    """Find the threshold maximizing balanced fidelity; returns (t, fidelity)."""
    bright = np.asarray(bright_counts, dtype=np.float64)
    dark = np.asarray(dark_counts, dtype=np.float64)
    if bright.size == 0 or dark.size == 0:
        raise CalibrationError("both populations must be non-empty")

    observed = np.concatenate([bright, dark])
    candidates = np.unique(np.concatenate([observed, observed + 1]))

    bright_sorted = np.sort(bright)
    dark_sorted = np.sort(dark)
    # P(bright >= t) and P(dark < t) via binary search on the sorted samples.
    p_bright = 1.0 - np.searchsorted(bright_sorted, candidates, side="left") / bright.size
    p_dark = np.searchsorted(dark_sorted, candidates, side="left") / dark.size
    fidelity = 0.5 * (p_bright + p_dark)

    best = int(np.argmax(fidelity))  # argmax returns the first (smallest t) max
    return float(candidates[best]), float(fidelity[best])


def calibrate_model(ds: Dataset, roi_width: int = 4, roi_height: int = 8) -> ThresholdModel:
    """Calibrate one threshold per ion from the training split."""
    cfg = ds.config
    ions = []
    for ion, center in enumerate(cfg.ion_centers):
        roi = default_roi(center, (cfg.height, cfg.width), roi_width, roi_height)
        sums = roi_sums(ds.train_pixels, roi)
        bright_mask = ((ds.train_labels >> ion) & 1) == 1
        t, fid = calibrate(sums[bright_mask], sums[~bright_mask])
        ions.append(IonThreshold(roi=roi, threshold=t, calibration_fidelity=fid))
    return ThresholdModel(ions=tuple(ions))


def classify_batch(pixels: np.ndarray, model: ThresholdModel) -> np.ndarray:
    """Classify a stack of images; returns the state bitmask per image."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    bits = np.zeros(len(pixels), dtype=np.uint8)
    for ion, it in enumerate(model.ions):
        row0, col0, width, height = it.roi
        h, w = pixels.shape[1:]
        if row0 + height > h or col0 + width > w:
            raise ClassificationError(
                f"model ROI {it.roi} does not fit a {h}x{w} image"
            )
        sums = pixels[:, row0 : row0 + height, col0 : col0 + width].sum(axis=(1, 2))
        bits |= (sums >= it.threshold).astype(np.uint8) << ion
    return bits


def classify(image, model: ThresholdModel) -> QubitState:
    """Classify a single image into a joint qubit state."""
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    bits = classify_batch(pixels[None], model)[0]
    return QubitState(n_ions=model.n_ions, bits=int(bits))


def save_threshold_model(model: ThresholdModel, path) -> None:
    lines = [MODEL_HEADER, f"n_ions {model.n_ions}"]
    for i, it in enumerate(model.ions):
        roi = " ".join(str(v) for v in it.roi)
        lines.append(
            f"ion {i} roi {roi} threshold {it.threshold!r} "
            f"fidelity {it.calibration_fidelity!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_threshold_model(path) -> ThresholdModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MODEL_HEADER:
        raise ParseError(f"{path}: not a threshold model file")
    if not lines[1].startswith("n_ions "):
        raise ParseError(f"{path}: missing n_ions line")
    n_ions = int(lines[1].split()[1])
    ions = []
    for ln in lines[2:]:
        parts = ln.split()
        if parts[0] != "ion" or parts[2] != "roi" or parts[7] != "threshold" \
                or parts[9] != "fidelity":
            raise ParseError(f"{path}: malformed line {ln!r}")
        roi = tuple(int(v) for v in parts[3:7])
        ions.append(IonThreshold(roi=roi, threshold=float(parts[8]),
                                 calibration_fidelity=float(parts[10])))
    if len(ions) != n_ions:
        raise ParseError(f"{path}: declared {n_ions} ions, found {len(ions)}")
    return ThresholdModel(ions=tuple(ions))

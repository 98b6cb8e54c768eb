"""Synthetic trapped-ion fluorescence images.

An image is built in three steps: render one Gaussian point-spread function
per bright ion, apply per-pixel multiplicative shot noise to the signal
component, and add Gaussian camera background to every pixel before rounding
and clamping to the detector's integer range.  Dark ions contribute no signal.

Two shot-noise semantics are provided (``ImageConfig.shot_noise``):

* ``"unit"`` — one factor ``m = k / lambda`` per pixel with
  ``k ~ Poisson(lambda)``, independent of the local signal.  The factor has
  unit mean and variance ``1/lambda``.
* ``"scaled"`` — ``k ~ Poisson(signal * lambda)`` and the noisy signal is
  ``k / lambda``: the variance scales with the local intensity like physical
  photon shot noise under a gain of ``1/lambda``.  This is the mode used by
  the bundled presets (see qdetect.config).

Determinism: every image is generated from its own counter-based RNG stream
keyed by ``(dataset seed, image index)``, so content never depends on batch
size, generation order, or worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import ConfigurationError, LabelingError
from .seeding import generator as _rng

QIMG_VERSION = 1

_STREAM_LABELS = 1
_STREAM_IMAGES = 2


@dataclass(frozen=True)
class QubitState:
    """Joint state of an ion chain: bit i of ``bits`` set means ion i is bright."""

    n_ions: int
    bits: int

    def __post_init__(self):
        if self.n_ions < 1:
            raise ConfigurationError("n_ions must be >= 1")
        if not 0 <= self.bits < (1 << self.n_ions):
            raise ConfigurationError(
                f"state bits {self.bits} out of range for {self.n_ions} ions"
            )

    def bright(self, ion: int) -> bool:
        return bool((self.bits >> ion) & 1)

    @classmethod
    def from_string(cls, s: str) -> "QubitState":
        bits = 0
        for i, ch in enumerate(s):
            if ch == "1":
                bits |= 1 << i
            elif ch != "0":
                raise ConfigurationError(f"bad state string {s!r}")
        return cls(n_ions=len(s), bits=bits)

    def __str__(self) -> str:
        return "".join("1" if self.bright(i) else "0" for i in range(self.n_ions))


@dataclass(frozen=True)
class ImageConfig:
    """Geometry and noise model of the synthetic camera frames."""

    height: int
    width: int
    ion_centers: tuple
    psf_sigma: float = 0.4
    psf_amplitude: float = 35.0
    poisson_lambda: float = 0.5
    bg_mean: float = 50.0
    bg_sigma: float = 20.0
    pixel_depth: int = 16
    shot_noise: str = "unit"

    def __post_init__(self):
        object.__setattr__(
            self, "ion_centers", tuple((float(r), float(c)) for r, c in self.ion_centers)
        )
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("image dimensions must be >= 1")
        for r, c in self.ion_centers:
            if not (0 <= r <= self.height - 1 and 0 <= c <= self.width - 1):
                raise ConfigurationError(
                    f"ion center ({r}, {c}) outside {self.height}x{self.width} image"
                )
        if self.psf_sigma <= 0:
            raise ConfigurationError("psf_sigma must be > 0")
        if self.poisson_lambda <= 0:
            raise ConfigurationError("poisson_lambda must be > 0")
        if self.bg_sigma < 0:
            raise ConfigurationError("bg_sigma must be >= 0")
        if not 1 <= self.pixel_depth <= 16:
            raise ConfigurationError("pixel_depth must be in [1, 16]")
        if self.shot_noise not in ("unit", "scaled"):
            raise ConfigurationError(
                f"shot_noise must be 'unit' or 'scaled', got {self.shot_noise!r}"
            )

    @property
    def n_ions(self) -> int:
        return len(self.ion_centers)

    @property
    def pixel_max(self) -> int:
        return (1 << self.pixel_depth) - 1


@dataclass(frozen=True)
class IonImage:
    """One camera frame with its prepared-state label."""

    pixels: np.ndarray
    label: QubitState


def default_ion_centers(height: int, width: int, n_ions: int,
                        spacing: float = 5.0) -> tuple:
    """Evenly spaced ions along the middle row, centered horizontally.

    Three ions on a 12x24 frame land on columns 7, 12, 17; a single ion on a
    10x10 frame sits at (5, 5).
    """
    row = float(height // 2)
    anchor = float(width // 2)
    return tuple(
        (row, anchor + (i - (n_ions - 1) / 2.0) * spacing) for i in range(n_ions)
    )


def default_roi(center, image_shape, width: int = 4, height: int = 8) -> tuple:
    """Width-4, height-8 region of interest centered on an ion.

    Returns (row0, col0, width, height), clipped into the image.
    """
    h, w = image_shape
    r, c = center
    row0 = int(np.floor(r - height / 2.0 + 0.5))
    col0 = int(np.floor(c - width / 2.0 + 0.5))
    row0 = max(0, min(row0, h - height))
    col0 = max(0, min(col0, w - width))
    return (row0, col0, width, height)


def render_psf(center, sigma: float, amplitude: float, shape) -> np.ndarray:
    """Noiseless Gaussian fluorescence profile of one ion.

    grid[r, c] = amplitude * exp(-((r - row)^2 + (c - col)^2) / (2 sigma^2))
    """
    h, w = shape
    row, col = float(center[0]), float(center[1])
    if not (0 <= row <= h - 1 and 0 <= col <= w - 1):
        raise ConfigurationError(f"PSF center ({row}, {col}) outside {h}x{w} grid")
    if sigma <= 0:
        raise ConfigurationError("sigma must be > 0")
    rr = np.arange(h, dtype=np.float64)[:, None] - row
    cc = np.arange(w, dtype=np.float64)[None, :] - col
    return amplitude * np.exp(-(rr**2 + cc**2) / (2.0 * sigma * sigma))


def shot_noise_factors(rng: np.random.Generator, lam: float,
                       signal: np.ndarray, mode: str) -> np.ndarray:
    """Unit-mean multiplicative shot-noise factors for a signal array."""
    signal = np.asarray(signal, dtype=np.float64)
    if mode == "unit":
        return rng.poisson(lam=lam, size=signal.shape) / lam
    if mode == "scaled":
        counts = rng.poisson(lam=np.maximum(signal, 0.0) * lam)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(signal > 0, counts / (signal * lam), 1.0)
        return m
    raise ConfigurationError(f"unknown shot-noise mode {mode!r}")


def synthesize_image(cfg: ImageConfig, state: QubitState, seed) -> IonImage:
    """Render one labeled frame: PSFs + shot noise + background, then digitize."""
    if state.n_ions != cfg.n_ions:
        raise LabelingError(
            f"state describes {state.n_ions} ions but config has {cfg.n_ions}"
        )
    shape = (cfg.height, cfg.width)
    signal = np.zeros(shape, dtype=np.float64)
    for i, center in enumerate(cfg.ion_centers):
        if state.bright(i):
            signal += render_psf(center, cfg.psf_sigma, cfg.psf_amplitude, shape)

    rng = _rng(seed)
    m = shot_noise_factors(rng, cfg.poisson_lambda, signal, cfg.shot_noise)
    noisy = signal * m
    noisy += rng.normal(cfg.bg_mean, cfg.bg_sigma, size=shape)

    # Round half away from zero, then clamp to the detector range.
    rounded = np.trunc(noisy + np.copysign(0.5, noisy))
    clamped = np.clip(rounded, 0, cfg.pixel_max)
    return IonImage(pixels=clamped.astype(np.uint16), label=state)


class _ImageSequence:
    """Read-only sequence view materializing IonImage objects on demand."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, n_ions: int):
        self._pixels = pixels
        self._labels = labels
        self._n_ions = n_ions

    def __len__(self) -> int:
        return len(self._labels)

    def __getitem__(self, i: int) -> IonImage:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        return IonImage(
            pixels=self._pixels[i],
            label=QubitState(self._n_ions, int(self._labels[i])),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class Dataset:
    """Train/test split of labeled frames plus the generating configuration."""

    config: ImageConfig
    seed: int
    train_pixels: np.ndarray = field(repr=False)
    train_labels: np.ndarray = field(repr=False)
    test_pixels: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)

    @property
    def train(self) -> _ImageSequence:
        return _ImageSequence(self.train_pixels, self.train_labels, self.config.n_ions)

    @property
    def test(self) -> _ImageSequence:
        return _ImageSequence(self.test_pixels, self.test_labels, self.config.n_ions)

    @property
    def n_images(self) -> int:
        return len(self.train_labels) + len(self.test_labels)


def _balanced_labels(seed, n_images: int, n_states: int) -> np.ndarray:
    """Per-block permutations of the state alphabet.

    Index i takes the (i mod n_states)-th entry of a permutation seeded by
    (seed, block): counts stay balanced to within one, and the label of image
    i never depends on the total dataset size.
    """
    labels = np.empty(n_images, dtype=np.uint8)
    for block in range((n_images + n_states - 1) // n_states):
        rng = _rng(seed, _STREAM_LABELS, block)
        perm = rng.permutation(n_states)
        lo = block * n_states
        hi = min(lo + n_states, n_images)
        labels[lo:hi] = perm[: hi - lo]
    return labels


def _worker_count() -> int:
    raw = os.environ.get("QDETECT_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def build_dataset(cfg: ImageConfig, n_images: int, split_ratio: float = 0.9,
                  seed: int = 0) -> Dataset:
    """Generate a labeled, balanced, reproducibly split dataset."""
    n_states = 1 << cfg.n_ions
    if n_images < max(2, n_states):
        raise ConfigurationError(
            f"need at least {max(2, n_states)} images, got {n_images}"
        )
    if not 0.0 < split_ratio < 1.0:
        raise ConfigurationError("split_ratio must lie in (0, 1)")

    labels = _balanced_labels(seed, n_images, n_states)

    pixels = np.empty((n_images, cfg.height, cfg.width), dtype=np.uint16)

    def render_range(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            state = QubitState(cfg.n_ions, int(labels[i]))
            pixels[i] = synthesize_image(cfg, state, seed=(seed, _STREAM_IMAGES, i)).pixels

    workers = _worker_count()
    if workers <= 1:
        render_range(0, n_images)
    else:
        chunk = max(1, (n_images + workers - 1) // workers)
        spans = [(lo, min(lo + chunk, n_images)) for lo in range(0, n_images, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda span: render_range(*span), spans))

    boundary = int(n_images * split_ratio + 0.5)
    boundary = min(max(boundary, 1), n_images - 1)
    return Dataset(
        config=cfg,
        seed=int(seed),
        train_pixels=pixels[:boundary],
        train_labels=labels[:boundary],
        test_pixels=pixels[boundary:],
        test_labels=labels[boundary:],
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write the QIMG container (see module docs for the exact layout)."""
    w = binio.Writer()
    w.raw(binio.MAGIC_QIMG)
    w.pack("H", QIMG_VERSION)
    w.pack("I", ds.n_images)
    w.pack("H", ds.config.height)
    w.pack("H", ds.config.width)
    w.pack("B", ds.config.n_ions)
    w.pack("B", ds.config.pixel_depth)
    w.pack("Q", ds.seed & (2**64 - 1))
    w.pack("I", len(ds.train_labels))
    for pixels, labels in ((ds.train_pixels, ds.train_labels),
                           (ds.test_pixels, ds.test_labels)):
        for i in range(len(labels)):
            w.pack("B", int(labels[i]))
            w.array(pixels[i].reshape(-1), np.uint16)
    binio.write_file(path, w.getvalue())


def load_dataset(path) -> Dataset:
    """Read a QIMG container.

    The container persists geometry, labels, and pixels; the generative noise
    parameters are not stored and come back as the module defaults.
    """
    with binio.open_reader(path, binio.MAGIC_QIMG, QIMG_VERSION) as r:
        n_images = r.unpack("I")
        height = r.unpack("H")
        width = r.unpack("H")
        n_ions = r.unpack("B")
        pixel_depth = r.unpack("B")
        seed = r.unpack("Q")
        boundary = r.unpack("I")
        if not 1 <= boundary <= n_images:
            raise ConfigurationError(
                f"split boundary {boundary} outside 1..{n_images}"
            )
        labels = np.empty(n_images, dtype=np.uint8)
        pixels = np.empty((n_images, height, width), dtype=np.uint16)
        for i in range(n_images):
            labels[i] = r.unpack("B")
            pixels[i] = r.array(np.uint16, height * width).reshape(height, width)

    cfg = ImageConfig(
        height=height,
        width=width,
        ion_centers=default_ion_centers(height, width, n_ions),
        pixel_depth=pixel_depth,
    )
    return Dataset(
        config=cfg,
        seed=seed,
        train_pixels=pixels[:boundary],
        train_labels=labels[:boundary],
        test_pixels=pixels[boundary:],
        test_labels=labels[boundary:],
    )


@dataclass(frozen=True)
class Histogram:
    """Binned ROI photon-count statistics for one labeled population."""

    bin_edges: np.ndarray
    bin_counts: np.ndarray
    population_tag: str


def roi_sums(images, roi) -> np.ndarray:
    """Summed counts inside (row0, col0, width, height) for each image."""
    row0, col0, width, height = roi
    if isinstance(images, np.ndarray) and images.ndim == 3:
        stack = images
    else:
        stack = np.stack([
            im.pixels if isinstance(im, IonImage) else np.asarray(im)
            for im in images
        ])
    _, h, w = stack.shape
    if not (0 <= row0 and 0 <= col0 and row0 + height <= h and col0 + width <= w):
        raise ConfigurationError(f"ROI {roi} outside {h}x{w} image")
    return stack[:, row0 : row0 + height, col0 : col0 + width].sum(axis=(1, 2))


def roi_histogram(images, roi, n_bins: int, population_tag: str,
                  value_range=None) -> Histogram:
    """Histogram of per-image ROI photon-count sums."""
    sums = roi_sums(images, roi)
    if value_range is None:
        lo, hi = float(sums.min()), float(sums.max())
        if lo == hi:
            hi = lo + 1.0
        value_range = (lo, hi)
    counts, edges = np.histogram(sums, bins=n_bins, range=value_range)
    return Histogram(bin_edges=edges, bin_counts=counts, population_tag=population_tag)

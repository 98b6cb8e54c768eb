"""Run configuration documents and named presets.

A run configuration is a TOML document with one section per pipeline stage
(``[dataset]``, ``[mlp]``, ``[vit]``, ``[fixed]``, ``[timing]``, ``[run]``).
Two presets ship with the package:

* ``paper-1qubit`` — 10x10 single-ion images, patch size 5.
* ``paper-3qubit`` — 12x24 three-ion images, patch size 6.

Both use the calibrated imaging point (PSF sigma 0.7, amplitude 140,
amplitude-scaled shot noise) and the calibrated 649-slot line profile; these
are the parameter sets under which the shipped classifiers reproduce the
reference error levels and latency metrics.  Every value, including seeds,
is pinned so that a preset run is bit-reproducible.

Unknown sections or keys are rejected with an error naming the offender, so
typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dataset import ImageConfig, default_ion_centers
from .errors import ConfigurationError
from .fixedpoint import FixedFormat
from .polymlp import PolyMlpConfig
from .timingsim import PROFILES, TimingConfig
from .vit import VitConfig


@dataclass(frozen=True)
class DatasetSection:
    ions: int = 3
    height: int = 12
    width: int = 24
    count: int = 12000
    seed: int = 20260501
    split: float = 0.9
    sigma: float = 0.7
    amplitude: float = 140.0
    poisson_lambda: float = 0.5  # TOML key: "lambda"
    bg_mean: float = 50.0
    bg_sigma: float = 20.0
    shot_noise: str = "scaled"


@dataclass(frozen=True)
class MlpSection:
    hidden_widths: tuple = (256, 100, 100, 100)
    fan_in: int = 4
    activation_bits: int = 2
    poly_degree: int = 2
    subneurons: int = 2
    seed: int = 7
    epochs: int = 25
    batch_size: int = 128
    learning_rate: float = 0.008
    weight_decay: float = 0.01
    calibration: tuple = ("quantile", 0.0, 0.999)


@dataclass(frozen=True)
class VitSection:
    patch_size: int = 6
    latent_dim: int = 16
    n_heads: int = 8
    n_layers: int = 1
    learning_rate: float = 0.05
    batch_size: int = 128
    epochs: int = 30
    seed: int = 11
    head_shape: str = "split"


@dataclass(frozen=True)
class FixedSection:
    format: str = "16.8"


@dataclass(frozen=True)
class TimingSection:
    slots_per_line: int = 649
    pixel_clock_hz: int = 17_000_000
    fpga_clock_hz: int = 250_000_000
    exposure_s: float = 1e-3
    frame_transfer_s: float = 0.41e-3


@dataclass(frozen=True)
class RunSection:
    label: str = "3-qubit"
    out_dir: str = "runs/paper-3qubit"


@dataclass(frozen=True)
class RunConfig:
    name: str
    dataset: DatasetSection
    mlp: MlpSection
    vit: VitSection
    fixed: FixedSection
    timing: TimingSection
    run: RunSection


_SECTIONS = {
    "dataset": DatasetSection,
    "mlp": MlpSection,
    "vit": VitSection,
    "fixed": FixedSection,
    "timing": TimingSection,
    "run": RunSection,
}

# TOML key -> dataclass field name, where they differ.
_KEY_ALIASES = {"dataset": {"lambda": "poisson_lambda"}}

PRESETS = {
    "paper-1qubit": {
        "dataset": {
            "ions": 1, "height": 10, "width": 10, "count": 12000,
            "seed": 20260501, "split": 0.9, "sigma": 0.7,
            "amplitude": 140.0, "lambda": 0.5, "bg_mean": 50.0,
            "bg_sigma": 20.0, "shot_noise": "scaled",
        },
        "mlp": {
            "hidden_widths": [256, 100, 100, 100], "fan_in": 4,
            "activation_bits": 2, "poly_degree": 2, "subneurons": 2,
            "seed": 7, "epochs": 25, "batch_size": 128,
            "learning_rate": 0.008, "weight_decay": 0.01,
            "calibration": ["quantile", 0.0, 0.999],
        },
        "vit": {
            "patch_size": 5, "latent_dim": 16, "n_heads": 8, "n_layers": 1,
            "learning_rate": 0.05, "batch_size": 128, "epochs": 30,
            "seed": 11, "head_shape": "split",
        },
        "fixed": {"format": "16.8"},
        "timing": {
            "slots_per_line": 649, "pixel_clock_hz": 17_000_000,
            "fpga_clock_hz": 250_000_000, "exposure_s": 1e-3,
            "frame_transfer_s": 0.41e-3,
        },
        "run": {"label": "1-qubit", "out_dir": "runs/paper-1qubit"},
    },
    "paper-3qubit": {
        "dataset": {
            "ions": 3, "height": 12, "width": 24, "count": 12000,
            "seed": 20260501, "split": 0.9, "sigma": 0.7,
            "amplitude": 140.0, "lambda": 0.5, "bg_mean": 50.0,
            "bg_sigma": 20.0, "shot_noise": "scaled",
        },
        "mlp": {
            "hidden_widths": [256, 100, 100, 100], "fan_in": 4,
            "activation_bits": 2, "poly_degree": 2, "subneurons": 2,
            "seed": 7, "epochs": 25, "batch_size": 128,
            "learning_rate": 0.008, "weight_decay": 0.01,
            "calibration": ["quantile", 0.0, 0.999],
        },
        "vit": {
            "patch_size": 6, "latent_dim": 16, "n_heads": 8, "n_layers": 1,
            "learning_rate": 0.05, "batch_size": 128, "epochs": 30,
            "seed": 11, "head_shape": "split",
        },
        "fixed": {"format": "16.8"},
        "timing": {
            "slots_per_line": 649, "pixel_clock_hz": 17_000_000,
            "fpga_clock_hz": 250_000_000, "exposure_s": 1e-3,
            "frame_transfer_s": 0.41e-3,
        },
        "run": {"label": "3-qubit", "out_dir": "runs/paper-3qubit"},
    },
}


def _coerce(value, reference):
    """Match TOML value types to the dataclass defaults (lists -> tuples)."""
    if isinstance(reference, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(reference, float) and isinstance(value, int):
        return float(value)
    return value


def _parse_section(name: str, mapping: dict):
    cls = _SECTIONS[name]
    aliases = _KEY_ALIASES.get(name, {})
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        field_name = aliases.get(key, key)
        if field_name not in known:
            raise ConfigurationError(f"[{name}] unknown key {key!r}")
        default = getattr(cls, field_name)
        coerced = _coerce(value, default)
        if not isinstance(coerced, type(default)) and not (
            isinstance(default, float) and isinstance(coerced, int)
        ):
            raise ConfigurationError(
                f"[{name}] key {key!r} expects "
                f"{type(default).__name__}, got {type(value).__name__}"
            )
        kwargs[field_name] = coerced
    return cls(**kwargs)


def from_mapping(mapping: dict, name: str = "<config>") -> RunConfig:
    """Build a validated RunConfig from a nested mapping."""
    unknown = set(mapping) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(
            f"unknown config section(s): {', '.join(sorted(unknown))}"
        )
    sections = {
        sec: _parse_section(sec, mapping.get(sec, {})) for sec in _SECTIONS
    }
    return RunConfig(name=name, **sections)


def load_run_config(path) -> RunConfig:
    """Parse a TOML run-configuration file."""
    with open(path, "rb") as fh:
        try:
            mapping = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    return from_mapping(mapping, name=str(path))


def preset(name: str) -> RunConfig:
    """One of the shipped presets by name."""
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: "
            f"{', '.join(sorted(PRESETS))}"
        )
    return from_mapping(PRESETS[name], name=name)


def resolve_config(name_or_path) -> RunConfig:
    """Accept either a preset name or a path to a TOML document."""
    text = str(name_or_path)
    if text in PRESETS:
        return preset(text)
    return load_run_config(name_or_path)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {type(value).__name__}")


def to_toml(cfg: RunConfig) -> str:
    """Canonical TOML rendering (re-parses to an identical config)."""
    reverse_aliases = {
        sec: {field: key for key, field in pairs.items()}
        for sec, pairs in _KEY_ALIASES.items()
    }
    lines = []
    for sec_name, cls in _SECTIONS.items():
        section = getattr(cfg, sec_name)
        lines.append(f"[{sec_name}]")
        for f in fields(cls):
            key = reverse_aliases.get(sec_name, {}).get(f.name, f.name)
            lines.append(f"{key} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# bridges to the module configs


def image_config(cfg: RunConfig) -> ImageConfig:
    ds = cfg.dataset
    return ImageConfig(
        height=ds.height,
        width=ds.width,
        ion_centers=default_ion_centers(ds.height, ds.width, ds.ions),
        psf_sigma=ds.sigma,
        psf_amplitude=ds.amplitude,
        poisson_lambda=ds.poisson_lambda,
        bg_mean=ds.bg_mean,
        bg_sigma=ds.bg_sigma,
        shot_noise=ds.shot_noise,
    )


def mlp_config(cfg: RunConfig) -> PolyMlpConfig:
    m = cfg.mlp
    return PolyMlpConfig(
        hidden_widths=m.hidden_widths,
        n_classes=2 ** cfg.dataset.ions,
        fan_in=m.fan_in,
        activation_bits=m.activation_bits,
        poly_degree=m.poly_degree,
        subneurons=m.subneurons,
        seed=m.seed,
        learning_rate=m.learning_rate,
        epochs=m.epochs,
        batch_size=m.batch_size,
        weight_decay=m.weight_decay,
        input_calibration=m.calibration,
    )


def vit_config(cfg: RunConfig) -> VitConfig:
    v = cfg.vit
    return VitConfig(
        image=(cfg.dataset.height, cfg.dataset.width),
        patch_size=v.patch_size,
        n_classes=2 ** cfg.dataset.ions,
        latent_dim=v.latent_dim,
        n_heads=v.n_heads,
        n_layers=v.n_layers,
        learning_rate=v.learning_rate,
        batch_size=v.batch_size,
        epochs=v.epochs,
        seed=v.seed,
        head_shape=v.head_shape,
    )


def fixed_format(cfg: RunConfig) -> FixedFormat:
    return FixedFormat.parse(cfg.fixed.format)


def timing_config(cfg: RunConfig, profile_name: str) -> TimingConfig:
    if profile_name not in PROFILES:
        raise ConfigurationError(
            f"unknown latency profile {profile_name!r}; "
            f"available: {', '.join(sorted(PROFILES))}"
        )
    t = cfg.timing
    return TimingConfig(
        image=(cfg.dataset.height, cfg.dataset.width),
        dnn_cycles=PROFILES[profile_name].cycles,
        pixel_clock_hz=t.pixel_clock_hz,
        slots_per_line=t.slots_per_line,
        exposure_s=t.exposure_s,
        frame_transfer_s=t.frame_transfer_s,
        fpga_clock_hz=t.fpga_clock_hz,
    )


def dnn_profile_name(cfg: RunConfig, kind: str) -> str:
    """Latency profile key for a classifier kind under this config."""
    if kind == "mlp":
        return "mlp"
    if kind == "vit":
        return "vit1" if cfg.dataset.ions == 1 else "vit3"
    raise ConfigurationError(f"unknown classifier kind {kind!r}")

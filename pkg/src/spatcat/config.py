"""Run configuration: JSON schema, overrides, and aggregated validation.

A run config is one JSON document with fixed sections (data, priors,
sampler, knots, model, prediction) plus output_dir and seed.  Unknown keys
anywhere are rejected, every violation is collected rather than failing on
the first, and command-line --set overrides are applied to the raw document
before validation so they face the same checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .errors import SpatcatError
from .model import PriorSettings
from .sampler import SamplerConfig
from .simulation import SimConfig


class ConfigError(SpatcatError):
    """Carries every validation failure found in a config document."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__(
            "configuration invalid:\n" + "\n".join(f"  - {e}" for e in self.errors)
        )


@dataclass
class DataConfig:
    train_csv: str | None = None
    test_csv: str | None = None
    control_label: str | None = None


@dataclass
class KnotsConfig:
    mode: str = "grid"  # "grid" places knots on a regular lattice;
    nx: int = 15        # "subsample" draws them from the data locations
    ny: int = 15
    bounds: list | None = None  # [xmin, xmax, ymin, ymax]; data bbox if None
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("grid", "subsample"):
            raise ValueError(f"knots.mode must be 'grid' or 'subsample', got {self.mode!r}")
        if self.mode == "subsample" and (self.k is None or self.k < 1):
            raise ValueError("knots.k (>= 1) required for subsample mode")
        if self.mode == "grid" and (self.nx < 1 or self.ny < 1):
            raise ValueError("knots.nx and knots.ny must be >= 1")
        if self.bounds is not None and len(self.bounds) != 4:
            raise ValueError("knots.bounds must be [xmin, xmax, ymin, ymax]")


@dataclass
class ModelConfig:
    u: int | None = None
    u_min: int | None = None
    u_max: int | None = None

    def __post_init__(self):
        has_single = self.u is not None
        has_range = self.u_min is not None or self.u_max is not None
        if has_single and has_range:
            raise ValueError("model.u and model.u_min/u_max are mutually exclusive")
        if has_range and (self.u_min is None or self.u_max is None):
            raise ValueError("model.u_min and model.u_max must be given together")
        if has_single and self.u < 1:
            raise ValueError("model.u must be >= 1")
        if has_range and not 1 <= self.u_min <= self.u_max:
            raise ValueError("need 1 <= model.u_min <= model.u_max")


@dataclass
class PredictionConfig:
    grid_nx: int | None = None
    grid_ny: int | None = None
    bounds: list | None = None
    locations_csv: str | None = None
    want_outcomes: bool = False
    quantiles: list = field(default_factory=list)
    tile: list | None = None  # [dx, dy] rectangular area tiling
    area_class: str | None = None
    reservoir_size: int = 512

    def __post_init__(self):
        grid_given = self.grid_nx is not None or self.grid_ny is not None
        if grid_given and (self.grid_nx is None or self.grid_ny is None):
            raise ValueError("prediction.grid_nx and grid_ny must be given together")
        if grid_given and self.locations_csv:
            raise ValueError("prediction grid and locations_csv are mutually exclusive")
        if self.bounds is not None and len(self.bounds) != 4:
            raise ValueError("prediction.bounds must be [xmin, xmax, ymin, ymax]")
        if self.tile is not None:
            if len(self.tile) != 2 or min(self.tile) <= 0:
                raise ValueError("prediction.tile must be [dx, dy] with dx, dy > 0")
            if not self.want_outcomes:
                raise ValueError("area summaries (prediction.tile) require want_outcomes")
        for q in self.quantiles:
            if not 0.0 < q < 1.0:
                raise ValueError(f"prediction quantile {q} outside (0, 1)")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    priors: PriorSettings = field(default_factory=PriorSettings)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    knots: KnotsConfig = field(default_factory=KnotsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    output_dir: str = "spatcat_out"
    seed: int | None = None


_SECTIONS = {
    "data": DataConfig,
    "priors": PriorSettings,
    "sampler": SamplerConfig,
    "knots": KnotsConfig,
    "model": ModelConfig,
    "prediction": PredictionConfig,
}
_SCALARS = {"output_dir", "seed"}


def _build_section(cls, payload: dict, section: str, errors: list[str]):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    for key in sorted(unknown):
        errors.append(f"{section}.{key}: unknown key")
    kwargs = {k: v for k, v in payload.items() if k in allowed}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(f"{section}: {exc}")
        return cls()


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    """Apply key.path=value pairs to a raw config document.

    Values parse as JSON literals when possible, else as strings, so
    --set sampler.n_samples=100 and --set data.train_csv=train.csv both
    work.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = document
        parts = path.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r}: {part} is not a section"])
        node[parts[-1]] = value
    return document


def validate_run_config(document: dict) -> RunConfig:
    """Build a RunConfig from a raw dict, aggregating every violation."""
    errors: list[str] = []
    if not isinstance(document, dict):
        raise ConfigError(["top-level config must be a JSON object"])
    unknown = set(document) - set(_SECTIONS) - _SCALARS
    for key in sorted(unknown):
        errors.append(f"{key}: unknown top-level key")

    sections = {}
    for name, cls in _SECTIONS.items():
        payload = document.get(name, {})
        if not isinstance(payload, dict):
            errors.append(f"{name}: must be a JSON object")
            payload = {}
        sections[name] = _build_section(cls, payload, name, errors)

    cfg = RunConfig(**sections)
    if "output_dir" in document:
        if not isinstance(document["output_dir"], str):
            errors.append("output_dir: must be a string")
        else:
            cfg.output_dir = document["output_dir"]
    if "seed" in document:
        if not isinstance(document["seed"], int):
            errors.append("seed: must be an integer")
        else:
            cfg.seed = document["seed"]
            cfg.sampler.seed = document["seed"]

    if errors:
        raise ConfigError(errors)
    return cfg


def load_run_config(path, overrides: list[str] | None = None) -> RunConfig:
    with open(path) as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    if overrides:
        document = apply_overrides(document, overrides)
    return validate_run_config(document)


def load_sim_config(path, overrides: list[str] | None = None) -> SimConfig:
    """Read and validate a simulation design document."""
    with open(path) as fh:
        try:
            document = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    if overrides:
        document = apply_overrides(document, overrides)
    errors: list[str] = []
    allowed = {f.name for f in fields(SimConfig)}
    unknown = set(document) - allowed
    for key in sorted(unknown):
        errors.append(f"{key}: unknown key")
    kwargs = {k: v for k, v in document.items() if k in allowed}
    for key in ("mu_fixed", "gamma_fixed", "omega_fixed", "bounds"):
        if isinstance(kwargs.get(key), list):
            kwargs[key] = tuple(kwargs[key])
    try:
        cfg = SimConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(str(exc))
        cfg = None
    if errors:
        raise ConfigError(errors)
    return cfg

"""Pipeline configuration read from INI files.

Each section maps onto one settings dataclass; keys must match field names.
Values are parsed as int, float, bool or ``none`` when they look like one
and kept as strings otherwise; the dataclasses validate the result.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .ba.runner import NeuralBAConfig
from .errors import ConfigError
from .losses import SupervisionConfig

STAGES = ("synth", "align", "match", "ba", "refine-depth", "render", "losses", "fuse", "eval")


@dataclass
class PipelineSettings:
    stages: str = ",".join(STAGES)
    seed: int = 0
    threads: int = 0  # 0 keeps the library defaults
    log_level: str = "INFO"

    def stage_list(self) -> list[str]:
        names = [s.strip() for s in self.stages.split(",") if s.strip()]
        unknown = [s for s in names if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stage(s) {', '.join(unknown)}; choose from {', '.join(STAGES)}")
        # always execute in pipeline order, whatever order the user listed them in
        return [s for s in STAGES if s in names]


@dataclass
class SynthSettings:
    preset: str = "sphere"
    num_views: int | None = None
    width: int | None = None
    height: int | None = None
    focal: float | None = None
    pixel_noise: float | None = None
    point_noise: float | None = None
    corrupt_fraction: float | None = None
    region_corruption: float | None = None


@dataclass
class RefineSettings:
    provider: str = "oracle"  # oracle | directory
    provider_dir: str | None = None
    samples: int = 3
    rounds: int = 10
    window: int = 25
    stride: int = 1
    eps_edge: float = 1e-7
    eps_smooth: float = 1e-7
    tau_e: float = 0.5
    tau_D: float = 0.25
    fill_holes: bool = True
    drift_a: float = 1.05
    drift_b: float = 0.02
    drift_jitter: float = 0.02
    detail_gain: float = 1.0
    noise: float = 0.0

    def __post_init__(self):
        if self.provider not in ("oracle", "directory"):
            raise ConfigError(f"refine provider must be 'oracle' or 'directory', got {self.provider!r}")
        if self.provider == "directory" and not self.provider_dir:
            raise ConfigError("refine provider 'directory' needs provider_dir")
        if self.rounds < 1 or self.samples < 1:
            raise ConfigError("refine rounds and samples must be at least 1")


@dataclass
class RenderSettings:
    cov_floor: float = 0.3
    alpha_min: float = 1.0 / 255.0
    cull_backface: bool = True
    neighbours: int = 8
    flatness: float = 0.1
    opacity: float = 0.9
    scale_factor: float = 0.7


@dataclass
class LossSettings:
    pseudo_closed: bool = True  # pair the last view with the first, as on a camera ring
    occlusion_tol: float | None = 0.05
    jitter_distance: float | None = None  # pivot distance for jittered partners; None uses the mean rendered depth


@dataclass
class FusionSettings:
    voxel_size: float | None = None
    truncation: float | None = None
    depth_source: str = "rendered"  # rendered | refined

    def __post_init__(self):
        if self.depth_source not in ("rendered", "refined"):
            raise ConfigError(f"fusion depth_source must be 'rendered' or 'refined', got {self.depth_source!r}")
        if self.voxel_size is not None and self.voxel_size <= 0:
            raise ConfigError("fusion voxel_size must be positive")


@dataclass
class EvalSettings:
    gt_samples: int = 20000
    visibility_filter: bool = True
    min_views: int = 2
    f1_tau: float | None = None
    figures: bool = True


@dataclass
class PipelineConfig:
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    synthetic: SynthSettings = field(default_factory=SynthSettings)
    ba: NeuralBAConfig = field(default_factory=NeuralBAConfig)
    refine: RefineSettings = field(default_factory=RefineSettings)
    render: RenderSettings = field(default_factory=RenderSettings)
    supervision: SupervisionConfig = field(default_factory=SupervisionConfig)
    losses: LossSettings = field(default_factory=LossSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # field names such as tau_D are case sensitive
        for section, values in self.to_dict().items():
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, section: str, **values) -> "PipelineConfig":
        current = getattr(self, section)
        try:
            updated = dataclasses.replace(current, **values)
        except TypeError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
        return dataclasses.replace(self, **{section: updated})


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _coerce(section: str, key: str, value, default):
    """Match the parsed value to the type of the field's default where that is unambiguous."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, str):
        return str(value)
    if type(value) is not type(default):
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config(text: str, source: str = "<string>") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = PipelineConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {', '.join(sorted(known))}")
        current = getattr(cfg, section)
        defaults = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        values = {}
        for key, raw in cp[section].items():
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            if isinstance(defaults[key], str):
                values[key] = raw.strip()  # "none" is a legitimate string option
            else:
                values[key] = _coerce(section, key, _parse(raw), defaults[key])
        cfg = cfg.with_overrides(section, **values)
    return cfg


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), str(p))
